//! Penalized training of MLP classifiers with Adam, epoch selection on
//! validation metrics, and lambda-by-seed sweeps producing tradeoff tables.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BalancedBatches, DataError, Dataset};
use crate::metrics::{
    average_precision, delta_dp, delta_eo, mean_thresholded_dp, mean_thresholded_eo, Constraint,
    GroupedScores, MetricsError, ThresholdSet,
};
use crate::mixup::{fair_mixup_penalty, gap_penalty, MixupError, PenaltyForm, Space};
use crate::model::{MlpModel, ModelError, TapedMlp};
use crate::{Matrix, Real};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Distinct salt per RNG stream derived from one user seed, so disabling a
// penalty never perturbs the batch order or the initialization.
const SALT_BATCHES: u64 = 0x9e37_79b9_7f4a_7c15;
const SALT_T_DRAWS: u64 = 0x2545_f491_4f6c_dd1d;
const SALT_ADVERSARY: u64 = 0xda94_2042_e4dd_58b5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("parameters became non-finite at epoch {epoch}, batch {batch} (lambda {lambda})")]
    NumericalFailure { epoch: usize, batch: usize, lambda: Real },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mixup(#[from] MixupError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Training objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    GapReg,
    FairMixup,
    AdvDebias,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Erm => "erm",
            Method::GapReg => "gap_reg",
            Method::FairMixup => "fair_mixup",
            Method::AdvDebias => "adv_debias",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "erm" => Ok(Method::Erm),
            "gap_reg" => Ok(Method::GapReg),
            "fair_mixup" => Ok(Method::FairMixup),
            "adv_debias" => Ok(Method::AdvDebias),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub constraint: Constraint,
    pub space: Space,
    pub lambda: Real,
    pub penalty_form: PenaltyForm,
    /// Finite-difference half-width for the mixup penalty, also the margin
    /// kept between the drawn t and the interval ends.
    pub h: Real,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Real,
    pub seed: u64,
    pub layer_dims: Vec<usize>,
    pub split_index: usize,
    /// Hidden width of the adversary head (adv_debias only).
    pub adv_hidden: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda < 0.0 {
            return Err(TrainError::BadConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        if !(self.h > 0.0 && self.h < 0.5) {
            return Err(TrainError::BadConfig(format!("h must lie in (0, 0.5), got {}", self.h)));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::BadConfig("learning rate must be positive".into()));
        }
        if self.method == Method::AdvDebias && self.adv_hidden == 0 {
            return Err(TrainError::BadConfig("adv_hidden must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with the standard bias-corrected moment estimates.
pub struct Adam {
    lr: Real,
    beta1: Real,
    beta2: Real,
    eps: Real,
    step: usize,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: Real, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn for_model(lr: Real, model: &MlpModel) -> Self {
        let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.shape()).collect();
        Adam::new(lr, &shapes)
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = &grads[i];
            self.m[i] = self.m[i].lincomb(self.beta1, g, 1.0 - self.beta1);
            let g2 = g.zip_map(g, |a, b| a * b);
            self.v[i] = self.v[i].lincomb(self.beta2, &g2, 1.0 - self.beta2);
            let p = params[i].as_mut_slice();
            let (ms, vs) = (self.m[i].as_slice(), self.v[i].as_slice());
            for j in 0..p.len() {
                let mhat = ms[j] / bc1;
                let vhat = vs[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Validation trace of one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Real,
    pub val_ap: Real,
    pub val_gap: Real,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub selected_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn grouped(model: &MlpModel, ds: &Dataset) -> Result<GroupedScores<Real>, TrainError> {
    let scores = model.forward(&ds.x)?;
    Ok(GroupedScores::new(scores.as_slice(), &ds.y, &ds.a)?)
}

fn gap_for(constraint: Constraint, g: &GroupedScores<Real>) -> Result<Real, TrainError> {
    Ok(match constraint {
        Constraint::Dp => delta_dp(g)?,
        Constraint::Eo => delta_eo(g)?,
    })
}

/// Selection over the epoch trace: among epochs whose validation AP is
/// within 0.01 of the best, pick the smallest validation gap; earliest
/// epoch breaks ties.
pub fn select_epoch(history: &[EpochRecord]) -> usize {
    let best_ap = history.iter().map(|r| r.val_ap).fold(Real::NEG_INFINITY, Real::max);
    let mut chosen = 0usize;
    let mut chosen_gap = Real::INFINITY;
    for (i, rec) in history.iter().enumerate() {
        if rec.val_ap >= best_ap - 0.01 && rec.val_gap < chosen_gap {
            chosen = i;
            chosen_gap = rec.val_gap;
        }
    }
    chosen
}

fn adversary_dims(adv_hidden: usize) -> Vec<usize> {
    vec![1, adv_hidden, 1]
}

/// One gradient step on the classifier for every method except adv_debias.
#[allow(clippy::too_many_arguments)]
fn classifier_step(
    cfg: &TrainConfig,
    model: &mut MlpModel,
    opt: &mut Adam,
    batch: &crate::data::TrainBatch,
    t_rng: &mut ChaCha8Rng,
) -> Result<Real, TrainError> {
    let mut tape = crate::diff::Tape::new();
    let taped = TapedMlp::bind(&mut tape, model, 0)?;
    let x = tape.constant(batch.x.clone());
    let labels = tape.constant(Matrix::from_vec(
        batch.y.len(),
        1,
        batch.y.iter().map(|&v| v as Real).collect(),
    ));
    let scores = taped.scores(&mut tape, x)?;
    let bce = tape.bce_mean(scores, labels)?;
    let loss = match cfg.method {
        Method::Erm => bce,
        Method::GapReg if cfg.lambda > 0.0 => {
            let pen = gap_penalty(&mut tape, &taped, &batch.pairs)?;
            tape.lincomb(bce, 1.0, pen, cfg.lambda)?
        }
        Method::FairMixup if cfg.lambda > 0.0 => {
            let t = t_rng.gen_range(cfg.h..=1.0 - cfg.h);
            let pen = fair_mixup_penalty(
                &mut tape,
                &taped,
                &batch.pairs,
                cfg.space,
                t,
                cfg.h,
                cfg.penalty_form,
            )?;
            tape.lincomb(bce, 1.0, pen, cfg.lambda)?
        }
        _ => bce,
    };
    let loss_value = tape.scalar_value(loss);
    let grads = tape.backward(loss)?;
    let mut params = model.params_mut();
    opt.step(&mut params, &grads);
    Ok(loss_value)
}

/// Adversarial step: the classifier descends BCE(y) - lambda * BCE of a
/// frozen adversary that reads its scores, then the adversary descends its
/// own BCE on the detached scores. For EO the adversary is a pair of heads,
/// one per label.
fn adversarial_step(
    cfg: &TrainConfig,
    model: &mut MlpModel,
    adversaries: &mut [MlpModel],
    opt: &mut Adam,
    adv_opts: &mut [Adam],
    batch: &crate::data::TrainBatch,
) -> Result<Real, TrainError> {
    // Per-adversary (input rows, group labels): the whole batch for DP, the
    // per-label halves for EO. Balanced batches lay rows out cell-block by
    // cell-block, so the halves are contiguous and their group labels known.
    let mut tasks: Vec<(Matrix, Vec<u8>)> = Vec::new();
    match cfg.constraint {
        Constraint::Dp => tasks.push((batch.x.clone(), batch.a.clone())),
        Constraint::Eo => {
            let q = batch.x.rows() / 4;
            for half in 0..2 {
                let lo = 2 * half * q;
                let hi = lo + 2 * q;
                tasks.push((batch.x.row_range(lo, hi), batch.a[lo..hi].to_vec()));
            }
        }
    }

    // classifier update with frozen adversaries
    let mut tape = crate::diff::Tape::new();
    let taped = TapedMlp::bind(&mut tape, model, 0)?;
    let x = tape.constant(batch.x.clone());
    let labels = tape.constant(Matrix::from_vec(
        batch.y.len(),
        1,
        batch.y.iter().map(|&v| v as Real).collect(),
    ));
    let scores = taped.scores(&mut tape, x)?;
    let bce = tape.bce_mean(scores, labels)?;
    let mut loss = bce;
    if cfg.lambda > 0.0 {
        for (adv, (xs, attrs)) in adversaries.iter().zip(&tasks) {
            let frozen = TapedMlp::bind_frozen(&mut tape, adv);
            let xs_node = tape.constant(xs.clone());
            let s = taped.scores(&mut tape, xs_node)?;
            let pred = frozen.scores(&mut tape, s)?;
            let a_node = tape.constant(Matrix::from_vec(
                attrs.len(),
                1,
                attrs.iter().map(|&v| v as Real).collect(),
            ));
            let adv_bce = tape.bce_mean(pred, a_node)?;
            loss = tape.lincomb(loss, 1.0, adv_bce, -cfg.lambda / tasks.len() as Real)?;
        }
    }
    let loss_value = tape.scalar_value(loss);
    let grads = tape.backward(loss)?;
    let mut params = model.params_mut();
    opt.step(&mut params, &grads);

    // adversary updates on detached scores
    if cfg.lambda > 0.0 {
        for ((adv, adv_opt), (xs, attrs)) in
            adversaries.iter_mut().zip(adv_opts.iter_mut()).zip(&tasks)
        {
            let detached = model.forward(xs)?;
            let mut tape = crate::diff::Tape::new();
            let taped_adv = TapedMlp::bind(&mut tape, adv, 0)?;
            let s = tape.constant(detached);
            let pred = taped_adv.scores(&mut tape, s)?;
            let a_node = tape.constant(Matrix::from_vec(
                attrs.len(),
                1,
                attrs.iter().map(|&v| v as Real).collect(),
            ));
            let adv_loss = tape.bce_mean(pred, a_node)?;
            let grads = tape.backward(adv_loss)?;
            let mut params = adv.params_mut();
            adv_opt.step(&mut params, &grads);
        }
    }
    Ok(loss_value)
}

pub fn train(cfg: &TrainConfig, train_ds: &Dataset, val_ds: &Dataset) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut model = MlpModel::init(cfg.seed, &cfg.layer_dims, cfg.split_index)?;
    let mut opt = Adam::for_model(cfg.learning_rate, &model);
    let mut batches =
        BalancedBatches::new(train_ds, cfg.constraint, cfg.batch_size, cfg.seed ^ SALT_BATCHES)?;
    let mut t_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SALT_T_DRAWS);

    let mut adversaries: Vec<MlpModel> = Vec::new();
    let mut adv_opts: Vec<Adam> = Vec::new();
    if cfg.method == Method::AdvDebias {
        let n_adv = match cfg.constraint {
            Constraint::Dp => 1,
            Constraint::Eo => 2,
        };
        for i in 0..n_adv {
            let adv = MlpModel::init(
                (cfg.seed ^ SALT_ADVERSARY).wrapping_add(i as u64),
                &adversary_dims(cfg.adv_hidden),
                0,
            )?;
            adv_opts.push(Adam::for_model(cfg.learning_rate, &adv));
            adversaries.push(adv);
        }
    }

    let per_epoch = batches.batches_per_epoch();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_acc = 0.0;
        for b in 0..per_epoch {
            let batch = batches.next_batch();
            let loss = match cfg.method {
                Method::AdvDebias => adversarial_step(
                    cfg,
                    &mut model,
                    &mut adversaries,
                    &mut opt,
                    &mut adv_opts,
                    &batch,
                )?,
                _ => classifier_step(cfg, &mut model, &mut opt, &batch, &mut t_rng)?,
            };
            loss_acc += loss;
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(TrainError::NumericalFailure { epoch, batch: b, lambda: cfg.lambda });
            }
        }
        let g = grouped(&model, val_ds)?;
        let scores = model.forward(&val_ds.x)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_acc / per_epoch as Real,
            val_ap: average_precision(scores.as_slice(), &val_ds.y)?,
            val_gap: gap_for(cfg.constraint, &g)?,
        });
        snapshots.push(model.clone());
    }
    let selected = select_epoch(&history);
    Ok(TrainOutcome { model: snapshots[selected].clone(), selected_epoch: selected, history })
}

// ---------------------------------------------------------------------------
// Evaluation and sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub ap: Real,
    pub ddp: Real,
    pub deo: Real,
    pub mean_thresh_dp: Real,
    pub mean_thresh_eo: Real,
}

pub fn evaluate(model: &MlpModel, ds: &Dataset) -> Result<EvalMetrics, TrainError> {
    let scores = model.forward(&ds.x)?;
    let g = GroupedScores::new(scores.as_slice(), &ds.y, &ds.a)?;
    let thresholds = ThresholdSet::default_grid();
    Ok(EvalMetrics {
        ap: average_precision(scores.as_slice(), &ds.y)?,
        ddp: delta_dp(&g)?,
        deo: delta_eo(&g)?,
        mean_thresh_dp: mean_thresholded_dp(&g, &thresholds)?,
        mean_thresh_eo: mean_thresholded_eo(&g, &thresholds)?,
    })
}

/// One row of the tradeoff table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub method: Method,
    pub constraint: Constraint,
    pub space: Space,
    pub lambda: Real,
    pub seed: u64,
    pub epoch_selected: usize,
    pub train_ap: Real,
    pub test_ap: Real,
    pub train_ddp: Real,
    pub test_ddp: Real,
    pub train_deo: Real,
    pub test_deo: Real,
    pub test_mean_thresh_dp: Real,
    pub test_mean_thresh_eo: Real,
}

/// Sweep cell outcome: a completed record, or the failure rendered as text
/// so one bad cell cannot sink the rest of the grid.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub lambda: Real,
    pub seed: u64,
    pub outcome: Result<TradeoffRecord, String>,
}

/// Per-lambda aggregate over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub lambda: Real,
    pub completed: usize,
    pub failed: usize,
    pub mean_test_ap: Real,
    pub std_test_ap: Real,
    pub mean_test_gap: Real,
    pub std_test_gap: Real,
}

fn run_cell(
    base: &TrainConfig,
    lambda: Real,
    seed: u64,
    train_ds: &Dataset,
    val_ds: &Dataset,
    test_ds: &Dataset,
) -> Result<TradeoffRecord, TrainError> {
    let mut cfg = base.clone();
    cfg.lambda = lambda;
    cfg.seed = seed;
    let outcome = train(&cfg, train_ds, val_ds)?;
    let tr = evaluate(&outcome.model, train_ds)?;
    let te = evaluate(&outcome.model, test_ds)?;
    Ok(TradeoffRecord {
        method: cfg.method,
        constraint: cfg.constraint,
        space: cfg.space,
        lambda,
        seed,
        epoch_selected: outcome.selected_epoch,
        train_ap: tr.ap,
        test_ap: te.ap,
        train_ddp: tr.ddp,
        test_ddp: te.ddp,
        train_deo: tr.deo,
        test_deo: te.deo,
        test_mean_thresh_dp: te.mean_thresh_dp,
        test_mean_thresh_eo: te.mean_thresh_eo,
    })
}

/// Full lambda-by-seed grid, run in parallel; results come back in grid
/// order regardless of scheduling.
pub fn sweep(
    base: &TrainConfig,
    lambdas: &[Real],
    seeds: &[u64],
    train_ds: &Dataset,
    val_ds: &Dataset,
    test_ds: &Dataset,
) -> Vec<SweepCell> {
    let grid: Vec<(Real, u64)> = lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    grid.par_iter()
        .map(|&(lambda, seed)| SweepCell {
            lambda,
            seed,
            outcome: run_cell(base, lambda, seed, train_ds, val_ds, test_ds)
                .map_err(|e| e.to_string()),
        })
        .collect()
}

pub fn summarize(cells: &[SweepCell]) -> Vec<SweepSummary> {
    let mut lambdas: Vec<Real> = cells.iter().map(|c| c.lambda).collect();
    lambdas.dedup();
    lambdas
        .iter()
        .map(|&lambda| {
            let rows: Vec<&TradeoffRecord> = cells
                .iter()
                .filter(|c| c.lambda == lambda)
                .filter_map(|c| c.outcome.as_ref().ok())
                .collect();
            let failed = cells
                .iter()
                .filter(|c| c.lambda == lambda && c.outcome.is_err())
                .count();
            let gap_of = |r: &TradeoffRecord| match r.constraint {
                Constraint::Dp => r.test_ddp,
                Constraint::Eo => r.test_deo,
            };
            let stats = |vals: Vec<Real>| -> (Real, Real) {
                if vals.is_empty() {
                    return (Real::NAN, Real::NAN);
                }
                let n = vals.len() as Real;
                let mean = vals.iter().sum::<Real>() / n;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
                (mean, var.sqrt())
            };
            let (mean_ap, std_ap) = stats(rows.iter().map(|r| r.test_ap).collect());
            let (mean_gap, std_gap) = stats(rows.iter().map(|r| gap_of(r)).collect());
            SweepSummary {
                lambda,
                completed: rows.len(),
                failed,
                mean_test_ap: mean_ap,
                std_test_ap: std_ap,
                mean_test_gap: mean_gap,
                std_test_gap: std_gap,
            }
        })
        .collect()
}

/// Tradeoff table CSV. Numbers use the shortest round-trip float rendering,
/// so identical runs produce byte-identical files.
pub fn write_tradeoff_csv(records: &[TradeoffRecord], path: &Path) -> Result<(), TrainError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "method,constraint,space,lambda,seed,epoch_selected,train_ap,test_ap,train_ddp,test_ddp,train_deo,test_deo,test_mean_thresh_dp,test_mean_thresh_eo"
    )?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.constraint,
            r.space,
            r.lambda,
            r.seed,
            r.epoch_selected,
            r.train_ap,
            r.test_ap,
            r.train_ddp,
            r.test_ddp,
            r.train_deo,
            r.test_deo,
            r.test_mean_thresh_dp,
            r.test_mean_thresh_eo
        )?;
    }
    Ok(())
}

pub fn write_summary_csv(summaries: &[SweepSummary], path: &Path) -> Result<(), TrainError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "lambda,completed,failed,mean_test_ap,std_test_ap,mean_test_gap,std_test_gap"
    )?;
    for s in summaries {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            s.lambda, s.completed, s.failed, s.mean_test_ap, s.std_test_ap, s.mean_test_gap, s.std_test_gap
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synth_two_group, SplitSpec};

    fn small_config(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            constraint: Constraint::Dp,
            space: Space::Input,
            lambda: 0.0,
            penalty_form: PenaltyForm::Abs,
            h: 0.1,
            epochs: 8,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 3,
            layer_dims: vec![4, 12, 1],
            split_index: 1,
            adv_hidden: 8,
        }
    }

    fn splits() -> (Dataset, Dataset, Dataset) {
        let ds = synth_two_group(11, 120, 1.5, 2.5, 4).unwrap();
        split(&ds, &SplitSpec::new(0.6, 0.2, 0.2, 5).unwrap()).unwrap()
    }

    // Subsample cells so the sensitive attribute correlates with the label;
    // plain risk minimization then picks up the group direction and shows a
    // real gap for the penalties to shrink.
    fn biased_splits() -> (Dataset, Dataset, Dataset) {
        let ds = synth_two_group(11, 200, 1.5, 2.5, 4).unwrap();
        let mut keep = Vec::new();
        for (a, y, n) in [(0u8, 1u8, 160usize), (1, 0, 160), (0, 0, 40), (1, 1, 40)] {
            keep.extend(ds.cell_indices(a, y).into_iter().take(n));
        }
        let x = ds.x.select_rows(&keep);
        let y: Vec<u8> = keep.iter().map(|&i| ds.y[i]).collect();
        let a: Vec<u8> = keep.iter().map(|&i| ds.a[i]).collect();
        let biased =
            Dataset::new(x, y, a, ds.feature_names.clone(), ds.provenance.clone()).unwrap();
        split(&biased, &SplitSpec::new(0.6, 0.2, 0.2, 5).unwrap()).unwrap()
    }

    #[test]
    fn erm_learns_separable_synthetic_data() {
        let (tr, va, te) = splits();
        let out = train(&small_config(Method::Erm), &tr, &va).unwrap();
        let m = evaluate(&out.model, &te).unwrap();
        assert!(m.ap > 0.9, "test ap {}", m.ap);
        assert!(out.history.last().unwrap().train_loss < out.history[0].train_loss);
    }

    #[test]
    fn zero_lambda_penalties_match_erm_exactly() {
        let (tr, va, _) = splits();
        let erm = train(&small_config(Method::Erm), &tr, &va).unwrap();
        for method in [Method::GapReg, Method::FairMixup, Method::AdvDebias] {
            let out = train(&small_config(method), &tr, &va).unwrap();
            for (a, b) in erm.model.params().iter().zip(out.model.params().iter()) {
                assert_eq!(a, b, "{method} with lambda 0 diverged from erm");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va, _) = splits();
        let mut cfg = small_config(Method::FairMixup);
        cfg.lambda = 1.0;
        let a = train(&cfg, &tr, &va).unwrap();
        let b = train(&cfg, &tr, &va).unwrap();
        assert_eq!(a.selected_epoch, b.selected_epoch);
        for (pa, pb) in a.model.params().iter().zip(b.model.params().iter()) {
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn penalties_shrink_the_group_gap() {
        let (tr, va, te) = biased_splits();
        let erm = train(&small_config(Method::Erm), &tr, &va).unwrap();
        let erm_gap = evaluate(&erm.model, &te).unwrap().ddp;
        for method in [Method::GapReg, Method::FairMixup] {
            let mut cfg = small_config(method);
            cfg.lambda = 5.0;
            cfg.epochs = 12;
            let out = train(&cfg, &tr, &va).unwrap();
            let gap = evaluate(&out.model, &te).unwrap().ddp;
            assert!(
                gap < erm_gap,
                "{method}: gap {gap} not below erm gap {erm_gap}"
            );
        }
    }

    #[test]
    fn adversarial_training_runs_and_shrinks_gap() {
        let (tr, va, te) = biased_splits();
        let erm = train(&small_config(Method::Erm), &tr, &va).unwrap();
        let erm_gap = evaluate(&erm.model, &te).unwrap().ddp;
        let mut cfg = small_config(Method::AdvDebias);
        cfg.lambda = 5.0;
        cfg.epochs = 25;
        let out = train(&cfg, &tr, &va).unwrap();
        let gap = evaluate(&out.model, &te).unwrap().ddp;
        assert!(gap < erm_gap, "adv gap {gap} vs erm {erm_gap}");
    }

    #[test]
    fn eo_constraint_trains_with_cell_batches() {
        let (tr, va, _) = splits();
        let mut cfg = small_config(Method::FairMixup);
        cfg.constraint = Constraint::Eo;
        cfg.lambda = 1.0;
        let out = train(&cfg, &tr, &va).unwrap();
        assert!(out.history.iter().all(|r| r.val_gap.is_finite()));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let (tr, va, _) = splits();
        let mut cfg = small_config(Method::Erm);
        cfg.h = 0.7;
        assert!(matches!(train(&cfg, &tr, &va), Err(TrainError::BadConfig(_))));
        let mut cfg = small_config(Method::Erm);
        cfg.lambda = -1.0;
        assert!(matches!(train(&cfg, &tr, &va), Err(TrainError::BadConfig(_))));
        let mut cfg = small_config(Method::Erm);
        cfg.epochs = 0;
        assert!(matches!(train(&cfg, &tr, &va), Err(TrainError::BadConfig(_))));
    }

    #[test]
    fn selection_prefers_small_gap_within_ap_slack() {
        let mk = |epoch, val_ap, val_gap| EpochRecord { epoch, train_loss: 0.0, val_ap, val_gap };
        // epoch 2 is within 0.01 AP of the best (epoch 1) and has a smaller gap
        let hist = vec![mk(0, 0.80, 0.30), mk(1, 0.95, 0.20), mk(2, 0.945, 0.05)];
        assert_eq!(select_epoch(&hist), 2);
        // out-of-slack low-gap epoch is ignored
        let hist = vec![mk(0, 0.70, 0.01), mk(1, 0.95, 0.20)];
        assert_eq!(select_epoch(&hist), 1);
        // ties on gap resolve to the earliest epoch
        let hist = vec![mk(0, 0.95, 0.10), mk(1, 0.95, 0.10)];
        assert_eq!(select_epoch(&hist), 0);
    }

    #[test]
    fn sweep_grid_order_and_summaries() {
        let (tr, va, te) = splits();
        let mut cfg = small_config(Method::FairMixup);
        cfg.epochs = 3;
        let cells = sweep(&cfg, &[0.0, 1.0], &[1, 2], &tr, &va, &te);
        assert_eq!(cells.len(), 4);
        let expect = [(0.0, 1), (0.0, 2), (1.0, 1), (1.0, 2)];
        for (cell, (l, s)) in cells.iter().zip(expect) {
            assert_eq!((cell.lambda, cell.seed), (l, s));
            assert!(cell.outcome.is_ok());
        }
        let summaries = summarize(&cells);
        assert_eq!(summaries.len(), 2);
        assert_eq!(summaries[0].completed, 2);
        assert_eq!(summaries[0].failed, 0);
        assert!(summaries[0].mean_test_ap.is_finite());

        // csv export is byte-deterministic
        let records: Vec<TradeoffRecord> =
            cells.iter().filter_map(|c| c.outcome.clone().ok()).collect();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        write_tradeoff_csv(&records, &p1).unwrap();
        write_tradeoff_csv(&records, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(text.starts_with("method,constraint,space,lambda,seed,epoch_selected,"));
        assert!(text.lines().nth(1).unwrap().starts_with("fair_mixup,dp,input,0,1,"));
    }

    #[test]
    fn sweep_marks_failed_cells() {
        let (tr, va, te) = splits();
        let mut cfg = small_config(Method::FairMixup);
        cfg.epochs = 0; // invalid: every cell fails but the grid survives
        let cells = sweep(&cfg, &[0.5], &[1, 2], &tr, &va, &te);
        assert!(cells.iter().all(|c| c.outcome.is_err()));
        let s = summarize(&cells);
        assert_eq!(s[0].failed, 2);
        assert!(s[0].mean_test_ap.is_nan());
    }
}
