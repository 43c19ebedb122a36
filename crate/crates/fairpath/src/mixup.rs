//! Interpolation paths between sensitive groups and the penalties built on
//! them: the sampled mean-output curve, its arc length, and the
//! differentiable fair-mixup and gap penalties.
//!
//! Convention: the interpolator satisfies T(x0, x1, 0) = x0 and
//! T(x0, x1, 1) = x1, so the path runs from group 0 to group 1 and the
//! path derivative points along x1 - x0.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, NodeId, Tape};
use crate::model::{MlpModel, ModelError, TapedMlp};
use crate::{Matrix, Real};

#[derive(Debug, Error)]
pub enum MixupError {
    #[error("paired batch blocks must have equal row counts: {0} vs {1}")]
    UnequalRows(usize, usize),
    #[error("paired batch must be non-empty")]
    EmptyBatch,
    #[error("t-grid must be ascending in [0,1] with endpoints 0 and 1, length >= 3")]
    BadGrid,
    #[error("mixing coefficient t={t} with h={h} leaves the finite-difference window outside [0,1]")]
    TWindow { t: Real, h: Real },
    #[error("penalty needs 1 paired batch for dp, 2 for eo; got {0}")]
    BadBatchSpec(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Where interpolation happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Input,
    Latent,
}

impl std::fmt::Display for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Space::Input => write!(f, "input"),
            Space::Latent => write!(f, "latent"),
        }
    }
}

/// |.| or (.)^2 applied to the path derivative estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyForm {
    Abs,
    Squared,
}

/// How the path derivative is estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivMode {
    /// Central finite difference in t.
    Fd { h: Real },
    /// Exact forward-mode directional derivative at the mixed points.
    Jvp,
}

/// Equally sized sample blocks from the two groups, paired row-by-row.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub x0: Matrix,
    pub x1: Matrix,
}

impl PairedBatch {
    pub fn new(x0: Matrix, x1: Matrix) -> Result<Self, MixupError> {
        if x0.rows() != x1.rows() {
            return Err(MixupError::UnequalRows(x0.rows(), x1.rows()));
        }
        if x0.rows() == 0 {
            return Err(MixupError::EmptyBatch);
        }
        Ok(PairedBatch { x0, x1 })
    }

    pub fn rows(&self) -> usize {
        self.x0.rows()
    }

    /// Swap the group roles.
    pub fn swapped(&self) -> Self {
        PairedBatch { x0: self.x1.clone(), x1: self.x0.clone() }
    }
}

/// Sampled mean-output curve over a t-grid, raw and calibrated
/// (mu(t) - mu(0), so |calibrated(1)| equals the batch DP gap).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathCurve {
    pub t: Vec<Real>,
    pub mu: Vec<Real>,
    pub calibrated: Vec<Real>,
}

impl PathCurve {
    pub fn write_csv(&self, path: &Path) -> Result<(), MixupError> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "t,mu,mu_calibrated")?;
        for i in 0..self.t.len() {
            writeln!(f, "{},{},{}", self.t[i], self.mu[i], self.calibrated[i])?;
        }
        Ok(())
    }
}

/// Uniform grid of n points covering [0,1].
pub fn uniform_grid(n: usize) -> Vec<Real> {
    assert!(n >= 2);
    (0..n).map(|i| i as Real / (n - 1) as Real).collect()
}

pub(crate) fn check_grid(grid: &[Real]) -> Result<(), MixupError> {
    if grid.len() < 3 || grid[0] != 0.0 || *grid.last().unwrap() != 1.0 {
        return Err(MixupError::BadGrid);
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MixupError::BadGrid);
    }
    Ok(())
}

/// Rowwise convex combination (1-t) x0 + t x1, in input space or on encoder
/// outputs.
pub fn mixup_interpolate(
    pair: &PairedBatch,
    t: Real,
    space: Space,
    model: &MlpModel,
) -> Result<Matrix, MixupError> {
    match space {
        Space::Input => Ok(pair.x0.lincomb(1.0 - t, &pair.x1, t)),
        Space::Latent => {
            let z0 = model.encode(&pair.x0)?;
            let z1 = model.encode(&pair.x1)?;
            Ok(z0.lincomb(1.0 - t, &z1, t))
        }
    }
}

fn mean_score_at(model: &MlpModel, pair: &PairedBatch, t: Real, space: Space) -> Result<Real, MixupError> {
    let mixed = mixup_interpolate(pair, t, space, model)?;
    let scores = match space {
        Space::Input => model.forward(&mixed)?,
        Space::Latent => model.predict_from_latent(&mixed)?,
    };
    Ok(scores.mean())
}

/// Sample mu(t) = mean model output on interpolates over the grid.
pub fn mu_path(
    model: &MlpModel,
    pair: &PairedBatch,
    grid: &[Real],
    space: Space,
) -> Result<PathCurve, MixupError> {
    check_grid(grid)?;
    let mu: Vec<Real> = grid
        .iter()
        .map(|&t| mean_score_at(model, pair, t, space))
        .collect::<Result<_, _>>()?;
    let mu0 = mu[0];
    let calibrated = mu.iter().map(|&v| v - mu0).collect();
    Ok(PathCurve { t: grid.to_vec(), mu, calibrated })
}

/// d/dt of the mean-output curve at one t.
pub fn path_derivative(
    model: &MlpModel,
    pair: &PairedBatch,
    t: Real,
    mode: DerivMode,
    space: Space,
) -> Result<Real, MixupError> {
    match mode {
        DerivMode::Fd { h } => {
            if h <= 0.0 || t - h < 0.0 || t + h > 1.0 {
                return Err(MixupError::TWindow { t, h });
            }
            let up = mean_score_at(model, pair, t + h, space)?;
            let down = mean_score_at(model, pair, t - h, space)?;
            Ok((up - down) / (2.0 * h))
        }
        DerivMode::Jvp => match space {
            Space::Input => {
                let mixed = pair.x0.lincomb(1.0 - t, &pair.x1, t);
                let dir = pair.x1.sub(&pair.x0);
                let tangents = model.forward_jvp(&mixed, &dir)?;
                Ok(tangents.iter().sum::<Real>() / tangents.len() as Real)
            }
            Space::Latent => {
                let z0 = model.encode(&pair.x0)?;
                let z1 = model.encode(&pair.x1)?;
                let mixed = z0.lincomb(1.0 - t, &z1, t);
                let dz = z1.sub(&z0);
                let tangents = model.head_jvp(&mixed, &dz)?;
                Ok(tangents.iter().sum::<Real>() / tangents.len() as Real)
            }
        },
    }
}

/// Arc length of the mean-output curve: trapezoidal quadrature of
/// |d mu/dt| over the grid, with exact jvp derivatives. Each interval's
/// contribution is clipped from below by |delta mu| over that interval,
/// which the true arc always dominates; the clip leaves the estimator
/// consistent while making the discrete bound
/// arc >= |mu(1) - mu(0)| hold exactly at any grid resolution.
pub fn arc_length(
    model: &MlpModel,
    pair: &PairedBatch,
    grid: &[Real],
    space: Space,
) -> Result<Real, MixupError> {
    check_grid(grid)?;
    let speeds: Vec<Real> = grid
        .iter()
        .map(|&t| path_derivative(model, pair, t, DerivMode::Jvp, space).map(Real::abs))
        .collect::<Result<_, _>>()?;
    let mu: Vec<Real> = grid
        .iter()
        .map(|&t| mean_score_at(model, pair, t, space))
        .collect::<Result<_, _>>()?;
    let mut acc = 0.0;
    for i in 1..grid.len() {
        let trap = 0.5 * (grid[i] - grid[i - 1]) * (speeds[i] + speeds[i - 1]);
        acc += trap.max((mu[i] - mu[i - 1]).abs());
    }
    Ok(acc)
}

/// Composite trapezoid on a (possibly non-uniform) ascending grid.
pub fn trapezoid(grid: &[Real], values: &[Real]) -> Real {
    assert_eq!(grid.len(), values.len());
    let mut acc = 0.0;
    for i in 1..grid.len() {
        acc += 0.5 * (grid[i] - grid[i - 1]) * (values[i] + values[i - 1]);
    }
    acc
}

fn check_penalty_spec(pairs: &[PairedBatch]) -> Result<(), MixupError> {
    if pairs.is_empty() || pairs.len() > 2 {
        return Err(MixupError::BadBatchSpec(pairs.len()));
    }
    Ok(())
}

/// Differentiable fair-mixup penalty: for each paired batch, the central
/// finite difference (mu(t+h) - mu(t-h)) / 2h built from tape-recorded
/// forward passes, with |.| or (.)^2 applied; terms are summed (one batch
/// for DP, one per label for EO, sharing the same t).
#[allow(clippy::too_many_arguments)]
pub fn fair_mixup_penalty(
    tape: &mut Tape<Real>,
    taped: &TapedMlp,
    pairs: &[PairedBatch],
    space: Space,
    t: Real,
    h: Real,
    form: PenaltyForm,
) -> Result<NodeId, MixupError> {
    check_penalty_spec(pairs)?;
    if h <= 0.0 || t < h || t > 1.0 - h {
        return Err(MixupError::TWindow { t, h });
    }
    let mut total: Option<NodeId> = None;
    for pair in pairs {
        let mean_at = |tape: &mut Tape<Real>, tt: Real| -> Result<NodeId, MixupError> {
            let scores = match space {
                Space::Input => {
                    let mixed = tape.constant(pair.x0.lincomb(1.0 - tt, &pair.x1, tt));
                    taped.scores(tape, mixed)?
                }
                Space::Latent => {
                    let x0 = tape.constant(pair.x0.clone());
                    let x1 = tape.constant(pair.x1.clone());
                    let z0 = taped.encode(tape, x0)?;
                    let z1 = taped.encode(tape, x1)?;
                    let mixed = tape.lincomb(z0, 1.0 - tt, z1, tt)?;
                    taped.head_scores(tape, mixed)?
                }
            };
            Ok(tape.mean_all(scores))
        };
        let up = mean_at(tape, t + h)?;
        let down = mean_at(tape, t - h)?;
        let inv = 1.0 / (2.0 * h);
        let diff = tape.lincomb(up, inv, down, -inv)?;
        let term = match form {
            PenaltyForm::Abs => tape.abs(diff),
            PenaltyForm::Squared => tape.square(diff),
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Differentiable batch estimate of the fairness gap itself:
/// |mean score on group-0 block - mean score on group-1 block|, summed over
/// the supplied paired batches (one for DP, one per label for EO).
pub fn gap_penalty(
    tape: &mut Tape<Real>,
    taped: &TapedMlp,
    pairs: &[PairedBatch],
) -> Result<NodeId, MixupError> {
    check_penalty_spec(pairs)?;
    let mut total: Option<NodeId> = None;
    for pair in pairs {
        let x0 = tape.constant(pair.x0.clone());
        let x1 = tape.constant(pair.x1.clone());
        let s0 = taped.scores(tape, x0)?;
        let s1 = taped.scores(tape, x1)?;
        let m0 = tape.mean_all(s0);
        let m1 = tape.mean_all(s1);
        let diff = tape.lincomb(m0, 1.0, m1, -1.0)?;
        let term = tape.abs(diff);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{delta_dp, GroupedScores};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    fn random_pair(rng: &mut impl Rng, rows: usize, cols: usize) -> PairedBatch {
        PairedBatch::new(random_matrix(rng, rows, cols), random_matrix(rng, rows, cols)).unwrap()
    }

    /// Model whose output layer is linear enough to reason about: a single
    /// affine layer followed by sigmoid.
    fn linear_model(w: Vec<Real>, b: Real) -> MlpModel {
        let dim = w.len();
        let mut m = MlpModel::init(0, &[dim, 1], 0).unwrap();
        m.layers[0].weight = Matrix::from_vec(dim, 1, w);
        m.layers[0].bias = Matrix::scalar(b);
        m
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let model = MlpModel::init(0, &[2, 1], 0).unwrap();
        let pair = PairedBatch::new(
            Matrix::from_rows(&[vec![1.0, 0.0]]),
            Matrix::from_rows(&[vec![0.0, 1.0]]),
        )
        .unwrap();
        assert_eq!(mixup_interpolate(&pair, 0.0, Space::Input, &model).unwrap(), pair.x0);
        assert_eq!(mixup_interpolate(&pair, 1.0, Space::Input, &model).unwrap(), pair.x1);
        let mid = mixup_interpolate(&pair, 0.5, Space::Input, &model).unwrap();
        assert_eq!(mid.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn paired_batch_row_mismatch_rejected() {
        let e = PairedBatch::new(Matrix::zeros(2, 3), Matrix::zeros(3, 3));
        assert!(matches!(e, Err(MixupError::UnequalRows(2, 3))));
    }

    #[test]
    fn constant_model_flat_path() {
        let mut model = MlpModel::init(0, &[3, 4, 1], 1).unwrap();
        for layer in &mut model.layers {
            layer.weight = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = random_pair(&mut rng, 8, 3);
        let curve = mu_path(&model, &pair, &uniform_grid(11), Space::Input).unwrap();
        assert!(curve.mu.iter().all(|&m| m == 0.5));
        assert!(curve.calibrated.iter().all(|&c| c == 0.0));
        assert_eq!(arc_length(&model, &pair, &uniform_grid(11), Space::Input).unwrap(), 0.0);
    }

    #[test]
    fn path_endpoints_equal_group_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = MlpModel::init(4, &[5, 16, 1], 1).unwrap();
        let pair = random_pair(&mut rng, 32, 5);
        let curve = mu_path(&model, &pair, &uniform_grid(201), Space::Input).unwrap();
        let g = GroupedScores::from_group_scores(
            model.forward(&pair.x0).unwrap().as_slice().to_vec(),
            model.forward(&pair.x1).unwrap().as_slice().to_vec(),
        );
        let dp = delta_dp(&g).unwrap();
        assert!(((curve.mu[0] - curve.mu[200]).abs() - dp).abs() < 1e-14);
        assert!((curve.calibrated[200].abs() - dp).abs() < 1e-14);
    }

    #[test]
    fn linear_model_fd_jvp_agree_tightly() {
        // Small weights keep the sigmoid near its linear regime, so the
        // central difference and the exact directional derivative coincide
        // to high order.
        let model = linear_model(vec![0.02, -0.03], 0.0);
        let pair = PairedBatch::new(
            Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, -0.1]]),
            Matrix::from_rows(&[vec![-0.2, 0.1], vec![0.2, 0.4]]),
        )
        .unwrap();
        let fd = path_derivative(&model, &pair, 0.5, DerivMode::Fd { h: 1e-3 }, Space::Input).unwrap();
        let jvp = path_derivative(&model, &pair, 0.5, DerivMode::Jvp, Space::Input).unwrap();
        assert!((fd - jvp).abs() <= 1e-6 * (1.0 + jvp.abs()));
    }

    #[test]
    fn fd_jvp_agreement_random_models() {
        // A relu kink inside the +-h window ruins the central difference at
        // that particular t, so each trial keeps the candidate t whose
        // half-step difference is most consistent with the full-step one.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..10 {
            let model = MlpModel::init(100 + trial, &[6, 24, 1], 1).unwrap();
            let pair = random_pair(&mut rng, 16, 6);
            let candidates: Vec<Real> = (0..8).map(|_| rng.gen_range(0.1..0.9)).collect();
            for space in [Space::Input, Space::Latent] {
                let fd_at = |t: Real, h: Real| {
                    path_derivative(&model, &pair, t, DerivMode::Fd { h }, space).unwrap()
                };
                let t = candidates
                    .iter()
                    .copied()
                    .min_by(|&a, &b| {
                        let ia = (fd_at(a, 1e-3) - fd_at(a, 5e-4)).abs();
                        let ib = (fd_at(b, 1e-3) - fd_at(b, 5e-4)).abs();
                        ia.partial_cmp(&ib).unwrap()
                    })
                    .unwrap();
                let fd = fd_at(t, 1e-3);
                let jvp = path_derivative(&model, &pair, t, DerivMode::Jvp, space).unwrap();
                assert!(
                    (fd - jvp).abs() <= 1e-4 * (1.0 + jvp.abs()),
                    "trial {trial} {space}: fd {fd} jvp {jvp}"
                );
            }
        }
    }

    #[test]
    fn fd_window_violation_rejected() {
        let model = MlpModel::init(0, &[2, 1], 0).unwrap();
        let pair = PairedBatch::new(Matrix::zeros(1, 2), Matrix::zeros(1, 2)).unwrap();
        let r = path_derivative(&model, &pair, 0.0005, DerivMode::Fd { h: 1e-3 }, Space::Input);
        assert!(matches!(r, Err(MixupError::TWindow { .. })));
    }

    #[test]
    fn endpoint_identity_at_quadrature_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MlpModel::init(17, &[8, 32, 1], 1).unwrap();
        let pair = random_pair(&mut rng, 64, 8);
        let grid = uniform_grid(201);
        for space in [Space::Input, Space::Latent] {
            let derivs: Vec<Real> = grid
                .iter()
                .map(|&t| path_derivative(&model, &pair, t, DerivMode::Jvp, space).unwrap())
                .collect();
            let integral = trapezoid(&grid, &derivs);
            let curve = mu_path(&model, &pair, &grid, space).unwrap();
            let gap = curve.mu[200] - curve.mu[0];
            assert!((integral - gap).abs() <= 1e-3, "{space}: {integral} vs {gap}");
        }
    }

    #[test]
    fn jensen_bound_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = uniform_grid(201);
        for trial in 0..20 {
            let model = MlpModel::init(1000 + trial, &[5, 16, 1], 1).unwrap();
            let pair = random_pair(&mut rng, 24, 5);
            for space in [Space::Input, Space::Latent] {
                let arc = arc_length(&model, &pair, &grid, space).unwrap();
                let curve = mu_path(&model, &pair, &grid, space).unwrap();
                let gap = (curve.mu[200] - curve.mu[0]).abs();
                assert!(arc >= gap - 1e-9, "trial {trial} {space}: arc {arc} < gap {gap}");
            }
        }
    }

    #[test]
    fn group_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = MlpModel::init(23, &[4, 12, 1], 1).unwrap();
        let pair = random_pair(&mut rng, 16, 4);
        let swapped = pair.swapped();
        for &t in &[0.2, 0.5, 0.7] {
            let d = path_derivative(&model, &pair, t, DerivMode::Jvp, Space::Input).unwrap();
            let ds = path_derivative(&model, &swapped, 1.0 - t, DerivMode::Jvp, Space::Input).unwrap();
            assert!((d + ds).abs() < 1e-12, "t={t}: {d} vs {ds}");
        }
        // penalty value unchanged under the swap (same |derivative| at mirrored t)
        let mut tape = Tape::new();
        let taped = TapedMlp::bind(&mut tape, &model, 0).unwrap();
        let p = fair_mixup_penalty(&mut tape, &taped, &[pair.clone()], Space::Input, 0.3, 0.1, PenaltyForm::Abs).unwrap();
        let ps = fair_mixup_penalty(&mut tape, &taped, &[swapped], Space::Input, 0.7, 0.1, PenaltyForm::Abs).unwrap();
        assert!((tape.scalar_value(p) - tape.scalar_value(ps)).abs() < 1e-12);
    }

    #[test]
    fn penalty_value_matches_fd_path_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = MlpModel::init(31, &[5, 20, 1], 1).unwrap();
        let pair = random_pair(&mut rng, 16, 5);
        let (t, h) = (0.4, 0.05);
        let fd = path_derivative(&model, &pair, t, DerivMode::Fd { h }, Space::Input).unwrap();
        let mut tape = Tape::new();
        let taped = TapedMlp::bind(&mut tape, &model, 0).unwrap();
        let p = fair_mixup_penalty(&mut tape, &taped, &[pair], Space::Input, t, h, PenaltyForm::Abs).unwrap();
        assert!((tape.scalar_value(p) - fd.abs()).abs() < 1e-14);
    }

    #[test]
    fn constant_model_zero_penalty_and_gradient() {
        let mut model = MlpModel::init(0, &[3, 6, 1], 1).unwrap();
        for layer in &mut model.layers {
            layer.weight = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pair = random_pair(&mut rng, 8, 3);
        let mut tape = Tape::new();
        let taped = TapedMlp::bind(&mut tape, &model, 0).unwrap();
        let p = fair_mixup_penalty(&mut tape, &taped, &[pair.clone()], Space::Input, 0.5, 0.1, PenaltyForm::Abs).unwrap();
        assert_eq!(tape.scalar_value(p), 0.0);
        let grads = tape.backward(p).unwrap();
        assert!(grads.iter().all(|g| g.max_abs() == 0.0));

        let mut tape = Tape::new();
        let taped = TapedMlp::bind(&mut tape, &model, 0).unwrap();
        let gp = gap_penalty(&mut tape, &taped, &[pair]).unwrap();
        assert_eq!(tape.scalar_value(gp), 0.0);
    }

    #[test]
    fn gap_penalty_matches_metrics_delta_dp() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = MlpModel::init(3, &[4, 10, 1], 1).unwrap();
        let pair = random_pair(&mut rng, 20, 4);
        let mut tape = Tape::new();
        let taped = TapedMlp::bind(&mut tape, &model, 0).unwrap();
        let p = gap_penalty(&mut tape, &taped, &[pair.clone()]).unwrap();
        let g = GroupedScores::from_group_scores(
            model.forward(&pair.x0).unwrap().as_slice().to_vec(),
            model.forward(&pair.x1).unwrap().as_slice().to_vec(),
        );
        assert!((tape.scalar_value(p) - delta_dp(&g).unwrap()).abs() < 1e-15);
        // identical blocks -> zero
        let same = PairedBatch::new(pair.x0.clone(), pair.x0.clone()).unwrap();
        let mut tape = Tape::new();
        let taped = TapedMlp::bind(&mut tape, &model, 0).unwrap();
        let z = gap_penalty(&mut tape, &taped, &[same]).unwrap();
        assert_eq!(tape.scalar_value(z), 0.0);
    }

    #[test]
    fn penalty_parameter_gradient_matches_finite_differences() {
        use crate::diff::finite_diff_check;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (space, form) in [
            (Space::Input, PenaltyForm::Abs),
            (Space::Input, PenaltyForm::Squared),
            (Space::Latent, PenaltyForm::Abs),
        ] {
            let model = MlpModel::init(51, &[4, 8, 1], 1).unwrap();
            let pair = random_pair(&mut rng, 12, 4);
            let (t, h) = (0.45, 0.1);
            let mut tape = Tape::new();
            let taped = TapedMlp::bind(&mut tape, &model, 0).unwrap();
            let p = fair_mixup_penalty(&mut tape, &taped, &[pair.clone()], space, t, h, form).unwrap();
            let grads = tape.backward(p).unwrap();

            let mut point = Vec::new();
            let mut analytic = Vec::new();
            for pm in model.params() {
                point.extend_from_slice(pm.as_slice());
            }
            for g in &grads {
                analytic.extend_from_slice(g.as_slice());
            }
            let f = |flat: &[Real]| {
                let mut m = model.clone();
                let mut off = 0;
                for pm in m.params_mut() {
                    let n = pm.len();
                    pm.as_mut_slice().copy_from_slice(&flat[off..off + n]);
                    off += n;
                }
                let mut tape = Tape::new();
                let taped = TapedMlp::bind(&mut tape, &m, 0).unwrap();
                let p = fair_mixup_penalty(&mut tape, &taped, &[pair.clone()], space, t, h, form).unwrap();
                tape.scalar_value(p)
            };
            let err = finite_diff_check(f, &point, &analytic, 1e-6).unwrap();
            assert!(err < 1e-4, "{space} {form:?}: worst rel err {err}");
        }
    }

    #[test]
    fn bad_grid_rejected() {
        let model = MlpModel::init(0, &[2, 1], 0).unwrap();
        let pair = PairedBatch::new(Matrix::zeros(1, 2), Matrix::zeros(1, 2)).unwrap();
        assert!(matches!(
            mu_path(&model, &pair, &[0.0, 1.0], Space::Input),
            Err(MixupError::BadGrid)
        ));
        assert!(matches!(
            mu_path(&model, &pair, &[0.0, 0.6, 0.9], Space::Input),
            Err(MixupError::BadGrid)
        ));
    }
}
