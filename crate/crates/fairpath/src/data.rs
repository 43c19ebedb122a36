//! Dataset ingestion (UCI Adult), synthetic two-group generation, splitting,
//! and group-balanced batch sampling.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Constraint;
use crate::mixup::PairedBatch;
use crate::{Matrix, Real};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: expected 15 comma-separated fields, got {got}")]
    MalformedRow { path: String, line: usize, got: usize },
    #[error("{path}:{line}: cannot parse '{field}' as a number")]
    BadNumber { path: String, line: usize, field: String },
    #[error("dataset field lengths disagree")]
    LengthMismatch,
    #[error("dataset must contain both labels and both groups")]
    MissingCell,
    #[error("dataset contains non-finite features")]
    NonFinite,
    #[error("split fractions must be positive and sum to 1")]
    BadSplitSpec,
    #[error("could not produce a split covering all four (a,y) cells in 100 shuffles")]
    SplitCoverage,
    #[error("batch size {size} not divisible by {cells} cells")]
    BadBatchSize { size: usize, cells: usize },
    #[error("synthetic generator needs n_per_cell >= 1 and dim >= 2")]
    BadSynthSpec,
}

/// Feature matrix, binary labels, binary sensitive attribute.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<u8>,
    pub a: Vec<u8>,
    pub feature_names: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        x: Matrix,
        y: Vec<u8>,
        a: Vec<u8>,
        feature_names: Vec<String>,
        provenance: String,
    ) -> Result<Self, DataError> {
        if x.rows() != y.len() || y.len() != a.len() || x.cols() != feature_names.len() {
            return Err(DataError::LengthMismatch);
        }
        if !x.is_finite() {
            return Err(DataError::NonFinite);
        }
        let ds = Dataset { x, y, a, feature_names, provenance };
        if !ds.has_all_cells() {
            return Err(DataError::MissingCell);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn has_all_cells(&self) -> bool {
        [0u8, 1].iter().all(|&a| {
            [0u8, 1]
                .iter()
                .all(|&y| self.y.iter().zip(&self.a).any(|(&yy, &aa)| yy == y && aa == a))
        })
    }

    pub fn group_indices(&self, a: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.a[i] == a).collect()
    }

    pub fn cell_indices(&self, a: u8, y: u8) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.a[i] == a && self.y[i] == y)
            .collect()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            feature_names: self.feature_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Single-file CSV export: features..., label, sensitive.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{},label,sensitive", self.feature_names.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(f, "{},{},{}", row.join(","), self.y[i], self.a[i])?;
        }
        Ok(())
    }
}

/// Train/val/test fractions with the shuffle seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Real,
    pub val: Real,
    pub test: Real,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: Real, val: Real, test: Real, seed: u64) -> Result<Self, DataError> {
        if train <= 0.0 || val <= 0.0 || test <= 0.0 || (train + val + test - 1.0).abs() > 1e-9 {
            return Err(DataError::BadSplitSpec);
        }
        Ok(SplitSpec { train, val, test, seed })
    }
}

/// Seeded disjoint, exhaustive split; reshuffles (up to 100 times) until every
/// part contains all four (a,y) cells.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let n = dataset.len();
    let n_train = ((n as Real) * spec.train).round() as usize;
    let n_val = ((n as Real) * spec.val).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..100 {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let train = dataset.subset(&idx[..n_train]);
        let val = dataset.subset(&idx[n_train..n_train + n_val]);
        let test = dataset.subset(&idx[n_train + n_val..]);
        if train.has_all_cells() && val.has_all_cells() && test.has_all_cells() {
            return Ok((train, val, test));
        }
    }
    Err(DataError::SplitCoverage)
}

/// Gaussian two-group benchmark: each (a,y) cell gets `n_per_cell` samples
/// with mean y*label_shift*e1 + a*group_shift*e2 and unit covariance.
pub fn synth_two_group(
    seed: u64,
    n_per_cell: usize,
    group_shift: Real,
    label_shift: Real,
    dim: usize,
) -> Result<Dataset, DataError> {
    if n_per_cell == 0 || dim < 2 {
        return Err(DataError::BadSynthSpec);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(4 * n_per_cell);
    let mut y = Vec::new();
    let mut a = Vec::new();
    for cell_a in [0u8, 1] {
        for cell_y in [0u8, 1] {
            for _ in 0..n_per_cell {
                let mut row = vec![0.0; dim];
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                row[0] += cell_y as Real * label_shift;
                row[1] += cell_a as Real * group_shift;
                rows.push(row);
                y.push(cell_y);
                a.push(cell_a);
            }
        }
    }
    let names = (0..dim).map(|i| format!("x{i}")).collect();
    Dataset::new(Matrix::from_rows(&rows), y, a, names, "synth".into())
}

// ---------------------------------------------------------------------------
// UCI Adult ingestion
// ---------------------------------------------------------------------------

const ADULT_FIELDS: usize = 15;
const COL_AGE: usize = 0;
const COL_FNLWGT: usize = 2;
const COL_EDUCATION_NUM: usize = 4;
const COL_SEX: usize = 9;
const COL_CAPITAL_GAIN: usize = 10;
const COL_CAPITAL_LOSS: usize = 11;
const COL_HOURS: usize = 12;
const COL_INCOME: usize = 14;

const ADULT_COLUMN_NAMES: [&str; ADULT_FIELDS] = [
    "age",
    "workclass",
    "fnlwgt",
    "education",
    "education-num",
    "marital-status",
    "occupation",
    "relationship",
    "race",
    "sex",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
    "native-country",
    "income",
];

const CONTINUOUS_COLS: [usize; 5] = [COL_AGE, COL_EDUCATION_NUM, COL_CAPITAL_GAIN, COL_CAPITAL_LOSS, COL_HOURS];
const N_BINS: usize = 10;

struct AdultRow {
    fields: Vec<String>,
    from_train_file: bool,
}

fn parse_adult_file(path: &Path, from_train_file: bool, rows: &mut Vec<AdultRow>) -> Result<(), DataError> {
    let text = std::fs::read_to_string(path)?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('|') {
            continue;
        }
        let fields: Vec<String> = line
            .trim_end_matches('.')
            .split(',')
            .map(|f| f.trim().to_string())
            .collect();
        if fields.len() != ADULT_FIELDS {
            return Err(DataError::MalformedRow {
                path: path.display().to_string(),
                line: lineno + 1,
                got: fields.len(),
            });
        }
        if fields.iter().any(|f| f == "?") {
            continue; // stated rule: drop rows with missing values
        }
        rows.push(AdultRow { fields, from_train_file });
    }
    Ok(())
}

fn parse_number(path: &Path, row_idx: usize, field: &str) -> Result<Real, DataError> {
    field.parse::<Real>().map_err(|_| DataError::BadNumber {
        path: path.display().to_string(),
        line: row_idx,
        field: field.to_string(),
    })
}

/// Load the UCI Adult pair (`adult.data`, `adult.test`): drop rows with '?',
/// label = income > 50K, sensitive = sex Male (excluded from features),
/// categoricals one-hot, the five continuous columns quantized into 10
/// equal-width bins (edges computed on the training file only) then one-hot,
/// fnlwgt dropped.
pub fn load_adult(data_path: &Path, test_path: &Path) -> Result<Dataset, DataError> {
    let mut rows = Vec::new();
    parse_adult_file(data_path, true, &mut rows)?;
    parse_adult_file(test_path, false, &mut rows)?;

    // Bin edges on the training file rows only, to avoid test leakage.
    let mut bin_ranges = Vec::new();
    for &col in &CONTINUOUS_COLS {
        let mut lo = Real::INFINITY;
        let mut hi = Real::NEG_INFINITY;
        for (i, row) in rows.iter().enumerate() {
            if !row.from_train_file {
                continue;
            }
            let v = parse_number(data_path, i, &row.fields[col])?;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        bin_ranges.push((lo, hi));
    }

    // Category vocabularies: sorted union across both files.
    let categorical_cols: Vec<usize> = (0..ADULT_FIELDS)
        .filter(|c| {
            !CONTINUOUS_COLS.contains(c)
                && *c != COL_FNLWGT
                && *c != COL_SEX
                && *c != COL_INCOME
        })
        .collect();
    let mut vocab: Vec<Vec<String>> = Vec::new();
    for &col in &categorical_cols {
        let mut values: Vec<String> = rows.iter().map(|r| r.fields[col].clone()).collect();
        values.sort();
        values.dedup();
        vocab.push(values);
    }

    // Deterministic feature layout: columns in original order; continuous
    // columns expand to their 10 bins, categorical to their sorted vocab.
    let mut feature_names = Vec::new();
    enum Block {
        Bins { col: usize, range_idx: usize },
        Cats { col: usize, vocab_idx: usize },
    }
    let mut blocks = Vec::new();
    for col in 0..ADULT_FIELDS {
        if let Some(range_idx) = CONTINUOUS_COLS.iter().position(|&c| c == col) {
            for b in 0..N_BINS {
                feature_names.push(format!("{}_bin{}", ADULT_COLUMN_NAMES[col], b));
            }
            blocks.push(Block::Bins { col, range_idx });
        } else if let Some(vocab_idx) = categorical_cols.iter().position(|&c| c == col) {
            for v in &vocab[vocab_idx] {
                feature_names.push(format!("{}={}", ADULT_COLUMN_NAMES[col], v));
            }
            blocks.push(Block::Cats { col, vocab_idx });
        }
        // fnlwgt, sex, income contribute no feature columns
    }

    let width = feature_names.len();
    let mut data = Vec::with_capacity(rows.len() * width);
    let mut y = Vec::with_capacity(rows.len());
    let mut a = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        for block in &blocks {
            match block {
                Block::Bins { col, range_idx } => {
                    let v = parse_number(data_path, i, &row.fields[*col])?;
                    let (lo, hi) = bin_ranges[*range_idx];
                    let bin = if hi > lo {
                        (((v - lo) / (hi - lo) * N_BINS as Real).floor() as i64)
                            .clamp(0, N_BINS as i64 - 1) as usize
                    } else {
                        0
                    };
                    for b in 0..N_BINS {
                        data.push(if b == bin { 1.0 } else { 0.0 });
                    }
                }
                Block::Cats { col, vocab_idx } => {
                    for v in &vocab[*vocab_idx] {
                        data.push(if *v == row.fields[*col] { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        y.push(row.fields[COL_INCOME].contains(">50K") as u8);
        a.push((row.fields[COL_SEX] == "Male") as u8);
    }

    Dataset::new(
        Matrix::from_vec(rows.len(), width, data),
        y,
        a,
        feature_names,
        "adult".into(),
    )
}

// ---------------------------------------------------------------------------
// Balanced batches
// ---------------------------------------------------------------------------

/// One training batch: the stacked rows with labels and attributes, plus the
/// paired group blocks the penalty modules consume (one pair for DP, one per
/// label for EO).
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x: Matrix,
    pub y: Vec<u8>,
    pub a: Vec<u8>,
    pub pairs: Vec<PairedBatch>,
}

struct CellSampler {
    indices: Vec<usize>,
    cursor: usize,
}

impl CellSampler {
    fn new(indices: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut s = CellSampler { indices, cursor: 0 };
        s.indices.shuffle(rng);
        s
    }

    fn draw(&mut self, quota: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.indices.len() < quota {
            // undersized cell: sample with replacement
            return (0..quota)
                .map(|_| self.indices[rng.gen_range(0..self.indices.len())])
                .collect();
        }
        let mut out = Vec::with_capacity(quota);
        while out.len() < quota {
            if self.cursor == self.indices.len() {
                self.indices.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.indices[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Group-balanced batch stream: equal counts per group (DP) or per (a,y)
/// cell (EO), reshuffled per pass; cells smaller than their quota fall back
/// to sampling with replacement and set [`BalancedBatches::replacement_used`].
pub struct BalancedBatches<'a> {
    dataset: &'a Dataset,
    constraint: Constraint,
    quota: usize,
    cells: Vec<CellSampler>,
    rng: ChaCha8Rng,
    pub replacement_used: bool,
    batches_per_epoch: usize,
}

impl<'a> BalancedBatches<'a> {
    pub fn new(
        dataset: &'a Dataset,
        constraint: Constraint,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, DataError> {
        let n_cells = match constraint {
            Constraint::Dp => 2,
            Constraint::Eo => 4,
        };
        if batch_size == 0 || batch_size % n_cells != 0 {
            return Err(DataError::BadBatchSize { size: batch_size, cells: n_cells });
        }
        let quota = batch_size / n_cells;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell_indices: Vec<Vec<usize>> = match constraint {
            Constraint::Dp => vec![dataset.group_indices(0), dataset.group_indices(1)],
            Constraint::Eo => vec![
                dataset.cell_indices(0, 0),
                dataset.cell_indices(1, 0),
                dataset.cell_indices(0, 1),
                dataset.cell_indices(1, 1),
            ],
        };
        if cell_indices.iter().any(|c| c.is_empty()) {
            return Err(DataError::MissingCell);
        }
        let replacement_used = cell_indices.iter().any(|c| c.len() < quota);
        let max_cell = cell_indices.iter().map(|c| c.len()).max().unwrap();
        let batches_per_epoch = max_cell.div_ceil(quota);
        let cells = cell_indices
            .into_iter()
            .map(|idx| CellSampler::new(idx, &mut rng))
            .collect();
        Ok(BalancedBatches {
            dataset,
            constraint,
            quota,
            cells,
            rng,
            replacement_used,
            batches_per_epoch,
        })
    }

    /// Batches needed so the largest cell is visited at least once per epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    pub fn next_batch(&mut self) -> TrainBatch {
        let drawn: Vec<Vec<usize>> = self
            .cells
            .iter_mut()
            .map(|c| c.draw(self.quota, &mut self.rng))
            .collect();
        let all: Vec<usize> = drawn.iter().flatten().copied().collect();
        let x = self.dataset.x.select_rows(&all);
        let y = all.iter().map(|&i| self.dataset.y[i]).collect();
        let a = all.iter().map(|&i| self.dataset.a[i]).collect();
        let block = |idx: &[usize]| self.dataset.x.select_rows(idx);
        let pairs = match self.constraint {
            Constraint::Dp => vec![PairedBatch::new(block(&drawn[0]), block(&drawn[1])).unwrap()],
            Constraint::Eo => vec![
                PairedBatch::new(block(&drawn[0]), block(&drawn[1])).unwrap(),
                PairedBatch::new(block(&drawn[2]), block(&drawn[3])).unwrap(),
            ],
        };
        TrainBatch { x, y, a, pairs }
    }
}
