//! Closed-form optima of the L2-regularized linear-in-features fairness
//! problems, the path-derivative second-moment matrix they depend on, and an
//! independent gradient-descent oracle used to cross-check both.
//!
//! The model class is f(x) = <v, phi(x)> for a fixed feature map phi. With
//! squared penalties, the gap-regularized objective has optimum
//! v* = (1/l2) (d_pm - soft-projection of d_pm onto delta_01), and the
//! mixup-smoothness objective has optimum v* = (l1 D + l2 I)^{-1} d_pm,
//! where D integrates the outer product of the mean path derivative.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::mixup::{check_grid, PairedBatch};
use crate::{Matrix, Real, Vector};

#[derive(Debug, Error)]
pub enum ClosedFormError {
    #[error("soft projection undefined: zero direction with zero ridge")]
    ZeroProjection,
    #[error("ridge weight l2 must be positive, got {0}")]
    BadRidge(Real),
    #[error("penalty weight l1 must be non-negative, got {0}")]
    BadPenaltyWeight(Real),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("feature map expects input dimension {expected}, got {got}")]
    BadInputDim { expected: usize, got: usize },
    #[error("polynomial degree must be >= 1")]
    BadDegree,
    #[error("random Fourier map needs at least one feature")]
    EmptyFeatureMap,
    #[error("linear system is ill-conditioned (pivot ratio {0:.3e})")]
    IllConditioned(Real),
    #[error("gradient descent diverged after {0} steps")]
    Diverged(usize),
    #[error("dataset is missing a label or group")]
    MissingCell,
    #[error(transparent)]
    Mixup(#[from] crate::mixup::MixupError),
}

// ---------------------------------------------------------------------------
// Feature maps
// ---------------------------------------------------------------------------

/// Deterministic feature map phi: R^dim -> R^out with an analytic
/// directional derivative.
#[derive(Debug, Clone)]
pub enum FeatureMap {
    /// phi(x) = x.
    Identity { dim: usize },
    /// All monomials of total degree 1..=degree, ordered by total degree
    /// then lexicographically by exponent vector.
    Polynomial { dim: usize, degree: usize, monomials: Vec<Vec<u32>> },
    /// phi_k(x) = sqrt(2/count) cos(<w_k, x> + b_k) with w_k ~ N(0, I/bw^2)
    /// and b_k ~ U[0, 2 pi), drawn from the given seed.
    RandomFourier { dim: usize, omegas: Matrix, phases: Vector },
}

fn monomial_exponents(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(dim: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == dim - 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=remaining).rev() {
            prefix.push(e);
            rec(dim, remaining - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 1..=degree as u32 {
        rec(dim, total, &mut Vec::new(), &mut out);
    }
    out
}

impl FeatureMap {
    pub fn identity(dim: usize) -> Self {
        FeatureMap::Identity { dim }
    }

    pub fn polynomial(dim: usize, degree: usize) -> Result<Self, ClosedFormError> {
        if degree == 0 {
            return Err(ClosedFormError::BadDegree);
        }
        let monomials = monomial_exponents(dim, degree);
        Ok(FeatureMap::Polynomial { dim, degree, monomials })
    }

    pub fn random_fourier(
        dim: usize,
        count: usize,
        bandwidth: Real,
        seed: u64,
    ) -> Result<Self, ClosedFormError> {
        if count == 0 {
            return Err(ClosedFormError::EmptyFeatureMap);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut omegas = Matrix::zeros(count, dim);
        for r in 0..count {
            for c in 0..dim {
                let g: Real = StandardNormal.sample(&mut rng);
                omegas.set(r, c, g / bandwidth);
            }
        }
        let phases = (0..count)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        Ok(FeatureMap::RandomFourier { dim, omegas, phases })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Polynomial { dim, .. } => *dim,
            FeatureMap::RandomFourier { dim, .. } => *dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Polynomial { monomials, .. } => monomials.len(),
            FeatureMap::RandomFourier { omegas, .. } => omegas.rows(),
        }
    }

    fn check_input(&self, x: &[Real]) -> Result<(), ClosedFormError> {
        if x.len() != self.input_dim() {
            return Err(ClosedFormError::BadInputDim { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    pub fn eval(&self, x: &[Real]) -> Result<Vector, ClosedFormError> {
        self.check_input(x)?;
        Ok(match self {
            FeatureMap::Identity { .. } => x.to_vec(),
            FeatureMap::Polynomial { monomials, .. } => monomials
                .iter()
                .map(|expo| {
                    expo.iter()
                        .zip(x)
                        .map(|(&e, &xi)| xi.powi(e as i32))
                        .product()
                })
                .collect(),
            FeatureMap::RandomFourier { omegas, phases, .. } => {
                let scale = (2.0 / omegas.rows() as Real).sqrt();
                (0..omegas.rows())
                    .map(|k| {
                        let arg: Real =
                            omegas.row(k).iter().zip(x).map(|(&w, &xi)| w * xi).sum::<Real>()
                                + phases[k];
                        scale * arg.cos()
                    })
                    .collect()
            }
        })
    }

    /// Analytic directional derivative (J phi)(x) v.
    pub fn jvp(&self, x: &[Real], v: &[Real]) -> Result<Vector, ClosedFormError> {
        self.check_input(x)?;
        self.check_input(v)?;
        Ok(match self {
            FeatureMap::Identity { .. } => v.to_vec(),
            FeatureMap::Polynomial { monomials, .. } => monomials
                .iter()
                .map(|expo| {
                    let mut acc = 0.0;
                    for (k, &ek) in expo.iter().enumerate() {
                        if ek == 0 {
                            continue;
                        }
                        // d/dx_k of prod x_i^{e_i}, times v_k
                        let mut term = ek as Real * v[k];
                        for (i, &ei) in expo.iter().enumerate() {
                            let e = if i == k { ei - 1 } else { ei };
                            term *= x[i].powi(e as i32);
                        }
                        acc += term;
                    }
                    acc
                })
                .collect(),
            FeatureMap::RandomFourier { omegas, phases, .. } => {
                let scale = (2.0 / omegas.rows() as Real).sqrt();
                (0..omegas.rows())
                    .map(|k| {
                        let row = omegas.row(k);
                        let arg: Real =
                            row.iter().zip(x).map(|(&w, &xi)| w * xi).sum::<Real>() + phases[k];
                        let wv: Real = row.iter().zip(v).map(|(&w, &vi)| w * vi).sum();
                        -scale * arg.sin() * wv
                    })
                    .collect()
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Mean embeddings
// ---------------------------------------------------------------------------

/// Mean feature embeddings of the label and group populations, with the
/// difference vectors the closed forms consume. The path second-moment
/// matrix `d` is attached separately when a mixup objective is verified.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosedFormInputs {
    pub m_plus: Vector,
    pub m_minus: Vector,
    pub m0: Vector,
    pub m1: Vector,
    pub delta_pm: Vector,
    pub delta_01: Vector,
    pub d: Option<Vec<Vector>>,
}

impl ClosedFormInputs {
    pub fn d_as_matrix(&self) -> Option<Matrix> {
        self.d.as_ref().map(|rows| Matrix::from_rows(rows))
    }

    pub fn set_d(&mut self, d: &Matrix) {
        self.d = Some((0..d.rows()).map(|i| d.row(i).to_vec()).collect());
    }
}

pub fn mean_embeddings(ds: &Dataset, map: &FeatureMap) -> Result<ClosedFormInputs, ClosedFormError> {
    let out = map.output_dim();
    let mut sums = [vec![0.0; out], vec![0.0; out], vec![0.0; out], vec![0.0; out]];
    let mut counts = [0usize; 4];
    for i in 0..ds.len() {
        let phi = map.eval(ds.x.row(i))?;
        // slots: 0 = y+, 1 = y-, 2 = group 0, 3 = group 1
        let slots = [
            if ds.y[i] == 1 { 0 } else { 1 },
            if ds.a[i] == 0 { 2 } else { 3 },
        ];
        for &s in &slots {
            counts[s] += 1;
            for (acc, &p) in sums[s].iter_mut().zip(&phi) {
                *acc += p;
            }
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(ClosedFormError::MissingCell);
    }
    let mean = |s: usize| -> Vector { sums[s].iter().map(|&v| v / counts[s] as Real).collect() };
    let (m_plus, m_minus, m0, m1) = (mean(0), mean(1), mean(2), mean(3));
    let delta_pm = m_plus.iter().zip(&m_minus).map(|(p, m)| p - m).collect::<Vector>();
    let delta_01 = m0.iter().zip(&m1).map(|(a, b)| a - b).collect::<Vector>();
    Ok(ClosedFormInputs { m_plus, m_minus, m0, m1, delta_pm, delta_01, d: None })
}

// ---------------------------------------------------------------------------
// Closed forms
// ---------------------------------------------------------------------------

/// Ridge-softened projection of x onto the line through u:
/// (u u^T / (||u||^2 + beta)) x. With beta = 0 this is the orthogonal
/// projection; it needs u != 0 or beta > 0 to be defined.
pub fn soft_project(u: &[Real], x: &[Real], beta: Real) -> Result<Vector, ClosedFormError> {
    if u.len() != x.len() {
        return Err(ClosedFormError::DimMismatch(u.len(), x.len()));
    }
    let norm2: Real = u.iter().map(|v| v * v).sum();
    if norm2 + beta == 0.0 {
        return Err(ClosedFormError::ZeroProjection);
    }
    let coeff = u.iter().zip(x).map(|(a, b)| a * b).sum::<Real>() / (norm2 + beta);
    Ok(u.iter().map(|&v| coeff * v).collect())
}

fn check_weights(l1: Real, l2: Real) -> Result<(), ClosedFormError> {
    if l2 <= 0.0 {
        return Err(ClosedFormError::BadRidge(l2));
    }
    if l1 < 0.0 {
        return Err(ClosedFormError::BadPenaltyWeight(l1));
    }
    Ok(())
}

/// Optimum of max_v <v, delta_pm> - (l1/2) <v, delta_01>^2 - (l2/2) ||v||^2:
/// v* = (1/l2)(delta_pm - soft-projection of delta_pm onto delta_01 with
/// ridge l2/l1). With l1 = 0 the penalty vanishes and v* = delta_pm / l2.
pub fn prop2_solution(
    delta_pm: &[Real],
    delta_01: &[Real],
    l1: Real,
    l2: Real,
) -> Result<Vector, ClosedFormError> {
    check_weights(l1, l2)?;
    if delta_pm.len() != delta_01.len() {
        return Err(ClosedFormError::DimMismatch(delta_pm.len(), delta_01.len()));
    }
    if l1 == 0.0 {
        return Ok(delta_pm.iter().map(|v| v / l2).collect());
    }
    let proj = soft_project(delta_01, delta_pm, l2 / l1)?;
    Ok(delta_pm.iter().zip(&proj).map(|(d, p)| (d - p) / l2).collect())
}

/// How the path derivative of the mean embedding is computed when
/// assembling D.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmbeddingDeriv {
    /// Central finite difference in t with the given step.
    CentralDiff { h: Real },
    /// Exact Jacobian-vector product of the feature map.
    Analytic,
}

/// Second-moment matrix of the mean embedding path derivative:
/// D = integral over [0,1] of mdot_t mdot_t^T dt, where
/// mdot_t = mean_i (J phi)(mix_i(t)) (x1_i - x0_i), integrated with the
/// trapezoid rule on the grid and symmetrized.
pub fn d_matrix(
    pair: &PairedBatch,
    map: &FeatureMap,
    grid: &[Real],
    mode: EmbeddingDeriv,
) -> Result<Matrix, ClosedFormError> {
    check_grid(grid)?;
    let out = map.output_dim();
    let n = pair.rows();
    let mdot_at = |t: Real| -> Result<Vector, ClosedFormError> {
        let mut acc = vec![0.0; out];
        for i in 0..n {
            let x0 = pair.x0.row(i);
            let x1 = pair.x1.row(i);
            let mixed: Vector = x0.iter().zip(x1).map(|(&a, &b)| (1.0 - t) * a + t * b).collect();
            let term = match mode {
                EmbeddingDeriv::Analytic => {
                    let dir: Vector = x1.iter().zip(x0).map(|(&b, &a)| b - a).collect();
                    map.jvp(&mixed, &dir)?
                }
                EmbeddingDeriv::CentralDiff { h } => {
                    let at = |tt: Real| -> Result<Vector, ClosedFormError> {
                        let m: Vector =
                            x0.iter().zip(x1).map(|(&a, &b)| (1.0 - tt) * a + tt * b).collect();
                        map.eval(&m)
                    };
                    let up = at(t + h)?;
                    let down = at(t - h)?;
                    up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)).collect()
                }
            };
            for (a, v) in acc.iter_mut().zip(&term) {
                *a += v;
            }
        }
        Ok(acc.iter().map(|v| v / n as Real).collect())
    };

    let mut d = Matrix::zeros(out, out);
    let mut prev: Option<(Real, Matrix)> = None;
    for &t in grid {
        let mdot = mdot_at(t)?;
        let mut outer = Matrix::zeros(out, out);
        for r in 0..out {
            for c in 0..out {
                outer.set(r, c, mdot[r] * mdot[c]);
            }
        }
        if let Some((pt, pm)) = prev {
            d = d.add(&pm.add(&outer).scale(0.5 * (t - pt)));
        }
        prev = Some((t, outer));
    }
    // exact symmetry despite accumulation order
    let mut sym = Matrix::zeros(out, out);
    for r in 0..out {
        for c in 0..out {
            sym.set(r, c, 0.5 * (d.get(r, c) + d.get(c, r)));
        }
    }
    Ok(sym)
}

/// Optimum of max_v <v, delta_pm> - (l1/2) v^T D v - (l2/2) ||v||^2:
/// v* = (l1 D + l2 I)^{-1} delta_pm, solved by LU with partial pivoting.
pub fn prop3_solution(
    delta_pm: &[Real],
    d: &Matrix,
    l1: Real,
    l2: Real,
) -> Result<Vector, ClosedFormError> {
    check_weights(l1, l2)?;
    let n = delta_pm.len();
    if d.rows() != n || d.cols() != n {
        return Err(ClosedFormError::DimMismatch(d.rows(), n));
    }
    let mut a = d.scale(l1);
    for i in 0..n {
        a.set(i, i, a.get(i, i) + l2);
    }
    lu_solve(&a, delta_pm)
}

/// Dense LU solve with partial pivoting; rejects systems whose pivot ratio
/// exceeds 1e12 as ill-conditioned.
pub fn lu_solve(a: &Matrix, b: &[Real]) -> Result<Vector, ClosedFormError> {
    let n = b.len();
    assert_eq!(a.shape(), (n, n));
    let mut m = a.clone();
    let mut x: Vector = b.to_vec();
    let mut max_pivot: Real = 0.0;
    let mut min_pivot = Real::INFINITY;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| m.get(i, col).abs().total_cmp(&m.get(j, col).abs()))
            .unwrap();
        let pivot = m.get(pivot_row, col);
        max_pivot = max_pivot.max(pivot.abs());
        min_pivot = min_pivot.min(pivot.abs());
        if pivot == 0.0 || max_pivot / min_pivot > 1e12 {
            return Err(ClosedFormError::IllConditioned(if pivot == 0.0 {
                Real::INFINITY
            } else {
                max_pivot / min_pivot
            }));
        }
        if pivot_row != col {
            for c in 0..n {
                let tmp = m.get(col, c);
                m.set(col, c, m.get(pivot_row, c));
                m.set(pivot_row, c, tmp);
            }
            x.swap(col, pivot_row);
        }
        for r in col + 1..n {
            let factor = m.get(r, col) / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                m.set(r, c, m.get(r, c) - factor * m.get(col, c));
            }
            x[r] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        x[col] /= m.get(col, col);
        for r in 0..col {
            x[r] -= m.get(r, col) * x[col];
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Gradient-descent oracle
// ---------------------------------------------------------------------------

/// Fairness penalty the oracle minimizes alongside the linear utility and
/// ridge terms.
#[derive(Debug, Clone)]
pub enum OraclePenalty<'a> {
    /// (l1/2) <v, delta_01>^2.
    GapL2 { delta_01: &'a [Real] },
    /// (l1/2) v^T D v.
    MixupL2 { d: &'a Matrix },
}

/// Minimizes F(v) = -<v, delta_pm> + penalty + (l2/2)||v||^2 by plain
/// gradient descent from v = 0. Stops when the gradient sup-norm falls
/// below `tol`; ten consecutive objective increases abort as divergence.
pub fn gd_oracle(
    delta_pm: &[Real],
    penalty: &OraclePenalty<'_>,
    l1: Real,
    l2: Real,
    lr: Real,
    max_steps: usize,
    tol: Real,
) -> Result<Vector, ClosedFormError> {
    check_weights(l1, l2)?;
    let n = delta_pm.len();
    match penalty {
        OraclePenalty::GapL2 { delta_01 } => {
            if delta_01.len() != n {
                return Err(ClosedFormError::DimMismatch(delta_01.len(), n));
            }
        }
        OraclePenalty::MixupL2 { d } => {
            if d.rows() != n || d.cols() != n {
                return Err(ClosedFormError::DimMismatch(d.rows(), n));
            }
        }
    }
    let objective = |v: &[Real]| -> Real {
        let util: Real = v.iter().zip(delta_pm).map(|(a, b)| a * b).sum();
        let ridge: Real = v.iter().map(|a| a * a).sum::<Real>() * 0.5 * l2;
        let pen = match penalty {
            OraclePenalty::GapL2 { delta_01 } => {
                let g: Real = v.iter().zip(*delta_01).map(|(a, b)| a * b).sum();
                0.5 * l1 * g * g
            }
            OraclePenalty::MixupL2 { d } => {
                let mut quad = 0.0;
                for r in 0..n {
                    let dv: Real = d.row(r).iter().zip(v).map(|(a, b)| a * b).sum();
                    quad += v[r] * dv;
                }
                0.5 * l1 * quad
            }
        };
        -util + pen + ridge
    };
    let mut v = vec![0.0; n];
    let mut prev_obj = objective(&v);
    let mut rising = 0usize;
    for step in 0..max_steps {
        let mut grad: Vector = v
            .iter()
            .zip(delta_pm)
            .map(|(&vi, &di)| l2 * vi - di)
            .collect();
        match penalty {
            OraclePenalty::GapL2 { delta_01 } => {
                let g: Real = v.iter().zip(*delta_01).map(|(a, b)| a * b).sum();
                for (gi, &ui) in grad.iter_mut().zip(*delta_01) {
                    *gi += l1 * g * ui;
                }
            }
            OraclePenalty::MixupL2 { d } => {
                for r in 0..n {
                    let dv: Real = d.row(r).iter().zip(&v).map(|(a, b)| a * b).sum();
                    grad[r] += l1 * dv;
                }
            }
        }
        let sup = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if sup <= tol {
            return Ok(v);
        }
        for (vi, gi) in v.iter_mut().zip(&grad) {
            *vi -= lr * gi;
        }
        let obj = objective(&v);
        if obj > prev_obj || !obj.is_finite() {
            rising += 1;
            if rising >= 10 {
                return Err(ClosedFormError::Diverged(step + 1));
            }
        } else {
            rising = 0;
        }
        prev_obj = obj;
    }
    Ok(v)
}
