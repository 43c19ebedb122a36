//! Minimal differentiation engine: a reverse-mode tape over a closed set of
//! primitives, forward-mode tangent propagation, and a finite-difference
//! checker.
//!
//! The primitive set is deliberately small (affine, ReLU, sigmoid, linear
//! combination, mean, inner product, |.|, (.)^2, binary cross-entropy) so the
//! tape stays auditable. Anything else must be composed from these.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Matrix2D;

/// Probability clamp distance used by the BCE primitive.
pub const BCE_CLAMP: f64 = 1e-7;

pub type NodeId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward root must be a 1x1 scalar, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("parameter slot {0} registered twice on one tape")]
    DuplicateParam(usize),
    #[error("finite-difference step must be positive")]
    NonPositiveStep,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Const,
    Param,
    /// x (n x in) * w (in x out) + b (1 x out, broadcast over rows).
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    /// Elementwise ca*a + cb*b.
    LinComb { a: NodeId, b: NodeId, ca: S, cb: S },
    /// Mean over all entries -> 1x1.
    MeanAll { x: NodeId },
    /// Sum of the elementwise product -> 1x1.
    Dot { a: NodeId, b: NodeId },
    Abs { x: NodeId },
    Square { x: NodeId },
    /// Mean binary cross-entropy of scores (n x 1) against 0/1 labels -> 1x1.
    BceMean { scores: NodeId, labels: NodeId },
}

struct Node<S> {
    op: Op<S>,
    value: Matrix2D<S>,
}

/// Single-owner record of primitive ops; replaying it backward from a scalar
/// root yields gradients for every registered parameter.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    param_slots: Vec<(usize, NodeId)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_slots: Vec::new() }
    }

    fn push(&mut self, op: Op<S>, value: Matrix2D<S>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Matrix2D<S> {
        &self.nodes[id].value
    }

    /// Value of a scalar (1x1) node.
    pub fn scalar_value(&self, id: NodeId) -> S {
        self.nodes[id].value.item()
    }

    pub fn constant(&mut self, value: Matrix2D<S>) -> NodeId {
        self.push(Op::Const, value)
    }

    /// Register a trainable parameter under a caller-chosen slot index.
    pub fn param(&mut self, slot: usize, value: Matrix2D<S>) -> Result<NodeId, DiffError> {
        if self.param_slots.iter().any(|&(s, _)| s == slot) {
            return Err(DiffError::DuplicateParam(slot));
        }
        let id = self.push(Op::Param, value);
        self.param_slots.push((slot, id));
        Ok(id)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (xv, wv, bv) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value);
        if xv.cols() != wv.rows() {
            return Err(DiffError::ShapeMismatch { op: "affine", left: xv.shape(), right: wv.shape() });
        }
        if bv.shape() != (1, wv.cols()) {
            return Err(DiffError::ShapeMismatch { op: "affine", left: wv.shape(), right: bv.shape() });
        }
        let value = xv.matmul(wv).add_row_broadcast(bv);
        Ok(self.push(Op::Affine { x, w, b }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(Op::Relu { x }, value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| S::one() / (S::one() + (-v).exp()));
        self.push(Op::Sigmoid { x }, value)
    }

    pub fn lincomb(&mut self, a: NodeId, ca: S, b: NodeId, cb: S) -> Result<NodeId, DiffError> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape() != bv.shape() {
            return Err(DiffError::ShapeMismatch { op: "lincomb", left: av.shape(), right: bv.shape() });
        }
        let value = av.lincomb(ca, bv, cb);
        Ok(self.push(Op::LinComb { a, b, ca, cb }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.lincomb(a, S::one(), b, S::one())
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let value = Matrix2D::scalar(self.nodes[x].value.mean());
        self.push(Op::MeanAll { x }, value)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape() != bv.shape() {
            return Err(DiffError::ShapeMismatch { op: "dot", left: av.shape(), right: bv.shape() });
        }
        let value = Matrix2D::scalar(av.dot(bv));
        Ok(self.push(Op::Dot { a, b }, value))
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| v.abs());
        self.push(Op::Abs { x }, value)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| v * v);
        self.push(Op::Square { x }, value)
    }

    /// Mean BCE of scores against labels, with scores clamped [`BCE_CLAMP`]
    /// away from {0,1} so the log stays finite.
    pub fn bce_mean(&mut self, scores: NodeId, labels: NodeId) -> Result<NodeId, DiffError> {
        let (sv, lv) = (&self.nodes[scores].value, &self.nodes[labels].value);
        if sv.shape() != lv.shape() {
            return Err(DiffError::ShapeMismatch { op: "bce_mean", left: sv.shape(), right: lv.shape() });
        }
        let lo = S::c(BCE_CLAMP);
        let hi = S::one() - lo;
        let mut acc = S::zero();
        for (&p, &y) in sv.as_slice().iter().zip(lv.as_slice().iter()) {
            let p = p.max(lo).min(hi);
            acc = acc - (y * p.ln() + (S::one() - y) * (S::one() - p).ln());
        }
        let value = Matrix2D::scalar(acc / S::from_usize(sv.len()).unwrap());
        Ok(self.push(Op::BceMean { scores, labels }, value))
    }

    /// Reverse sweep from a scalar root. Returns one gradient per registered
    /// parameter slot, densely indexed (unregistered slots are an error in
    /// the caller's bookkeeping and yield zero-size gradients here).
    pub fn backward(&self, root: NodeId) -> Result<Vec<Matrix2D<S>>, DiffError> {
        let root_shape = self.nodes[root].value.shape();
        if root_shape != (1, 1) {
            return Err(DiffError::NonScalarRoot(root_shape));
        }
        let mut adjoints: Vec<Option<Matrix2D<S>>> = vec![None; self.nodes.len()];
        adjoints[root] = Some(Matrix2D::scalar(S::one()));

        for id in (0..=root).rev() {
            let grad = match adjoints[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Const | Op::Param => {
                    adjoints[id] = Some(grad);
                }
                Op::Affine { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    accumulate(&mut adjoints, *x, grad.matmul_t(wv));
                    accumulate(&mut adjoints, *w, xv.t_matmul(&grad));
                    accumulate(&mut adjoints, *b, grad.column_sums());
                }
                Op::Relu { x } => {
                    let mask = self.nodes[*x]
                        .value
                        .map(|v| if v > S::zero() { S::one() } else { S::zero() });
                    accumulate(&mut adjoints, *x, grad.zip_map(&mask, |g, m| g * m));
                }
                Op::Sigmoid { x } => {
                    let s = &self.nodes[id].value;
                    let local = s.map(|v| v * (S::one() - v));
                    accumulate(&mut adjoints, *x, grad.zip_map(&local, |g, d| g * d));
                }
                Op::LinComb { a, b, ca, cb } => {
                    accumulate(&mut adjoints, *a, grad.scale(*ca));
                    accumulate(&mut adjoints, *b, grad.scale(*cb));
                }
                Op::MeanAll { x } => {
                    let xv = &self.nodes[*x].value;
                    let g = grad.item() / S::from_usize(xv.len()).unwrap();
                    accumulate(&mut adjoints, *x, xv.map(|_| g));
                }
                Op::Dot { a, b } => {
                    let g = grad.item();
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    accumulate(&mut adjoints, *a, bv.scale(g));
                    accumulate(&mut adjoints, *b, av.scale(g));
                }
                Op::Abs { x } => {
                    let sign = self.nodes[*x].value.map(|v| {
                        if v > S::zero() {
                            S::one()
                        } else if v < S::zero() {
                            -S::one()
                        } else {
                            S::zero()
                        }
                    });
                    accumulate(&mut adjoints, *x, grad.zip_map(&sign, |g, s| g * s));
                }
                Op::Square { x } => {
                    let two = S::c(2.0);
                    let local = self.nodes[*x].value.map(|v| two * v);
                    accumulate(&mut adjoints, *x, grad.zip_map(&local, |g, d| g * d));
                }
                Op::BceMean { scores, labels } => {
                    let sv = &self.nodes[*scores].value;
                    let lv = &self.nodes[*labels].value;
                    let g = grad.item() / S::from_usize(sv.len()).unwrap();
                    let lo = S::c(BCE_CLAMP);
                    let hi = S::one() - lo;
                    let gs = sv.zip_map(lv, |p, y| {
                        if p < lo || p > hi {
                            // clamp active: d clamp(p)/dp = 0
                            S::zero()
                        } else {
                            g * (p - y) / (p * (S::one() - p))
                        }
                    });
                    accumulate(&mut adjoints, *scores, gs);
                }
            }
        }

        let n_slots = self.param_slots.iter().map(|&(s, _)| s + 1).max().unwrap_or(0);
        let mut grads = vec![Matrix2D::zeros(0, 0); n_slots];
        for &(slot, id) in &self.param_slots {
            grads[slot] = match adjoints[id].take() {
                Some(g) => g,
                None => self.nodes[id].value.map(|_| S::zero()),
            };
        }
        Ok(grads)
    }
}

fn accumulate<S: Scalar>(adjoints: &mut [Option<Matrix2D<S>>], id: NodeId, g: Matrix2D<S>) {
    match &mut adjoints[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Forward-mode value/tangent pair for a batch, used to compute exact
/// directional derivatives without touching the tape.
#[derive(Clone, Debug)]
pub struct DualBatch<S> {
    pub value: Matrix2D<S>,
    pub tangent: Matrix2D<S>,
}

impl<S: Scalar> DualBatch<S> {
    pub fn new(value: Matrix2D<S>, tangent: Matrix2D<S>) -> Result<Self, DiffError> {
        if value.shape() != tangent.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "dual",
                left: value.shape(),
                right: tangent.shape(),
            });
        }
        Ok(DualBatch { value, tangent })
    }

    pub fn affine(&self, w: &Matrix2D<S>, b: &Matrix2D<S>) -> Self {
        DualBatch {
            value: self.value.matmul(w).add_row_broadcast(b),
            tangent: self.tangent.matmul(w),
        }
    }

    pub fn relu(&self) -> Self {
        let mask = self.value.map(|v| if v > S::zero() { S::one() } else { S::zero() });
        DualBatch {
            value: self.value.zip_map(&mask, |v, m| v * m),
            tangent: self.tangent.zip_map(&mask, |t, m| t * m),
        }
    }

    pub fn sigmoid(&self) -> Self {
        let s = self.value.map(|v| S::one() / (S::one() + (-v).exp()));
        let d = s.map(|v| v * (S::one() - v));
        DualBatch { value: s, tangent: self.tangent.zip_map(&d, |t, m| t * m) }
    }
}

/// Worst-coordinate relative discrepancy between an analytic gradient and the
/// central finite difference of `f` at `point`.
pub fn finite_diff_check<S: Scalar>(
    mut f: impl FnMut(&[S]) -> S,
    point: &[S],
    analytic: &[S],
    step: S,
) -> Result<S, DiffError> {
    if step <= S::zero() {
        return Err(DiffError::NonPositiveStep);
    }
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut fd = vec![S::zero(); point.len()];
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        fd[i] = (up - down) / (S::c(2.0) * step);
    }
    let fd_max = fd.iter().fold(S::zero(), |a, &v| a.max(v.abs()));
    let floor = S::c(1e-8) * (S::one() + fd_max);
    let mut worst = S::zero();
    for (&a, &d) in analytic.iter().zip(fd.iter()) {
        let rel = (a - d).abs() / (d.abs() + floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(tape: &mut Tape<f64>, slot: usize, v: f64) -> NodeId {
        tape.param(slot, Matrix2D::scalar(v)).unwrap()
    }

    #[test]
    fn square_gradient() {
        // f(w) = w^2 at w = 3 -> grad 6
        let mut tape = Tape::new();
        let w = scalar_param(&mut tape, 0, 3.0);
        let y = tape.square(w);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads[0].item(), 6.0);
    }

    #[test]
    fn inner_product_gradient_is_the_constant() {
        let mut tape = Tape::new();
        let w = tape
            .param(0, Matrix2D::from_vec(1, 3, vec![0.3, -1.2, 2.0]))
            .unwrap();
        let c = tape.constant(Matrix2D::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let y = tape.dot(w, c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads[0].as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(0, Matrix2D::zeros(2, 2)).unwrap();
        let r = tape.relu(w);
        assert_eq!(tape.backward(r).unwrap_err(), DiffError::NonScalarRoot((2, 2)));
    }

    #[test]
    fn duplicate_param_slot_rejected() {
        let mut tape = Tape::<f64>::new();
        tape.param(0, Matrix2D::zeros(1, 1)).unwrap();
        assert_eq!(
            tape.param(0, Matrix2D::zeros(1, 1)).unwrap_err(),
            DiffError::DuplicateParam(0)
        );
    }

    #[test]
    fn linearity_of_reverse_grad() {
        // grad of a*f + b*g equals a*grad(f) + b*grad(g)
        let build = |coeffs: Option<(f64, f64)>| {
            let mut tape = Tape::new();
            let w = tape
                .param(0, Matrix2D::from_vec(1, 2, vec![0.7, -0.4]))
                .unwrap();
            let c = tape.constant(Matrix2D::from_vec(1, 2, vec![2.0, 5.0]));
            let f = tape.dot(w, c).unwrap(); // linear
            let sq = tape.square(w);
            let g = tape.mean_all(sq); // quadratic
            match coeffs {
                Some((a, b)) => {
                    let root = tape.lincomb(f, a, g, b).unwrap();
                    tape.backward(root).unwrap()
                }
                None => {
                    let gf = tape.backward(f).unwrap();
                    let gg = tape.backward(g).unwrap();
                    vec![gf[0].clone(), gg[0].clone()]
                }
            }
        };
        let combined = build(Some((1.5, -2.5)));
        let parts = build(None);
        let expected = parts[0].lincomb(1.5, &parts[1], -2.5);
        for (c, e) in combined[0].as_slice().iter().zip(expected.as_slice()) {
            assert!((c - e).abs() < 1e-14);
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let w = tape
                .param(0, Matrix2D::from_vec(2, 2, vec![0.1, -0.2, 0.3, 0.4]))
                .unwrap();
            let x = tape.constant(Matrix2D::from_vec(1, 2, vec![1.3, -0.7]));
            let b = tape.constant(Matrix2D::from_vec(1, 2, vec![0.05, -0.05]));
            let h = tape.affine(x, w, b).unwrap();
            let s = tape.sigmoid(h);
            let m = tape.mean_all(s);
            tape.backward(m).unwrap()[0].clone()
        };
        assert_eq!(run().as_slice(), run().as_slice());
    }

    #[test]
    fn dual_sigmoid_at_zero() {
        // sigma'(0) = 1/4
        let d = DualBatch::new(Matrix2D::scalar(0.0_f64), Matrix2D::scalar(1.0))
            .unwrap()
            .sigmoid();
        assert!((d.tangent.item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn dual_linear_map_exact() {
        // f(x) = <c, x>: directional derivative along u is <c, u>
        let c = Matrix2D::from_vec(2, 1, vec![3.0_f64, -1.0]);
        let b = Matrix2D::scalar(0.0);
        let x = Matrix2D::from_vec(1, 2, vec![0.4, 0.9]);
        let u = Matrix2D::from_vec(1, 2, vec![1.0, 2.0]);
        let d = DualBatch::new(x, u).unwrap().affine(&c, &b);
        assert!((d.tangent.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fd_check_exact_gradient_small_error() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let point = [1.5, -2.0];
        let analytic = [3.0, 3.0];
        let err = finite_diff_check(f, &point, &analytic, 1e-6).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn fd_check_flags_zeroed_coordinate() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let point = [1.5, -2.0];
        let analytic = [0.0, 3.0]; // first coordinate zeroed out
        let err = finite_diff_check(f, &point, &analytic, 1e-6).unwrap();
        assert!((err - 1.0).abs() < 1e-3, "err = {err}");
    }

    #[test]
    fn fd_check_rejects_bad_step() {
        let f = |_: &[f64]| 0.0;
        assert_eq!(
            finite_diff_check(f, &[0.0], &[0.0], 0.0).unwrap_err(),
            DiffError::NonPositiveStep
        );
    }
}
