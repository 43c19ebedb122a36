//! MLP classifiers with ReLU hidden layers and a sigmoid output, plus a
//! latent split point separating the encoder from the prediction head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, DualBatch, NodeId, Tape, BCE_CLAMP};
use crate::{Matrix, Real};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer_dims needs at least input and output entries, got {0:?}")]
    TooFewDims(Vec<usize>),
    #[error("final output dimension must be 1, got {0}")]
    BadOutputDim(usize),
    #[error("layer dimension must be positive")]
    ZeroDim,
    #[error("split_index {split} out of range for {layers} layers")]
    BadSplit { split: usize, layers: usize },
    #[error("input has {got} columns, model expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("latent has {got} columns, head expects {expected}")]
    LatentWidth { expected: usize, got: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint inconsistent: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Matrix, // in x out
    pub bias: Matrix,   // 1 x out
    pub activation: Activation,
}

/// Feed-forward net: hidden ReLU layers, identity final layer, sigmoid output.
/// `split_index` marks the boundary between encoder g (layers before it) and
/// prediction head f (layers from it on).
#[derive(Debug, Clone)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub split_index: usize,
    pub layer_dims: Vec<usize>,
    pub seed: u64,
}

impl MlpModel {
    /// Deterministic init: weights ~ N(0, 2/fan_in), biases zero.
    pub fn init(seed: u64, layer_dims: &[usize], split_index: usize) -> Result<Self, ModelError> {
        if layer_dims.len() < 2 {
            return Err(ModelError::TooFewDims(layer_dims.to_vec()));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(ModelError::ZeroDim);
        }
        let out = *layer_dims.last().unwrap();
        if out != 1 {
            return Err(ModelError::BadOutputDim(out));
        }
        let n_layers = layer_dims.len() - 1;
        if split_index >= n_layers {
            return Err(ModelError::BadSplit { split: split_index, layers: n_layers });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            let std = (2.0 / fan_in as Real).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let data: Vec<Real> = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            layers.push(Layer {
                weight: Matrix::from_vec(fan_in, fan_out, data),
                bias: Matrix::zeros(1, fan_out),
                activation: if l + 1 == n_layers { Activation::Identity } else { Activation::Relu },
            });
        }
        Ok(MlpModel { layers, split_index, layer_dims: layer_dims.to_vec(), seed })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.layer_dims[self.split_index]
    }

    fn check_input(&self, x: &Matrix) -> Result<(), ModelError> {
        if x.cols() != self.input_dim() {
            return Err(ModelError::InputWidth { expected: self.input_dim(), got: x.cols() });
        }
        Ok(())
    }

    fn apply_layers(&self, range: std::ops::Range<usize>, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        for layer in &self.layers[range] {
            h = h.matmul(&layer.weight).add_row_broadcast(&layer.bias);
            if layer.activation == Activation::Relu {
                h = h.map(|v| v.max(0.0));
            }
        }
        h
    }

    /// Pre-sigmoid logits, n x 1.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        self.check_input(x)?;
        Ok(self.apply_layers(0..self.layers.len(), x))
    }

    /// Scores in (0,1), n x 1.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        Ok(self.logits(x)?.map(sigmoid))
    }

    /// Encoder output g(x); identity when split_index == 0.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        self.check_input(x)?;
        Ok(self.apply_layers(0..self.split_index, x))
    }

    /// Prediction head on latent codes; full forward when split_index == 0.
    pub fn predict_from_latent(&self, z: &Matrix) -> Result<Matrix, ModelError> {
        if z.cols() != self.latent_dim() {
            return Err(ModelError::LatentWidth { expected: self.latent_dim(), got: z.cols() });
        }
        Ok(self.apply_layers(self.split_index..self.layers.len(), z).map(sigmoid))
    }

    /// Exact directional derivative of the score per row: <grad_x f(x_i), dir_i>.
    pub fn forward_jvp(&self, x: &Matrix, dir: &Matrix) -> Result<Vec<Real>, ModelError> {
        self.check_input(x)?;
        let mut dual = DualBatch::new(x.clone(), dir.clone())?;
        dual = self.jvp_layers(0..self.layers.len(), dual);
        Ok(dual.sigmoid().tangent.as_slice().to_vec())
    }

    /// Directional derivative of the head score with respect to the latent.
    pub fn head_jvp(&self, z: &Matrix, dz: &Matrix) -> Result<Vec<Real>, ModelError> {
        if z.cols() != self.latent_dim() {
            return Err(ModelError::LatentWidth { expected: self.latent_dim(), got: z.cols() });
        }
        let mut dual = DualBatch::new(z.clone(), dz.clone())?;
        dual = self.jvp_layers(self.split_index..self.layers.len(), dual);
        Ok(dual.sigmoid().tangent.as_slice().to_vec())
    }

    fn jvp_layers(&self, range: std::ops::Range<usize>, mut dual: DualBatch<Real>) -> DualBatch<Real> {
        for layer in &self.layers[range] {
            dual = dual.affine(&layer.weight, &layer.bias);
            if layer.activation == Activation::Relu {
                dual = dual.relu();
            }
        }
        dual
    }

    /// Parameter matrices in slot order [w0, b0, w1, b1, ...].
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_param_slots(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let doc = Checkpoint {
            layer_dims: self.layer_dims.clone(),
            split_index: self.split_index,
            seed: self.seed,
            weights: self.layers.iter().map(|l| l.weight.as_slice().to_vec()).collect(),
            biases: self.layers.iter().map(|l| l.bias.as_slice().to_vec()).collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let doc: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut model = MlpModel::init(doc.seed, &doc.layer_dims, doc.split_index)?;
        if doc.weights.len() != model.layers.len() || doc.biases.len() != model.layers.len() {
            return Err(ModelError::BadCheckpoint("layer count mismatch".into()));
        }
        for (i, layer) in model.layers.iter_mut().enumerate() {
            if doc.weights[i].len() != layer.weight.len() || doc.biases[i].len() != layer.bias.len() {
                return Err(ModelError::BadCheckpoint(format!("layer {i} size mismatch")));
            }
            layer.weight.as_mut_slice().copy_from_slice(&doc.weights[i]);
            layer.bias.as_mut_slice().copy_from_slice(&doc.biases[i]);
        }
        Ok(model)
    }
}

/// Model checkpoint document: weights row-major per layer.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    layer_dims: Vec<usize>,
    split_index: usize,
    seed: u64,
    weights: Vec<Vec<Real>>,
    biases: Vec<Vec<Real>>,
}

pub fn sigmoid(v: Real) -> Real {
    1.0 / (1.0 + (-v).exp())
}

/// Mean binary cross-entropy with scores clamped 1e-7 from the boundary.
pub fn bce_loss(scores: &[Real], labels: &[u8]) -> Real {
    assert_eq!(scores.len(), labels.len(), "bce length mismatch");
    assert!(!scores.is_empty(), "bce of empty batch");
    let mut acc = 0.0;
    for (&p, &y) in scores.iter().zip(labels.iter()) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let y = y as Real;
        acc -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    acc / scores.len() as Real
}

/// A model's parameters registered on a tape, so losses and penalties built
/// from the same forward graph share one gradient pass.
pub struct TapedMlp {
    layers: Vec<(NodeId, NodeId, Activation)>,
    split_index: usize,
}

impl TapedMlp {
    /// Register every parameter as a tape param, slots base..base+2L.
    pub fn bind(tape: &mut Tape<Real>, model: &MlpModel, base_slot: usize) -> Result<Self, ModelError> {
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, layer) in model.layers.iter().enumerate() {
            let w = tape.param(base_slot + 2 * i, layer.weight.clone())?;
            let b = tape.param(base_slot + 2 * i + 1, layer.bias.clone())?;
            layers.push((w, b, layer.activation));
        }
        Ok(TapedMlp { layers, split_index: model.split_index })
    }

    /// Record the parameters as constants: forward passes through this copy
    /// contribute no parameter gradients (used for the frozen adversary).
    pub fn bind_frozen(tape: &mut Tape<Real>, model: &MlpModel) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()), l.activation))
            .collect();
        TapedMlp { layers, split_index: model.split_index }
    }

    fn chain(&self, tape: &mut Tape<Real>, range: std::ops::Range<usize>, x: NodeId) -> Result<NodeId, ModelError> {
        let mut h = x;
        for &(w, b, act) in &self.layers[range] {
            h = tape.affine(h, w, b)?;
            if act == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Full forward to scores, recorded on the tape.
    pub fn scores(&self, tape: &mut Tape<Real>, x: NodeId) -> Result<NodeId, ModelError> {
        let logits = self.chain(tape, 0..self.layers.len(), x)?;
        Ok(tape.sigmoid(logits))
    }

    /// Encoder part only.
    pub fn encode(&self, tape: &mut Tape<Real>, x: NodeId) -> Result<NodeId, ModelError> {
        self.chain(tape, 0..self.split_index, x)
    }

    /// Head from a latent node to scores.
    pub fn head_scores(&self, tape: &mut Tape<Real>, z: NodeId) -> Result<NodeId, ModelError> {
        let logits = self.chain(tape, self.split_index..self.layers.len(), z)?;
        Ok(tape.sigmoid(logits))
    }
}

/// Write tape gradients back into the model layout: one (weight, bias) pair
/// of gradient matrices per layer, in layer order.
pub fn grads_by_layer(model: &MlpModel, grads: &[Matrix], base_slot: usize) -> Vec<Matrix> {
    (0..model.num_param_slots()).map(|i| grads[base_slot + i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MlpModel::init(7, &[5, 200, 1], 1).unwrap();
        let b = MlpModel::init(7, &[5, 200, 1], 1).unwrap();
        for (la, lb) in a.layers.iter().zip(b.layers.iter()) {
            assert_eq!(la.weight, lb.weight);
            assert_eq!(la.bias, lb.bias);
        }
        // Adult architecture and the smaller variant both build.
        assert_eq!(a.layers.len(), 2);
        assert!(MlpModel::init(0, &[5, 50, 1], 1).is_ok());
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(matches!(MlpModel::init(0, &[5], 0), Err(ModelError::TooFewDims(_))));
        assert!(matches!(MlpModel::init(0, &[5, 3], 0), Err(ModelError::BadOutputDim(3))));
        assert!(matches!(MlpModel::init(0, &[5, 4, 1], 2), Err(ModelError::BadSplit { .. })));
    }

    #[test]
    fn zero_weights_score_half() {
        let mut m = MlpModel::init(0, &[3, 4, 1], 1).unwrap();
        for layer in &mut m.layers {
            layer.weight = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
        }
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]);
        let s = m.forward(&x).unwrap();
        assert_eq!(s.item(), 0.5);
    }

    #[test]
    fn single_linear_layer_matches_formula() {
        let mut m = MlpModel::init(0, &[2, 1], 0).unwrap();
        m.layers[0].weight = Matrix::from_vec(2, 1, vec![1.5, -0.5]);
        m.layers[0].bias = Matrix::scalar(0.25);
        let x = Matrix::from_rows(&[vec![2.0, 4.0]]);
        let s = m.forward(&x).unwrap().item();
        assert!((s - sigmoid(1.5 * 2.0 - 0.5 * 4.0 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn encode_predict_composition_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = MlpModel::init(11, &[6, 20, 10, 1], 2).unwrap();
        let x = random_input(&mut rng, 17, 6);
        let z = m.encode(&x).unwrap();
        assert_eq!(z.cols(), 10);
        let via_split = m.predict_from_latent(&z).unwrap();
        let direct = m.forward(&x).unwrap();
        assert_eq!(via_split, direct);

        // split at 0: encode is the identity
        let m0 = MlpModel::init(11, &[6, 20, 1], 0).unwrap();
        assert_eq!(m0.encode(&x).unwrap(), x);
        assert_eq!(m0.predict_from_latent(&x).unwrap(), m0.forward(&x).unwrap());
    }

    #[test]
    fn forward_deterministic_across_runs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = random_input(&mut rng, 9, 4);
        let a = MlpModel::init(2, &[4, 16, 1], 1).unwrap().forward(&x).unwrap();
        let b = MlpModel::init(2, &[4, 16, 1], 1).unwrap().forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bce_hand_values() {
        assert!((bce_loss(&[0.5, 0.5], &[1, 0]) - std::f64::consts::LN_2).abs() < 1e-12);
        let expected = -((0.9_f64).ln() + (0.8_f64).ln()) / 2.0;
        assert!((bce_loss(&[0.9, 0.2], &[1, 0]) - expected).abs() < 1e-12);
        assert!(bce_loss(&[1.0, 0.0], &[1, 0]) < 1e-6); // clamped, ~0
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        use crate::diff::finite_diff_check;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let model = MlpModel::init(4, &[5, 8, 1], 1).unwrap();
        let x = random_input(&mut rng, 12, 5);
        let labels: Vec<u8> = (0..12).map(|_| rng.gen_range(0..2)).collect();
        let label_mat = Matrix::from_vec(12, 1, labels.iter().map(|&v| v as Real).collect());

        let mut tape = Tape::new();
        let taped = TapedMlp::bind(&mut tape, &model, 0).unwrap();
        let xn = tape.constant(x.clone());
        let ln = tape.constant(label_mat);
        let s = taped.scores(&mut tape, xn).unwrap();
        let loss = tape.bce_mean(s, ln).unwrap();
        let grads = tape.backward(loss).unwrap();

        // flatten params and analytic gradient
        let mut point = Vec::new();
        let mut analytic = Vec::new();
        for p in model.params() {
            point.extend_from_slice(p.as_slice());
        }
        for g in &grads {
            analytic.extend_from_slice(g.as_slice());
        }
        let f = |flat: &[Real]| {
            let mut m = model.clone();
            let mut off = 0;
            for p in m.params_mut() {
                let n = p.len();
                p.as_mut_slice().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
            bce_loss(m.forward(&x).unwrap().as_slice(), &labels)
        };
        let err = finite_diff_check(f, &point, &analytic, 1e-6).unwrap();
        assert!(err < 1e-5, "worst rel err {err}");
    }

    #[test]
    fn jvp_matches_central_difference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let model = MlpModel::init(6, &[5, 16, 1], 1).unwrap();
        let x = random_input(&mut rng, 1, 5);
        let u = random_input(&mut rng, 1, 5);
        let jvp = model.forward_jvp(&x, &u).unwrap()[0];
        let h = 1e-4;
        let up = model.forward(&x.lincomb(1.0, &u, h)).unwrap().item();
        let down = model.forward(&x.lincomb(1.0, &u, -h)).unwrap().item();
        let fd = (up - down) / (2.0 * h);
        assert!((jvp - fd).abs() <= 1e-5 * (1.0 + jvp.abs()), "jvp {jvp} fd {fd}");
    }

    #[test]
    fn jvp_basis_vectors_match_reverse_mode_input_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let model = MlpModel::init(8, &[4, 10, 1], 1).unwrap();
        let x = random_input(&mut rng, 1, 4);

        // reverse mode with the input registered as the only parameter
        let mut tape = Tape::new();
        let xn = tape.param(0, x.clone()).unwrap();
        let frozen = TapedMlp::bind_frozen(&mut tape, &model);
        let s = frozen.scores(&mut tape, xn).unwrap();
        let m = tape.mean_all(s);
        let rev = tape.backward(m).unwrap()[0].clone();

        for i in 0..4 {
            let mut e = Matrix::zeros(1, 4);
            e.set(0, i, 1.0);
            let fwd = model.forward_jvp(&x, &e).unwrap()[0];
            assert!((fwd - rev.get(0, i)).abs() <= 1e-10 * (1.0 + fwd.abs()));
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let model = MlpModel::init(42, &[3, 7, 1], 1).unwrap();
        model.save_checkpoint(&path).unwrap();
        let loaded = MlpModel::load_checkpoint(&path).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = random_input(&mut rng, 5, 3);
        assert_eq!(model.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    }
}
