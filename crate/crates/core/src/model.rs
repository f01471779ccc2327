//! Network representation, exact forward evaluation, and serialization.
//!
//! A [`Network`] is a sequence of dense affine layers, each followed by a
//! per-neuron activation: ReLU, a grafted linear function `γ·z + c`, or
//! identity. The final layer is always all-identity (logits).

use crate::linalg::{affine_batch, Matrix};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Sanity cap for grafted slopes; see [`Network::validate_with_slope_cap`].
pub const DEFAULT_SLOPE_CAP: f64 = 10.0;

/// Per-neuron activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    Relu,
    /// Learnable linear replacement `slope·z + intercept`, applied on both
    /// sides of zero.
    GraftedLinear { slope: f64, intercept: f64 },
    Identity,
}

impl ActivationKind {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            ActivationKind::Relu => z.max(0.0),
            ActivationKind::GraftedLinear { slope, intercept } => slope * z + intercept,
            ActivationKind::Identity => z,
        }
    }

    /// Local slope at pre-activation `z` under the crate's subgradient policy
    /// (ReLU takes slope 0 at the kink).
    #[inline]
    pub fn local_slope(&self, z: f64) -> f64 {
        match *self {
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::GraftedLinear { slope, .. } => slope,
            ActivationKind::Identity => 1.0,
        }
    }

    pub fn is_grafted(&self) -> bool {
        matches!(self, ActivationKind::GraftedLinear { .. })
    }
}

/// Identifies one hidden neuron: layer ℓ ∈ [0, L−2], index within the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

/// One dense layer: `z = W·h + b`, then the per-neuron activation.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activations: Vec<ActivationKind>,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weights.rows
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols
    }
}

/// Feedforward network of dense layers. Immutable once built; forward
/// evaluation is pure and safe for data-parallel use across samples.
#[derive(Debug, Clone)]
pub struct Network {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self, ModelError> {
        let net = Self { input_dim, layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.validate_with_slope_cap(DEFAULT_SLOPE_CAP)
    }

    pub fn validate_with_slope_cap(&self, cap: f64) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::Validation("input_dim must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(ModelError::Validation("network has no layers".into()));
        }
        let mut prev = self.input_dim;
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.weights.cols != prev {
                return Err(ModelError::Validation(format!(
                    "layer {idx}: weights have {} columns, expected {prev}",
                    layer.weights.cols
                )));
            }
            if layer.bias.len() != layer.weights.rows {
                return Err(ModelError::Validation(format!(
                    "layer {idx}: bias length {} != {} rows",
                    layer.bias.len(),
                    layer.weights.rows
                )));
            }
            if layer.activations.len() != layer.weights.rows {
                return Err(ModelError::Validation(format!(
                    "layer {idx}: {} activations for {} neurons",
                    layer.activations.len(),
                    layer.weights.rows
                )));
            }
            for (j, act) in layer.activations.iter().enumerate() {
                if let ActivationKind::GraftedLinear { slope, intercept } = act {
                    if !slope.is_finite() || !intercept.is_finite() || slope.abs() > cap {
                        return Err(ModelError::Validation(format!(
                            "layer {idx} neuron {j}: grafted slope {slope} out of range (cap {cap})"
                        )));
                    }
                }
            }
            for (k, v) in layer.weights.data.iter().enumerate() {
                if !v.is_finite() {
                    return Err(ModelError::Validation(format!(
                        "layer {idx}: non-finite weight at flat index {k}"
                    )));
                }
            }
            if layer.bias.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Validation(format!("layer {idx}: non-finite bias")));
            }
            prev = layer.weights.rows;
        }
        let last = self.layers.last().expect("nonempty");
        if !last
            .activations
            .iter()
            .all(|a| matches!(a, ActivationKind::Identity))
        {
            return Err(ModelError::Validation(
                "final layer activations must all be identity".into(),
            ));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim())
    }

    /// Number of layers that carry (potentially) nonlinear activations.
    pub fn hidden_layer_count(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.out_dim())
            .collect()
    }

    pub fn total_hidden_neurons(&self) -> usize {
        self.hidden_dims().iter().sum()
    }

    pub fn activation(&self, id: NeuronId) -> ActivationKind {
        self.layers[id.layer].activations[id.index]
    }

    /// Exact forward pass. Grafted neurons compute `slope·z + intercept`
    /// regardless of the sign of `z`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.input_dim {
            return Err(ModelError::Shape(format!(
                "input has {} entries, expected {}",
                x.len(),
                self.input_dim
            )));
        }
        let trace = self.forward_trace(x)?;
        Ok(trace.post.last().expect("nonempty").clone())
    }

    /// Forward pass exposing every pre-activation `z` and post-activation `h`.
    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace, ModelError> {
        if x.len() != self.input_dim {
            return Err(ModelError::Shape(format!(
                "input has {} entries, expected {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let z: Vec<f64> = layer
                .weights
                .matvec(&h)
                .iter()
                .zip(&layer.bias)
                .map(|(v, b)| v + b)
                .collect();
            h = z
                .iter()
                .zip(&layer.activations)
                .map(|(&zi, a)| a.apply(zi))
                .collect();
            pre.push(z);
            post.push(h.clone());
        }
        Ok(ForwardTrace { pre, post })
    }

    /// Batched forward pass; rows of `x` are samples. Bit-identical to
    /// looping [`Network::forward`] over the rows.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        if x.cols != self.input_dim {
            return Err(ModelError::Shape(format!(
                "batch has {} columns, expected {}",
                x.cols, self.input_dim
            )));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = affine_batch(&layer.weights, &layer.bias, &h);
            for i in 0..z.rows {
                let row = z.row_mut(i);
                for (v, a) in row.iter_mut().zip(&layer.activations) {
                    *v = a.apply(*v);
                }
            }
            h = z;
        }
        Ok(h)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize, ModelError> {
        Ok(argmax(&self.forward(x)?))
    }
}

/// First index attaining the maximum (deterministic tie-break).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// All intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Pre-activation `z` per layer.
    pub pre: Vec<Vec<f64>>,
    /// Post-activation `h` per layer; the last entry is the network output.
    pub post: Vec<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Serialization. Reals go through decimal strings (shortest round-trip form),
// so save → load is bit-exact.

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    format: u32,
    input_dim: usize,
    layers: Vec<LayerFile>,
    /// Optional graft section carried by fine-tune checkpoints; the model
    /// loader ignores its content.
    #[serde(skip_serializing_if = "Option::is_none")]
    graft: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    /// Row-major rows of decimal strings.
    weights: Vec<Vec<String>>,
    bias: Vec<String>,
    activations: Vec<ActFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ActFile {
    Relu,
    Graft { slope: String, intercept: String },
    Identity,
}

pub(crate) fn f64_to_string(v: f64) -> String {
    // Display of f64 yields the shortest decimal that parses back exactly.
    format!("{v}")
}

pub(crate) fn f64_from_string(s: &str, what: &str) -> Result<f64, ModelError> {
    let v: f64 = s
        .parse()
        .map_err(|_| ModelError::Parse(format!("{what}: invalid real `{s}`")))?;
    if !v.is_finite() {
        return Err(ModelError::Parse(format!("{what}: non-finite real `{s}`")));
    }
    Ok(v)
}

impl Network {
    pub fn to_json(&self) -> String {
        self.to_json_with_graft(None)
    }

    pub fn to_json_with_graft(&self, graft: Option<serde_json::Value>) -> String {
        let file = NetworkFile {
            format: 1,
            input_dim: self.input_dim,
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    weights: (0..l.weights.rows)
                        .map(|i| l.weights.row(i).iter().map(|&v| f64_to_string(v)).collect())
                        .collect(),
                    bias: l.bias.iter().map(|&v| f64_to_string(v)).collect(),
                    activations: l
                        .activations
                        .iter()
                        .map(|a| match *a {
                            ActivationKind::Relu => ActFile::Relu,
                            ActivationKind::GraftedLinear { slope, intercept } => ActFile::Graft {
                                slope: f64_to_string(slope),
                                intercept: f64_to_string(intercept),
                            },
                            ActivationKind::Identity => ActFile::Identity,
                        })
                        .collect(),
                })
                .collect(),
            graft,
        };
        serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let file: NetworkFile =
            serde_json::from_str(s).map_err(|e| ModelError::Parse(e.to_string()))?;
        if file.format != 1 {
            return Err(ModelError::Parse(format!(
                "format: unsupported version {}",
                file.format
            )));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (idx, lf) in file.layers.iter().enumerate() {
            let rows = lf.weights.len();
            let cols = lf.weights.first().map_or(0, |r| r.len());
            let mut data = Vec::with_capacity(rows * cols);
            for (i, row) in lf.weights.iter().enumerate() {
                if row.len() != cols {
                    return Err(ModelError::Validation(format!(
                        "layer {idx} weights: row {i} has {} entries, expected {cols}",
                        row.len()
                    )));
                }
                for s in row {
                    data.push(f64_from_string(s, &format!("layer {idx} weights"))?);
                }
            }
            let bias = lf
                .bias
                .iter()
                .map(|s| f64_from_string(s, &format!("layer {idx} bias")))
                .collect::<Result<Vec<_>, _>>()?;
            let activations = lf
                .activations
                .iter()
                .map(|a| match a {
                    ActFile::Relu => Ok(ActivationKind::Relu),
                    ActFile::Graft { slope, intercept } => Ok(ActivationKind::GraftedLinear {
                        slope: f64_from_string(slope, &format!("layer {idx} graft slope"))?,
                        intercept: f64_from_string(
                            intercept,
                            &format!("layer {idx} graft intercept"),
                        )?,
                    }),
                    ActFile::Identity => Ok(ActivationKind::Identity),
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            layers.push(Layer {
                weights: Matrix::from_vec(rows, cols, data),
                bias,
                activations,
            });
        }
        Network::new(file.input_dim, layers)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json(&s)
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = std::iter::once(self.input_dim)
            .chain(self.layers.iter().map(|l| l.out_dim()))
            .map(|d| d.to_string())
            .collect();
        write!(f, "{}", dims.join("-"))
    }
}

/// Convenience constructor for tests and synthetic experiments: ReLU on all
/// hidden layers, identity logits.
pub fn relu_mlp(input_dim: usize, layer_params: Vec<(Matrix, Vec<f64>)>) -> Network {
    let n = layer_params.len();
    let layers = layer_params
        .into_iter()
        .enumerate()
        .map(|(i, (weights, bias))| {
            let act = if i + 1 == n {
                ActivationKind::Identity
            } else {
                ActivationKind::Relu
            };
            let d = weights.rows;
            Layer {
                weights,
                bias,
                activations: vec![act; d],
            }
        })
        .collect();
    Network::new(input_dim, layers).expect("relu_mlp shapes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer_identity() -> Network {
        Network::new(
            2,
            vec![Layer {
                weights: Matrix::from_rows(&[vec![1.0, -1.0]]),
                bias: vec![0.0],
                activations: vec![ActivationKind::Identity],
            }],
        )
        .unwrap()
    }

    #[test]
    fn forward_hand_matrix_arithmetic() {
        let net = one_layer_identity();
        assert_eq!(net.forward(&[3.0, 1.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn zero_input_zero_bias_relu_gives_zero() {
        let net = relu_mlp(
            3,
            vec![
                (Matrix::from_fn(4, 3, |i, j| (i + j) as f64 - 2.0), vec![0.0; 4]),
                (Matrix::from_fn(2, 4, |i, j| (i * j) as f64 - 1.0), vec![0.0; 2]),
            ],
        );
        assert_eq!(net.forward(&[0.0; 3]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn grafted_neuron_keeps_negative_side() {
        // slope 0.4, intercept 0, pre-activation −1 → post-activation −0.4.
        let mut net = relu_mlp(
            1,
            vec![
                (Matrix::from_rows(&[vec![1.0]]), vec![0.0]),
                (Matrix::from_rows(&[vec![1.0]]), vec![0.0]),
            ],
        );
        net.layers[0].activations[0] = ActivationKind::GraftedLinear {
            slope: 0.4,
            intercept: 0.0,
        };
        let trace = net.forward_trace(&[-1.0]).unwrap();
        assert_eq!(trace.pre[0], vec![-1.0]);
        assert_eq!(trace.post[0], vec![-0.4]);
    }

    #[test]
    fn trace_composes_like_two_forwards() {
        let w1 = Matrix::from_rows(&[vec![0.5, -0.3], vec![1.0, 0.2]]);
        let w2 = Matrix::from_rows(&[vec![-0.7, 0.4]]);
        let net = relu_mlp(2, vec![(w1.clone(), vec![0.1, -0.2]), (w2.clone(), vec![0.3])]);
        let first = relu_mlp(2, vec![(w1, vec![0.1, -0.2])]);
        // The single-layer net applies identity where the full net applies
        // ReLU, so compose manually.
        let x = [0.8, -0.4];
        let trace = net.forward_trace(&x).unwrap();
        let h1: Vec<f64> = first.forward(&x).unwrap().iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(trace.post[0], h1);
        let out = w2.matvec(&h1)[0] + 0.3;
        assert_eq!(trace.post[1], vec![out]);
        assert_eq!(trace.post.last().unwrap(), &net.forward(&x).unwrap());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut net = relu_mlp(
            3,
            vec![
                (
                    Matrix::from_fn(4, 3, |i, j| ((i * 7 + j) as f64).sin() * 0.37),
                    vec![0.1, -0.25, 1.0 / 3.0, 2e-13],
                ),
                (Matrix::from_fn(2, 4, |i, j| ((i + j * 3) as f64).cos()), vec![0.0, -0.0]),
            ],
        );
        net.layers[0].activations[2] = ActivationKind::GraftedLinear {
            slope: 0.4,
            intercept: 1.0 / 7.0,
        };
        let loaded = Network::from_json(&net.to_json()).unwrap();
        for (a, b) in net.layers.iter().zip(&loaded.layers) {
            for (x, y) in a.weights.data.iter().zip(&b.weights.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.bias.iter().zip(&b.bias) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.activations, b.activations);
        }
    }

    #[test]
    fn mismatched_shape_is_validation_error() {
        let json = r#"{
            "format": 1,
            "input_dim": 2,
            "layers": [{
                "weights": [["1", "0"], ["0"]],
                "bias": ["0", "0"],
                "activations": ["identity", "identity"]
            }]
        }"#;
        let err = Network::from_json(json).unwrap_err();
        assert!(matches!(err, ModelError::Validation(_)), "{err}");
    }

    #[test]
    fn unknown_activation_tag_is_parse_error() {
        let json = r#"{
            "format": 1,
            "input_dim": 1,
            "layers": [{
                "weights": [["1"]],
                "bias": ["0"],
                "activations": ["softplus"]
            }]
        }"#;
        let err = Network::from_json(json).unwrap_err();
        assert!(matches!(err, ModelError::Parse(_)), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let net = one_layer_identity();
        assert!(matches!(net.forward(&[1.0]), Err(ModelError::Shape(_))));
    }

    #[test]
    fn forward_batch_matches_per_sample() {
        let net = relu_mlp(
            2,
            vec![
                (Matrix::from_fn(3, 2, |i, j| (i as f64 - j as f64) * 0.6), vec![0.05; 3]),
                (Matrix::from_fn(2, 3, |i, j| ((i + j) as f64) * 0.3 - 0.4), vec![0.0; 2]),
            ],
        );
        let rows = vec![vec![0.2, 0.9], vec![-0.5, 0.1], vec![1.5, -2.0]];
        let batch = net.forward_batch(&Matrix::from_rows(&rows)).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let single = net.forward(row).unwrap();
            for (a, b) in batch.row(i).iter().zip(&single) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
