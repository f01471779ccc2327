//! Sound outer bounds on pre-activations and outputs under ℓ∞ input
//! perturbation: interval bound propagation (IBP) and a backward linear
//! relaxation (CROWN-style).

use crate::linalg::{dot, interval_affine_batch, interval_affine_vec, l1_norm, Matrix};
use crate::model::{ActivationKind, Network, NeuronId};
use serde::{Deserialize, Serialize};

/// Stability status of one neuron under an input box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronStatus {
    /// ReLU with lb ≥ 0: behaves as identity over the whole box.
    Active,
    /// ReLU with ub ≤ 0: constantly zero over the whole box.
    Inactive,
    /// ReLU with lb < 0 < ub (strict): needs relaxation.
    Unstable,
    /// Identity or grafted neuron: exactly linear, never counted unstable.
    Linear,
}

/// Per-layer pre-activation bounds for one input and one ε.
#[derive(Debug, Clone)]
pub struct BoundsCache {
    pub epsilon: f64,
    pub input_lo: Vec<f64>,
    pub input_hi: Vec<f64>,
    /// Pre-activation bounds per layer, including the logits layer.
    pub pre_lo: Vec<Vec<f64>>,
    pub pre_hi: Vec<Vec<f64>>,
}

impl BoundsCache {
    pub fn layer_bounds(&self, layer: usize) -> (&[f64], &[f64]) {
        (&self.pre_lo[layer], &self.pre_hi[layer])
    }

    /// Bounds of the final (logits) layer.
    pub fn output_bounds(&self) -> (&[f64], &[f64]) {
        let last = self.pre_lo.len() - 1;
        self.layer_bounds(last)
    }
}

/// Sign constraint imposed on a neuron's pre-activation by a branch split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSign {
    /// z ≥ 0: bounds tighten to [max(lb,0), ub].
    NonNegative,
    /// z ≤ 0: bounds tighten to [lb, min(ub,0)].
    NonPositive,
}

/// Branch constraints: a set of per-neuron sign splits.
#[derive(Debug, Clone, Default)]
pub struct SplitSet {
    pub splits: Vec<(NeuronId, SplitSign)>,
}

impl SplitSet {
    pub fn with(&self, id: NeuronId, sign: SplitSign) -> Self {
        let mut splits = self.splits.clone();
        splits.push((id, sign));
        SplitSet { splits }
    }

    fn sign_of(&self, layer: usize, index: usize) -> Option<SplitSign> {
        self.splits
            .iter()
            .find(|(id, _)| id.layer == layer && id.index == index)
            .map(|(_, s)| *s)
    }
}

fn activation_interval(act: ActivationKind, lo: f64, hi: f64) -> (f64, f64) {
    match act {
        ActivationKind::Relu => (lo.max(0.0), hi.max(0.0)),
        ActivationKind::GraftedLinear { slope, intercept } => {
            if slope >= 0.0 {
                (slope * lo + intercept, slope * hi + intercept)
            } else {
                (slope * hi + intercept, slope * lo + intercept)
            }
        }
        ActivationKind::Identity => (lo, hi),
    }
}

/// Interval bound propagation over the box [x−ε, x+ε].
pub fn ibp(net: &Network, x: &[f64], epsilon: f64) -> BoundsCache {
    assert!(epsilon >= 0.0, "epsilon must be nonnegative");
    assert_eq!(x.len(), net.input_dim, "ibp input dimension mismatch");
    let input_lo: Vec<f64> = x.iter().map(|v| v - epsilon).collect();
    let input_hi: Vec<f64> = x.iter().map(|v| v + epsilon).collect();
    ibp_box(net, &input_lo, &input_hi, &SplitSet::default())
        .expect("unconstrained ibp cannot be infeasible")
        .with_epsilon(epsilon)
}

impl BoundsCache {
    fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }
}

/// IBP over an explicit box, with optional branch splits clamping
/// pre-activation bounds. Returns `None` when a clamp empties an interval,
/// which proves the constrained region contains no input.
pub fn ibp_box(
    net: &Network,
    input_lo: &[f64],
    input_hi: &[f64],
    splits: &SplitSet,
) -> Option<BoundsCache> {
    let mut lo = input_lo.to_vec();
    let mut hi = input_hi.to_vec();
    let mut pre_lo = Vec::with_capacity(net.layers.len());
    let mut pre_hi = Vec::with_capacity(net.layers.len());
    for (l_idx, layer) in net.layers.iter().enumerate() {
        let (mut z_lo, mut z_hi) = interval_affine_vec(&layer.weights, &layer.bias, &lo, &hi);
        for j in 0..z_lo.len() {
            match splits.sign_of(l_idx, j) {
                Some(SplitSign::NonNegative) => z_lo[j] = z_lo[j].max(0.0),
                Some(SplitSign::NonPositive) => z_hi[j] = z_hi[j].min(0.0),
                None => {}
            }
            if z_lo[j] > z_hi[j] {
                return None;
            }
        }
        let mut h_lo = vec![0.0; z_lo.len()];
        let mut h_hi = vec![0.0; z_hi.len()];
        for j in 0..z_lo.len() {
            let (a, b) = activation_interval(layer.activations[j], z_lo[j], z_hi[j]);
            h_lo[j] = a;
            h_hi[j] = b;
        }
        pre_lo.push(z_lo);
        pre_hi.push(z_hi);
        lo = h_lo;
        hi = h_hi;
    }
    Some(BoundsCache {
        epsilon: 0.0,
        input_lo: input_lo.to_vec(),
        input_hi: input_hi.to_vec(),
        pre_lo,
        pre_hi,
    })
}

/// Batched IBP pre-activation bounds; row i corresponds to sample i and is
/// bit-identical to the single-sample path.
pub fn ibp_batch_pre(net: &Network, x: &Matrix, epsilon: f64) -> Vec<(Matrix, Matrix)> {
    let mut lo = x.map(|v| v - epsilon);
    let mut hi = x.map(|v| v + epsilon);
    let mut out = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let (z_lo, z_hi) = interval_affine_batch(&layer.weights, &layer.bias, &lo, &hi);
        let mut h_lo = z_lo.clone();
        let mut h_hi = z_hi.clone();
        for i in 0..h_lo.rows {
            for j in 0..h_lo.cols {
                let (a, b) =
                    activation_interval(layer.activations[j], z_lo.get(i, j), z_hi.get(i, j));
                h_lo.set(i, j, a);
                h_hi.set(i, j, b);
            }
        }
        out.push((z_lo, z_hi));
        lo = h_lo;
        hi = h_hi;
    }
    out
}

/// Status of one ReLU (or linear) neuron given its pre-activation bounds.
/// Boundary values count as stable: lb = 0 is active, ub = 0 is inactive.
pub fn status_of(act: ActivationKind, lb: f64, ub: f64) -> NeuronStatus {
    match act {
        ActivationKind::Relu => {
            if lb >= 0.0 {
                NeuronStatus::Active
            } else if ub <= 0.0 {
                NeuronStatus::Inactive
            } else {
                NeuronStatus::Unstable
            }
        }
        _ => NeuronStatus::Linear,
    }
}

/// Per-hidden-layer neuron statuses plus the unstable neuron ratio (UNR, %).
pub fn neuron_status(net: &Network, cache: &BoundsCache) -> (Vec<Vec<NeuronStatus>>, f64) {
    let hidden = net.hidden_layer_count();
    let mut statuses = Vec::with_capacity(hidden);
    let mut unstable = 0usize;
    let mut total = 0usize;
    for l in 0..hidden {
        let layer = &net.layers[l];
        let (lb, ub) = cache.layer_bounds(l);
        let row: Vec<NeuronStatus> = (0..layer.out_dim())
            .map(|j| status_of(layer.activations[j], lb[j], ub[j]))
            .collect();
        unstable += row.iter().filter(|s| **s == NeuronStatus::Unstable).count();
        total += row.len();
        statuses.push(row);
    }
    let unr = if total == 0 {
        0.0
    } else {
        100.0 * unstable as f64 / total as f64
    };
    (statuses, unr)
}

/// All unstable hidden neurons under the cache, in (layer, index) order.
pub fn unstable_neurons(net: &Network, cache: &BoundsCache) -> Vec<NeuronId> {
    let (statuses, _) = neuron_status(net, cache);
    let mut out = Vec::new();
    for (layer, row) in statuses.iter().enumerate() {
        for (index, s) in row.iter().enumerate() {
            if *s == NeuronStatus::Unstable {
                out.push(NeuronId { layer, index });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// CROWN-style backward linear relaxation.

/// Choice of lower relaxation line slope for unstable ReLUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LowerSlopeRule {
    /// 0 if |lb| > ub else 1 (the standard heuristic).
    #[default]
    Adaptive,
    Zero,
    One,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CrownConfig {
    pub lower_slope: LowerSlopeRule,
}

/// Linear relaxation of one neuron: lower line `ls·z + li`, upper line
/// `us·z + ui`, valid for z in [lb, ub].
#[derive(Debug, Clone, Copy)]
pub struct ReluRelaxation {
    pub lower_slope: f64,
    pub lower_intercept: f64,
    pub upper_slope: f64,
    pub upper_intercept: f64,
    pub status: NeuronStatus,
}

/// Relaxation lines for a neuron from its pre-activation bounds.
pub fn relaxation(
    act: ActivationKind,
    lb: f64,
    ub: f64,
    rule: LowerSlopeRule,
) -> ReluRelaxation {
    let status = status_of(act, lb, ub);
    match act {
        ActivationKind::Identity => ReluRelaxation {
            lower_slope: 1.0,
            lower_intercept: 0.0,
            upper_slope: 1.0,
            upper_intercept: 0.0,
            status,
        },
        ActivationKind::GraftedLinear { slope, intercept } => ReluRelaxation {
            lower_slope: slope,
            lower_intercept: intercept,
            upper_slope: slope,
            upper_intercept: intercept,
            status,
        },
        ActivationKind::Relu => match status {
            NeuronStatus::Active => ReluRelaxation {
                lower_slope: 1.0,
                lower_intercept: 0.0,
                upper_slope: 1.0,
                upper_intercept: 0.0,
                status,
            },
            NeuronStatus::Inactive => ReluRelaxation {
                lower_slope: 0.0,
                lower_intercept: 0.0,
                upper_slope: 0.0,
                upper_intercept: 0.0,
                status,
            },
            NeuronStatus::Unstable => {
                let s = ub / (ub - lb);
                let alpha = match rule {
                    LowerSlopeRule::Adaptive => {
                        if lb.abs() > ub {
                            0.0
                        } else {
                            1.0
                        }
                    }
                    LowerSlopeRule::Zero => 0.0,
                    LowerSlopeRule::One => 1.0,
                };
                ReluRelaxation {
                    lower_slope: alpha,
                    lower_intercept: 0.0,
                    upper_slope: s,
                    upper_intercept: -s * lb,
                    status,
                }
            }
            NeuronStatus::Linear => unreachable!("relu cannot be linear-status"),
        },
    }
}

/// Sound linear bounds A_L·x + b_L ≤ expr(x) ≤ A_U·x + b_U over the input.
#[derive(Debug, Clone)]
pub struct LinearBounds {
    pub a_lower: Matrix,
    pub b_lower: Vec<f64>,
    pub a_upper: Matrix,
    pub b_upper: Vec<f64>,
}

/// CROWN backward substitution for the logits.
pub fn crown_backward(net: &Network, cache: &BoundsCache, cfg: CrownConfig) -> LinearBounds {
    let d_out = net.output_dim();
    let identity = Matrix::from_fn(d_out, d_out, |i, j| if i == j { 1.0 } else { 0.0 });
    let bias = vec![0.0; d_out];
    crown_expression(net, cache, &identity, &bias, net.layers.len() - 1, cfg).bounds
}

/// Result of a backward pass. `pre_coeff_abs[l][j]` is the largest |A| seen
/// on neuron j of hidden layer l while lower-bounding the expression, which
/// branch-and-bound uses to rank split candidates.
pub struct CrownPass {
    pub bounds: LinearBounds,
    pub pre_coeff_abs: Vec<Vec<f64>>,
}

/// CROWN backward substitution for the expression `C·z_t + c0`, where `z_t`
/// is the pre-activation of layer `t` (the logits when t = L−1).
///
/// Positive coefficients of the expression take the lower relaxation line
/// while lower-bounding and the upper line while upper-bounding; negative
/// coefficients the reverse.
pub fn crown_expression(
    net: &Network,
    cache: &BoundsCache,
    c: &Matrix,
    c0: &[f64],
    t: usize,
    cfg: CrownConfig,
) -> CrownPass {
    assert!(t < net.layers.len());
    assert_eq!(c.cols, net.layers[t].out_dim(), "expression width mismatch");
    let rows = c.rows;
    let mut a_low = c.clone();
    let mut b_low = c0.to_vec();
    let mut a_up = c.clone();
    let mut b_up = c0.to_vec();
    let mut pre_coeff_abs: Vec<Vec<f64>> = (0..net.hidden_layer_count())
        .map(|l| vec![0.0; net.layers[l].out_dim()])
        .collect();

    let mut k = t;
    loop {
        if k < net.hidden_layer_count() {
            for (j, m) in pre_coeff_abs[k].iter_mut().enumerate() {
                for i in 0..rows {
                    *m = m.max(a_low.get(i, j).abs());
                }
            }
        }
        // Substitute z_k = W_k · h_{k-1} + b_k.
        let layer = &net.layers[k];
        for i in 0..rows {
            b_low[i] += dot(a_low.row(i), &layer.bias);
            b_up[i] += dot(a_up.row(i), &layer.bias);
        }
        a_low = mat_mul(&a_low, &layer.weights);
        a_up = mat_mul(&a_up, &layer.weights);
        if k == 0 {
            break;
        }
        k -= 1;
        // Substitute h_k = σ(z_k) through the relaxation lines.
        let act_layer = &net.layers[k];
        let (lb, ub) = cache.layer_bounds(k);
        let relax: Vec<ReluRelaxation> = (0..act_layer.out_dim())
            .map(|j| relaxation(act_layer.activations[j], lb[j], ub[j], cfg.lower_slope))
            .collect();
        for i in 0..rows {
            let row_l = a_low.row_mut(i);
            for (j, r) in relax.iter().enumerate() {
                let coef = row_l[j];
                let (slope, intercept) = if coef >= 0.0 {
                    (r.lower_slope, r.lower_intercept)
                } else {
                    (r.upper_slope, r.upper_intercept)
                };
                b_low[i] += coef * intercept;
                row_l[j] = coef * slope;
            }
            let row_u = a_up.row_mut(i);
            for (j, r) in relax.iter().enumerate() {
                let coef = row_u[j];
                let (slope, intercept) = if coef >= 0.0 {
                    (r.upper_slope, r.upper_intercept)
                } else {
                    (r.lower_slope, r.lower_intercept)
                };
                b_up[i] += coef * intercept;
                row_u[j] = coef * slope;
            }
        }
    }

    CrownPass {
        bounds: LinearBounds {
            a_lower: a_low,
            b_lower: b_low,
            a_upper: a_up,
            b_upper: b_up,
        },
        pre_coeff_abs,
    }
}

fn mat_mul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows);
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let ar = a.row(i);
        let or = out.row_mut(i);
        for (k, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = b.row(k);
            for j in 0..b.cols {
                or[j] += av * br[j];
            }
        }
    }
    out
}

/// Concretize linear bounds over the box [x−ε, x+ε]:
/// lowerᵢ = A_L,i·x + b_L,i − ε‖A_L,i‖₁ and symmetrically for the upper side.
pub fn concretize(linb: &LinearBounds, x: &[f64], epsilon: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(linb.a_lower.cols, x.len(), "concretize dimension mismatch");
    let rows = linb.a_lower.rows;
    let mut lo = Vec::with_capacity(rows);
    let mut hi = Vec::with_capacity(rows);
    for i in 0..rows {
        let al = linb.a_lower.row(i);
        let au = linb.a_upper.row(i);
        lo.push(dot(al, x) + linb.b_lower[i] - epsilon * l1_norm(al));
        hi.push(dot(au, x) + linb.b_upper[i] + epsilon * l1_norm(au));
    }
    (lo, hi)
}

/// Hidden-layer pre-activation bounds refined by a CROWN pass per layer
/// (intersected with IBP); optional tightening used behind a flag.
pub fn crown_refined_cache(net: &Network, x: &[f64], epsilon: f64, cfg: CrownConfig) -> BoundsCache {
    let mut cache = ibp(net, x, epsilon);
    for t in 0..net.layers.len() {
        let d = net.layers[t].out_dim();
        let identity = Matrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 });
        let pass = crown_expression(net, &cache, &identity, &vec![0.0; d], t, cfg);
        let (lo, hi) = concretize(&pass.bounds, x, epsilon);
        for j in 0..d {
            if lo[j] > cache.pre_lo[t][j] {
                cache.pre_lo[t][j] = lo[j];
            }
            if hi[j] < cache.pre_hi[t][j] {
                cache.pre_hi[t][j] = hi[j];
            }
        }
    }
    cache
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{relu_mlp, Layer};
    use rand::Rng;

    fn simple_net() -> Network {
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
    fn ibp_hand_interval() {
        let cache = ibp(&simple_net(), &[0.0, 0.0], 1.0);
        assert_eq!(cache.pre_lo[0], vec![-2.0]);
        assert_eq!(cache.pre_hi[0], vec![2.0]);
    }

    #[test]
    fn ibp_zero_epsilon_equals_forward_trace() {
        let net = relu_mlp(
            2,
            vec![
                (Matrix::from_fn(3, 2, |i, j| 0.4 * (i as f64) - 0.7 * (j as f64) + 0.1), vec![0.2; 3]),
                (Matrix::from_fn(2, 3, |i, j| ((i + 2 * j) as f64).sin()), vec![-0.1, 0.3]),
            ],
        );
        let x = [0.3, -0.8];
        let cache = ibp(&net, &x, 0.0);
        let trace = net.forward_trace(&x).unwrap();
        for l in 0..net.layers.len() {
            for j in 0..net.layers[l].out_dim() {
                assert_eq!(cache.pre_lo[l][j].to_bits(), trace.pre[l][j].to_bits());
                assert_eq!(cache.pre_hi[l][j].to_bits(), trace.pre[l][j].to_bits());
            }
        }
    }

    #[test]
    fn grafting_unstable_neuron_shrinks_width_here() {
        // Hand net where the unstable neuron has s = ub/(ub−lb) ≥ 0.4, so the
        // grafted post-activation width 0.4·(ub−lb) undercuts the clipped
        // width and downstream IBP widths cannot grow.
        let w1 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let w2 = Matrix::from_rows(&[vec![1.0, 1.0]]);
        let mut net = relu_mlp(2, vec![(w1, vec![1.0, 0.0]), (w2, vec![0.0])]);
        let x = [0.0, 0.0];
        let eps = 2.0;
        let cache = ibp(&net, &x, eps);
        // Neuron 0 bounds [−1, 3]: unstable, clipped post width 3.
        assert_eq!(cache.pre_lo[0][0], -1.0);
        assert_eq!(cache.pre_hi[0][0], 3.0);
        let width_before = cache.pre_hi[1][0] - cache.pre_lo[1][0];

        net.layers[0].activations[0] = ActivationKind::GraftedLinear {
            slope: 0.4,
            intercept: 0.0,
        };
        let cache2 = ibp(&net, &x, eps);
        let grafted_width: f64 = 0.4 * (3.0 - (-1.0));
        assert!((grafted_width - 1.6).abs() < 1e-12);
        assert!(grafted_width < 3.0);
        let width_after = cache2.pre_hi[1][0] - cache2.pre_lo[1][0];
        assert!(width_after <= width_before + 1e-12);
    }

    #[test]
    fn crown_on_linear_net_is_exact() {
        let w1 = Matrix::from_rows(&[vec![0.5, -1.5], vec![2.0, 0.25]]);
        let w2 = Matrix::from_rows(&[vec![1.0, -1.0]]);
        let b1 = vec![0.3, -0.6];
        let b2 = vec![0.1];
        let layers = vec![
            Layer {
                weights: w1.clone(),
                bias: b1.clone(),
                activations: vec![ActivationKind::Identity; 2],
            },
            Layer {
                weights: w2.clone(),
                bias: b2.clone(),
                activations: vec![ActivationKind::Identity],
            },
        ];
        let net = Network::new(2, layers).unwrap();
        let x = [0.2, 0.7];
        let eps = 0.5;
        let cache = ibp(&net, &x, eps);
        let linb = crown_backward(&net, &cache, CrownConfig::default());
        // A = W2·W1 exactly, b = W2·b1 + b2.
        let a_exact = [
            w2.get(0, 0) * w1.get(0, 0) + w2.get(0, 1) * w1.get(1, 0),
            w2.get(0, 0) * w1.get(0, 1) + w2.get(0, 1) * w1.get(1, 1),
        ];
        let b_exact = w2.get(0, 0) * b1[0] + w2.get(0, 1) * b1[1] + b2[0];
        for j in 0..2 {
            assert!((linb.a_lower.get(0, j) - a_exact[j]).abs() < 1e-12);
            assert!((linb.a_upper.get(0, j) - a_exact[j]).abs() < 1e-12);
        }
        assert!((linb.b_lower[0] - b_exact).abs() < 1e-12);
        assert!((linb.b_upper[0] - b_exact).abs() < 1e-12);
        // Concretized interval equals the exact range of the affine map.
        let (lo, hi) = concretize(&linb, &x, eps);
        let center = a_exact[0] * x[0] + a_exact[1] * x[1] + b_exact;
        let radius = eps * (a_exact[0].abs() + a_exact[1].abs());
        assert!((lo[0] - (center - radius)).abs() < 1e-12);
        assert!((hi[0] - (center + radius)).abs() < 1e-12);
    }

    #[test]
    fn crown_with_stably_active_relus_matches_linear_case() {
        let w1 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b1 = vec![10.0, 10.0];
        let w2 = Matrix::from_rows(&[vec![1.0, -2.0]]);
        let b2 = vec![0.0];
        let relu = relu_mlp(2, vec![(w1.clone(), b1.clone()), (w2.clone(), b2.clone())]);
        let linear = Network::new(
            2,
            vec![
                Layer {
                    weights: w1,
                    bias: b1,
                    activations: vec![ActivationKind::Identity; 2],
                },
                Layer {
                    weights: w2,
                    bias: b2,
                    activations: vec![ActivationKind::Identity],
                },
            ],
        )
        .unwrap();
        let x = [0.0, 0.0];
        let eps = 1.0;
        let lb_relu = crown_backward(&relu, &ibp(&relu, &x, eps), CrownConfig::default());
        let lb_lin = crown_backward(&linear, &ibp(&linear, &x, eps), CrownConfig::default());
        let (lo_a, hi_a) = concretize(&lb_relu, &x, eps);
        let (lo_b, hi_b) = concretize(&lb_lin, &x, eps);
        assert_eq!(lo_a, lo_b);
        assert_eq!(hi_a, hi_b);
    }

    #[test]
    fn concretize_unit_row() {
        let linb = LinearBounds {
            a_lower: Matrix::from_rows(&[vec![1.0, 0.0]]),
            b_lower: vec![0.0],
            a_upper: Matrix::from_rows(&[vec![1.0, 0.0]]),
            b_upper: vec![0.0],
        };
        let (lo, hi) = concretize(&linb, &[0.0, 0.0], 1.0);
        assert_eq!(lo, vec![-1.0]);
        assert_eq!(hi, vec![1.0]);
    }

    #[test]
    fn concretize_zero_epsilon_and_zero_row() {
        let linb = LinearBounds {
            a_lower: Matrix::from_rows(&[vec![2.0, -1.0], vec![0.0, 0.0]]),
            b_lower: vec![0.5, -3.0],
            a_upper: Matrix::from_rows(&[vec![2.0, -1.0], vec![0.0, 0.0]]),
            b_upper: vec![0.5, 4.0],
        };
        let (lo, hi) = concretize(&linb, &[1.0, 1.0], 0.0);
        assert_eq!(lo[0], 1.5);
        assert_eq!(hi[0], 1.5);
        // Zero row: constant [b_L, b_U] regardless of ε.
        let (lo2, hi2) = concretize(&linb, &[9.0, -9.0], 3.0);
        assert_eq!(lo2[1], -3.0);
        assert_eq!(hi2[1], 4.0);
    }

    #[test]
    fn status_boundary_conventions() {
        assert_eq!(status_of(ActivationKind::Relu, -1.0, 2.0), NeuronStatus::Unstable);
        assert_eq!(status_of(ActivationKind::Relu, 0.0, 2.0), NeuronStatus::Active);
        assert_eq!(status_of(ActivationKind::Relu, -2.0, 0.0), NeuronStatus::Inactive);
        assert_eq!(
            status_of(ActivationKind::GraftedLinear { slope: 0.4, intercept: 0.0 }, -1.0, 1.0),
            NeuronStatus::Linear
        );
    }

    #[test]
    fn all_grafted_has_zero_unr() {
        let mut net = relu_mlp(
            2,
            vec![
                (Matrix::from_fn(4, 2, |i, j| (i as f64 + 1.0) * if j == 0 { 0.5 } else { -0.25 }), vec![0.0; 4]),
                (Matrix::from_fn(2, 4, |i, j| (1 + i + j) as f64 * 0.1), vec![0.0; 2]),
            ],
        );
        for a in &mut net.layers[0].activations {
            *a = ActivationKind::GraftedLinear { slope: 0.4, intercept: 0.0 };
        }
        let cache = ibp(&net, &[0.1, 0.2], 0.5);
        let (_, unr) = neuron_status(&net, &cache);
        assert_eq!(unr, 0.0);
    }

    #[test]
    fn ibp_soundness_random_sampling() {
        let mut rng = crate::rng::stream_rng(11, "bounds-test", 0);
        for trial in 0..5 {
            let net = random_small_net(&mut rng, trial);
            let x: Vec<f64> = (0..net.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eps = 0.2;
            let cache = ibp(&net, &x, eps);
            let linb = crown_backward(&net, &cache, CrownConfig::default());
            let (clo, chi) = concretize(&linb, &x, eps);
            for _ in 0..200 {
                let xs: Vec<f64> = x
                    .iter()
                    .map(|&v| v + rng.gen_range(-eps..=eps))
                    .collect();
                let trace = net.forward_trace(&xs).unwrap();
                for l in 0..net.layers.len() {
                    for j in 0..net.layers[l].out_dim() {
                        assert!(
                            trace.pre[l][j] >= cache.pre_lo[l][j] - 1e-9
                                && trace.pre[l][j] <= cache.pre_hi[l][j] + 1e-9,
                            "IBP escape at layer {l} neuron {j}"
                        );
                    }
                }
                let out = trace.post.last().unwrap();
                for (j, &v) in out.iter().enumerate() {
                    assert!(v >= clo[j] - 1e-9 && v <= chi[j] + 1e-9, "CROWN escape at logit {j}");
                }
            }
        }
    }

    #[test]
    fn ibp_monotone_in_epsilon() {
        let mut rng = crate::rng::stream_rng(13, "bounds-test", 1);
        let net = random_small_net(&mut rng, 0);
        let x: Vec<f64> = (0..net.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let small = ibp(&net, &x, 0.05);
        let big = ibp(&net, &x, 0.2);
        for l in 0..net.layers.len() {
            for j in 0..net.layers[l].out_dim() {
                assert!(small.pre_lo[l][j] >= big.pre_lo[l][j] - 1e-12);
                assert!(small.pre_hi[l][j] <= big.pre_hi[l][j] + 1e-12);
            }
        }
    }

    pub(crate) fn random_small_net(rng: &mut impl Rng, salt: usize) -> Network {
        let dims = [2 + salt % 2, 5, 4, 2 + salt % 3];
        let mut params = Vec::new();
        for w in dims.windows(2) {
            let (din, dout) = (w[0], w[1]);
            let weights = Matrix::from_fn(dout, din, |_, _| rng.gen_range(-1.0..1.0));
            let bias = (0..dout).map(|_| rng.gen_range(-0.5..0.5)).collect();
            params.push((weights, bias));
        }
        relu_mlp(dims[0], params)
    }
}
