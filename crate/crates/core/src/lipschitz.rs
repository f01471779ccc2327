//! Upper bounds on the ℓ∞ local Lipschitz constant via an interval width
//! recurrence, and lower bounds via a sampling oracle.
//!
//! The recurrence propagates per-neuron interval widths layer by layer
//! (affine layers combine widths through |W|, activations rescale them) and
//! divides the final widths by 2ε. The default width rule keeps a ReLU's
//! pre-activation width when the neuron is unstable; the clipped
//! post-activation rule is available behind [`WidthMode::PostActivation`] but
//! is not a sound Lipschitz bound in general and is reported, never asserted.

use crate::linalg::{interval_affine_vec, linf_dist, Matrix};
use crate::model::{ActivationKind, Network};
use crate::rng::stream_rng;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WidthMode {
    /// Unstable ReLUs pass their pre-activation interval through unchanged.
    #[default]
    PreActivation,
    /// Unstable ReLUs clip to [0, ub] like plain interval propagation.
    PostActivation,
}

#[derive(Debug, Error)]
pub enum LipschitzError {
    #[error("epsilon must be positive (the bound divides by 2ε)")]
    ZeroEpsilon,
}

/// Per-output interval Lipschitz upper bounds and their maximum.
#[derive(Debug, Clone)]
pub struct IntervalLipschitz {
    pub per_output: Vec<f64>,
    pub max: f64,
}

/// Interval-recurrence upper bound on the ℓ∞ local Lipschitz constant.
pub fn interval_lipschitz(
    net: &Network,
    x: &[f64],
    epsilon: f64,
) -> Result<IntervalLipschitz, LipschitzError> {
    interval_lipschitz_with(net, x, epsilon, WidthMode::PreActivation)
}

pub fn interval_lipschitz_with(
    net: &Network,
    x: &[f64],
    epsilon: f64,
    mode: WidthMode,
) -> Result<IntervalLipschitz, LipschitzError> {
    if epsilon <= 0.0 {
        return Err(LipschitzError::ZeroEpsilon);
    }
    let mut lo: Vec<f64> = x.iter().map(|v| v - epsilon).collect();
    let mut hi: Vec<f64> = x.iter().map(|v| v + epsilon).collect();
    for layer in &net.layers {
        let (z_lo, z_hi) = interval_affine_vec(&layer.weights, &layer.bias, &lo, &hi);
        let mut h_lo = vec![0.0; z_lo.len()];
        let mut h_hi = vec![0.0; z_hi.len()];
        for j in 0..z_lo.len() {
            let (a, b) = match layer.activations[j] {
                ActivationKind::Identity => (z_lo[j], z_hi[j]),
                ActivationKind::GraftedLinear { slope, intercept } => {
                    if slope >= 0.0 {
                        (slope * z_lo[j] + intercept, slope * z_hi[j] + intercept)
                    } else {
                        (slope * z_hi[j] + intercept, slope * z_lo[j] + intercept)
                    }
                }
                ActivationKind::Relu => {
                    if z_lo[j] >= 0.0 {
                        (z_lo[j], z_hi[j])
                    } else if z_hi[j] <= 0.0 {
                        (0.0, 0.0)
                    } else {
                        match mode {
                            WidthMode::PreActivation => (z_lo[j], z_hi[j]),
                            WidthMode::PostActivation => (0.0, z_hi[j]),
                        }
                    }
                }
            };
            h_lo[j] = a;
            h_hi[j] = b;
        }
        lo = h_lo;
        hi = h_hi;
    }
    let per_output: Vec<f64> = lo
        .iter()
        .zip(&hi)
        .map(|(&a, &b)| (b - a) / (2.0 * epsilon))
        .collect();
    let max = per_output.iter().fold(0.0_f64, |m, &v| m.max(v));
    Ok(IntervalLipschitz { per_output, max })
}

/// Jacobian of the network at `x` (rows are outputs), using the activation
/// slopes at the forward values.
pub fn jacobian_at(net: &Network, x: &[f64]) -> Matrix {
    let trace = net.forward_trace(x).expect("jacobian input dims");
    let mut j = net.layers[0].weights.clone();
    for l in 1..net.layers.len() {
        // Scale row r of J by the local slope of neuron r in layer l−1, then
        // left-multiply by the next weight matrix.
        let z = &trace.pre[l - 1];
        let acts = &net.layers[l - 1].activations;
        for r in 0..j.rows {
            let s = acts[r].local_slope(z[r]);
            if s != 1.0 {
                for v in j.row_mut(r) {
                    *v *= s;
                }
            }
        }
        let w = &net.layers[l].weights;
        let mut next = Matrix::zeros(w.rows, j.cols);
        for a in 0..w.rows {
            let wr = w.row(a);
            let nr = next.row_mut(a);
            for (r, &wv) in wr.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let jr = j.row(r);
                for (c, &jv) in jr.iter().enumerate() {
                    nr[c] += wv * jv;
                }
            }
        }
        j = next;
    }
    j
}

/// Largest row ℓ1 norm of the Jacobian at `x`: the exact local ℓ∞ Lipschitz
/// constant of the linear piece containing `x`.
pub fn jacobian_lipschitz_at(net: &Network, x: &[f64]) -> f64 {
    let j = jacobian_at(net, x);
    (0..j.rows)
        .map(|r| j.row(r).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max)
}

/// Sampled lower bound: the best difference quotient over random pairs in
/// the box, combined with the Jacobian ℓ1 bound at each sampled point.
/// Deterministic under a fixed seed.
pub fn sampled_lipschitz_lower(
    net: &Network,
    x: &[f64],
    epsilon: f64,
    n_pairs: usize,
    seed: u64,
) -> f64 {
    assert!(n_pairs >= 1, "need at least one sampled pair");
    let mut rng = stream_rng(seed, "lip-lower", 0);
    let mut best = 0.0_f64;
    for _ in 0..n_pairs {
        let u: Vec<f64> = x
            .iter()
            .map(|&v| v + rng.gen_range(-epsilon..=epsilon))
            .collect();
        let w: Vec<f64> = x
            .iter()
            .map(|&v| v + rng.gen_range(-epsilon..=epsilon))
            .collect();
        let du = linf_dist(&u, &w);
        if du > 0.0 {
            let fu = net.forward(&u).expect("dims");
            let fw = net.forward(&w).expect("dims");
            best = best.max(linf_dist(&fu, &fw) / du);
        }
        best = best.max(jacobian_lipschitz_at(net, &u));
        best = best.max(jacobian_lipschitz_at(net, &w));
    }
    best
}

/// Paired upper/lower Lipschitz evidence at one anchor.
#[derive(Debug, Clone)]
pub struct LipschitzEstimate {
    pub upper: f64,
    pub per_output_upper: Vec<f64>,
    pub lower: f64,
    pub x: Vec<f64>,
    pub epsilon: f64,
}

pub fn estimate(
    net: &Network,
    x: &[f64],
    epsilon: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<LipschitzEstimate, LipschitzError> {
    let ub = interval_lipschitz(net, x, epsilon)?;
    let lower = sampled_lipschitz_lower(net, x, epsilon, n_pairs, seed);
    Ok(LipschitzEstimate {
        upper: ub.max,
        per_output_upper: ub.per_output,
        lower,
        x: x.to_vec(),
        epsilon,
    })
}
