//! Per-sample robustness certification: incomplete CROWN margin checks, a
//! complete branch-and-bound over unstable neurons, and an exhaustive
//! activation-pattern oracle (exact on tiny networks) standing in as ground
//! truth.

use crate::bounds::{
    concretize, crown_expression, ibp, ibp_box, neuron_status, unstable_neurons, BoundsCache,
    CrownConfig, NeuronStatus, SplitSet, SplitSign,
};
use crate::linalg::Matrix;
use crate::lp::{minimize_over_box, BoxLpSolution, LpNum};
use crate::model::{argmax, Network, NeuronId};
use crate::train::{pgd_attack_batch, PgdConfig};
use num_rational::BigRational;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

/// Unstable-neuron cap for the exhaustive oracle (2^14 patterns).
pub const ORACLE_UNSTABLE_CAP: usize = 14;
/// Input dimension up to which oracle LPs run in exact rational arithmetic.
pub const RATIONAL_DIM_CAP: usize = 8;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("config error: {0}")]
    Config(String),
    #[error("too many unstable neurons for the exhaustive oracle: {count} > {cap}")]
    TooManyUnstable { count: usize, cap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Verified,
    Falsified,
    Unknown,
}

/// Lower/upper CROWN bounds on the margin f_label − f_rival.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RivalMargin {
    pub rival: usize,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub verdict: Verdict,
    pub margins: Vec<RivalMargin>,
    pub branches: usize,
    pub time_sec: f64,
    pub counterexample: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct BabConfig {
    pub max_branches: usize,
    pub max_seconds: f64,
    pub pgd: PgdConfig,
    pub crown: CrownConfig,
}

impl Default for BabConfig {
    fn default() -> Self {
        Self {
            max_branches: 1000,
            max_seconds: 10.0,
            pgd: PgdConfig {
                steps: 10,
                step_size: 0.0, // auto: ε/4
                restarts: 1,
                domain: None,
            },
            crown: CrownConfig::default(),
        }
    }
}

impl BabConfig {
    pub fn validate(&self) -> Result<(), VerifyError> {
        if self.max_branches == 0 || self.max_seconds <= 0.0 {
            return Err(VerifyError::Config(
                "branch and time budgets must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// CROWN margin bounds for every rival class, plus the |coefficient| each
/// hidden neuron carries into the lower margins (the branching signal).
fn crown_margins(
    net: &Network,
    cache: &BoundsCache,
    x: &[f64],
    epsilon: f64,
    label: usize,
    cfg: CrownConfig,
) -> (Vec<RivalMargin>, Vec<Vec<f64>>) {
    let classes = net.output_dim();
    let rivals: Vec<usize> = (0..classes).filter(|&r| r != label).collect();
    let mut c = Matrix::zeros(rivals.len(), classes);
    for (row, &r) in rivals.iter().enumerate() {
        c.set(row, label, 1.0);
        c.set(row, r, -1.0);
    }
    let pass = crown_expression(
        net,
        cache,
        &c,
        &vec![0.0; rivals.len()],
        net.layers.len() - 1,
        cfg,
    );
    let (lo, hi) = concretize(&pass.bounds, x, epsilon);
    let margins = rivals
        .iter()
        .enumerate()
        .map(|(row, &rival)| RivalMargin {
            rival,
            lower: lo[row],
            upper: hi[row],
        })
        .collect();
    (margins, pass.pre_coeff_abs)
}

/// Incomplete certification: verified when every CROWN margin lower bound is
/// positive, unknown otherwise. Never returns falsified.
pub fn certify_incomplete(net: &Network, x: &[f64], label: usize, epsilon: f64) -> Certificate {
    certify_incomplete_with(net, x, label, epsilon, CrownConfig::default())
}

pub fn certify_incomplete_with(
    net: &Network,
    x: &[f64],
    label: usize,
    epsilon: f64,
    cfg: CrownConfig,
) -> Certificate {
    let start = Instant::now();
    let cache = ibp(net, x, epsilon);
    let (margins, _) = crown_margins(net, &cache, x, epsilon, label, cfg);
    let verified = margins.iter().all(|m| m.lower > 0.0);
    Certificate {
        verdict: if verified {
            Verdict::Verified
        } else {
            Verdict::Unknown
        },
        margins,
        branches: 0,
        time_sec: start.elapsed().as_secs_f64(),
        counterexample: None,
    }
}

/// One explored branch, for inspection of the search.
#[derive(Debug, Clone)]
pub struct BranchRecord {
    pub depth: usize,
    pub parent_bound: f64,
    pub bound: f64,
}

/// Complete (budgeted) certification: depth-first splits on the unstable
/// neuron carrying the widest margin-weighted interval, clamping its bounds
/// per branch. Budget exhaustion maps to `Unknown`, never a crash.
pub fn certify_bab(
    net: &Network,
    x: &[f64],
    label: usize,
    epsilon: f64,
    cfg: &BabConfig,
    seed: u64,
) -> Result<Certificate, VerifyError> {
    certify_bab_traced(net, x, label, epsilon, cfg, seed).map(|(c, _)| c)
}

pub fn certify_bab_traced(
    net: &Network,
    x: &[f64],
    label: usize,
    epsilon: f64,
    cfg: &BabConfig,
    seed: u64,
) -> Result<(Certificate, Vec<BranchRecord>), VerifyError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut records = Vec::new();

    // Root margins, reported regardless of the outcome.
    let root_cache = ibp(net, x, epsilon);
    let (root_margins, _) = crown_margins(net, &root_cache, x, epsilon, label, cfg.crown);

    if net.predict(x).expect("dims") != label {
        return Ok((
            Certificate {
                verdict: Verdict::Falsified,
                margins: root_margins,
                branches: 0,
                time_sec: start.elapsed().as_secs_f64(),
                counterexample: Some(x.to_vec()),
            },
            records,
        ));
    }

    struct NodeState {
        splits: SplitSet,
        depth: usize,
        parent_bound: f64,
    }

    let mut stack = vec![NodeState {
        splits: SplitSet::default(),
        depth: 0,
        parent_bound: f64::NEG_INFINITY,
    }];
    let mut branches = 0usize;
    let mut verdict = Verdict::Verified;
    let mut counterexample = None;

    let input_lo: Vec<f64> = x.iter().map(|v| v - epsilon).collect();
    let input_hi: Vec<f64> = x.iter().map(|v| v + epsilon).collect();

    while let Some(node) = stack.pop() {
        if branches >= cfg.max_branches || start.elapsed().as_secs_f64() > cfg.max_seconds {
            verdict = Verdict::Unknown;
            break;
        }
        branches += 1;

        let cache = match ibp_box(net, &input_lo, &input_hi, &node.splits) {
            Some(c) => c,
            // Clamping emptied an interval: the region holds no inputs.
            None => continue,
        };
        let (margins, coeff) = crown_margins(net, &cache, x, epsilon, label, cfg.crown);
        let bound = margins
            .iter()
            .map(|m| m.lower)
            .fold(f64::INFINITY, f64::min);
        records.push(BranchRecord {
            depth: node.depth,
            parent_bound: node.parent_bound,
            bound,
        });
        if bound > 0.0 {
            continue; // leaf verified
        }

        // Falsification attempt inside this region.
        let mut pgd = cfg.pgd.clone();
        if pgd.step_size == 0.0 {
            pgd.step_size = epsilon / 4.0;
        }
        let adv = pgd_attack_batch(
            net,
            &Matrix::from_rows(&[x.to_vec()]),
            &[label],
            epsilon,
            &pgd,
            seed ^ (branches as u64),
        );
        let cand = adv.row(0);
        if argmax(&net.forward(cand).expect("dims")) != label {
            verdict = Verdict::Falsified;
            counterexample = Some(cand.to_vec());
            break;
        }

        // Split the unstable neuron with the widest margin-weighted interval.
        let pick = pick_split(net, &cache, &coeff, &node.splits);
        match pick {
            Some(id) => {
                let pos = node.splits.with(id, SplitSign::NonNegative);
                let neg = node.splits.with(id, SplitSign::NonPositive);
                stack.push(NodeState {
                    splits: neg,
                    depth: node.depth + 1,
                    parent_bound: bound,
                });
                stack.push(NodeState {
                    splits: pos,
                    depth: node.depth + 1,
                    parent_bound: bound,
                });
            }
            None => {
                // No unstable neuron left: the network is affine over this
                // leaf region (box ∩ split halfspaces), so the minimum margin
                // reduces to an exact LP per rival.
                match decide_stable_leaf(net, &cache, &node.splits, &input_lo, &input_hi, label) {
                    LeafOutcome::Safe => continue,
                    LeafOutcome::Counterexample(cex) => {
                        verdict = Verdict::Falsified;
                        counterexample = Some(cex);
                        break;
                    }
                    LeafOutcome::Ambiguous => {
                        verdict = Verdict::Unknown;
                        break;
                    }
                }
            }
        }
    }

    Ok((
        Certificate {
            verdict,
            margins: root_margins,
            branches,
            time_sec: start.elapsed().as_secs_f64(),
            counterexample,
        },
        records,
    ))
}

fn pick_split(
    net: &Network,
    cache: &BoundsCache,
    coeff: &[Vec<f64>],
    splits: &SplitSet,
) -> Option<NeuronId> {
    let mut best: Option<(f64, NeuronId)> = None;
    for id in unstable_neurons(net, cache) {
        if splits.splits.iter().any(|(s, _)| *s == id) {
            continue;
        }
        let (lb, ub) = cache.layer_bounds(id.layer);
        let score = coeff[id.layer][id.index] * (ub[id.index] - lb[id.index]);
        let better = match &best {
            None => true,
            Some((bs, bid)) => {
                score > *bs || (score == *bs && (id.layer, id.index) < (bid.layer, bid.index))
            }
        };
        if better {
            best = Some((score, id));
        }
    }
    best.map(|(_, id)| id)
}

enum LeafOutcome {
    Safe,
    Counterexample(Vec<f64>),
    Ambiguous,
}

/// Exact decision for a leaf whose neurons are all stable under `cache`:
/// compose the fixed-pattern affine map, turn each split into a halfspace,
/// and minimize every rival margin over the region by LP.
fn decide_stable_leaf(
    net: &Network,
    cache: &BoundsCache,
    splits: &SplitSet,
    input_lo: &[f64],
    input_hi: &[f64],
    label: usize,
) -> LeafOutcome {
    let d0 = net.input_dim;
    // Post-activation affine map, starting from the identity on the input.
    let mut a: Vec<Vec<f64>> = (0..d0)
        .map(|i| (0..d0).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut c: Vec<f64> = vec![0.0; d0];
    let mut halfspaces: Vec<(Vec<f64>, f64)> = Vec::new();

    for (l, layer) in net.layers.iter().enumerate() {
        // pre = W·(a x + c) + b.
        let mut pre_a: Vec<Vec<f64>> = Vec::with_capacity(layer.out_dim());
        let mut pre_c: Vec<f64> = Vec::with_capacity(layer.out_dim());
        for r in 0..layer.weights.rows {
            let mut row = vec![0.0; d0];
            let mut cc = layer.bias[r];
            for (k, &wv) in layer.weights.row(r).iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                for j in 0..d0 {
                    row[j] += wv * a[k][j];
                }
                cc += wv * c[k];
            }
            pre_a.push(row);
            pre_c.push(cc);
        }
        let (lb, ub) = cache.layer_bounds(l);
        let mut post_a = Vec::with_capacity(layer.out_dim());
        let mut post_c = Vec::with_capacity(layer.out_dim());
        for j in 0..layer.out_dim() {
            // Split constraints bind the sign of this neuron's pre-activation.
            match splits.splits.iter().find(|(id, _)| id.layer == l && id.index == j) {
                Some((_, SplitSign::NonNegative)) => {
                    halfspaces.push((pre_a[j].iter().map(|v| -v).collect(), pre_c[j]));
                }
                Some((_, SplitSign::NonPositive)) => {
                    halfspaces.push((pre_a[j].clone(), -pre_c[j]));
                }
                None => {}
            }
            let (scale, shift) = match layer.activations[j] {
                crate::model::ActivationKind::Identity => (1.0, 0.0),
                crate::model::ActivationKind::GraftedLinear { slope, intercept } => {
                    (slope, intercept)
                }
                crate::model::ActivationKind::Relu => {
                    match crate::bounds::status_of(layer.activations[j], lb[j], ub[j]) {
                        NeuronStatus::Active => (1.0, 0.0),
                        NeuronStatus::Inactive => (0.0, 0.0),
                        // Callers guarantee no unstable neuron remains.
                        NeuronStatus::Unstable | NeuronStatus::Linear => return LeafOutcome::Ambiguous,
                    }
                }
            };
            post_a.push(pre_a[j].iter().map(|v| scale * v).collect::<Vec<f64>>());
            post_c.push(scale * pre_c[j] + shift);
        }
        a = post_a;
        c = post_c;
    }

    let mut worst: Option<(f64, Vec<f64>)> = None;
    for rival in 0..net.output_dim() {
        if rival == label {
            continue;
        }
        let coeff: Vec<f64> = (0..d0).map(|k| a[label][k] - a[rival][k]).collect();
        match minimize_over_box(&coeff, input_lo, input_hi, &halfspaces) {
            // Infeasible region: vacuously safe against this rival.
            None => continue,
            Some(BoxLpSolution { objective, x }) => {
                let margin = objective + c[label] - c[rival];
                if worst.as_ref().map_or(true, |(m, _)| margin < *m) {
                    worst = Some((margin, x));
                }
            }
        }
    }
    match worst {
        None => LeafOutcome::Safe, // every rival LP was infeasible
        Some((margin, point)) if margin > 0.0 => {
            let _ = point;
            LeafOutcome::Safe
        }
        Some((_, point)) => {
            if argmax(&net.forward(&point).expect("dims")) != label {
                LeafOutcome::Counterexample(point)
            } else {
                LeafOutcome::Ambiguous
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Exhaustive activation-pattern oracle.

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub verdict: Verdict,
    /// Exact minimum margin over all rivals and feasible patterns.
    pub min_margin: f64,
    /// Exact per-logit output range over the whole box.
    pub range_lo: Vec<f64>,
    pub range_hi: Vec<f64>,
    pub counterexample: Option<Vec<f64>>,
    pub feasible_patterns: usize,
}

/// Enumerate all sign patterns of unstable neurons; each pattern makes the
/// network affine, so margins and logit ranges reduce to exact LPs over the
/// box intersected with the pattern's halfspaces.
pub fn exhaustive_oracle(
    net: &Network,
    x: &[f64],
    label: usize,
    epsilon: f64,
) -> Result<OracleResult, VerifyError> {
    let cache = ibp(net, x, epsilon);
    let n_unstable = unstable_neurons(net, &cache).len();
    if n_unstable > ORACLE_UNSTABLE_CAP {
        return Err(VerifyError::TooManyUnstable {
            count: n_unstable,
            cap: ORACLE_UNSTABLE_CAP,
        });
    }
    if net.input_dim <= RATIONAL_DIM_CAP {
        run_oracle::<BigRational>(net, x, label, epsilon, &cache)
    } else {
        run_oracle::<f64>(net, x, label, epsilon, &cache)
    }
}

struct OracleSearch<'a, T> {
    net: &'a Network,
    cache: &'a BoundsCache,
    lo: Vec<f64>,
    hi: Vec<f64>,
    label: usize,
    // Running best margin and its witness.
    min_margin: Option<(T, Vec<T>, usize)>,
    range_lo: Vec<Option<T>>,
    range_hi: Vec<Option<T>>,
    feasible_patterns: usize,
}

fn run_oracle<T: LpNum>(
    net: &Network,
    x: &[f64],
    label: usize,
    epsilon: f64,
    cache: &BoundsCache,
) -> Result<OracleResult, VerifyError> {
    let d_out = net.output_dim();
    let mut search = OracleSearch::<T> {
        net,
        cache,
        lo: x.iter().map(|v| v - epsilon).collect(),
        hi: x.iter().map(|v| v + epsilon).collect(),
        label,
        min_margin: None,
        range_lo: vec![None; d_out],
        range_hi: vec![None; d_out],
        feasible_patterns: 0,
    };
    // Post-activation affine map of the input itself: identity.
    let d0 = net.input_dim;
    let id_a: Vec<Vec<T>> = (0..d0)
        .map(|i| {
            (0..d0)
                .map(|j| if i == j { T::one() } else { T::zero() })
                .collect()
        })
        .collect();
    let id_c: Vec<T> = vec![T::zero(); d0];
    search.descend(0, id_a, id_c, Vec::new());

    let OracleSearch {
        min_margin,
        range_lo,
        range_hi,
        feasible_patterns,
        ..
    } = search;
    let (min_margin_t, witness, rival) = min_margin.expect("box is nonempty");
    let min_margin_f = min_margin_t.to_f64();
    let zero = T::zero();
    let verdict = if min_margin_t > zero {
        Verdict::Verified
    } else if min_margin_t < zero {
        Verdict::Falsified
    } else if rival < label {
        // Exact tie: first-max argmax picks the rival.
        Verdict::Falsified
    } else {
        Verdict::Verified
    };
    let counterexample = (verdict == Verdict::Falsified)
        .then(|| witness.iter().map(|v| v.to_f64()).collect::<Vec<f64>>());
    Ok(OracleResult {
        verdict,
        min_margin: min_margin_f,
        range_lo: range_lo
            .into_iter()
            .map(|v| v.expect("feasible pattern exists").to_f64())
            .collect(),
        range_hi: range_hi
            .into_iter()
            .map(|v| v.expect("feasible pattern exists").to_f64())
            .collect(),
        counterexample,
        feasible_patterns,
    })
}

impl<'a, T: LpNum> OracleSearch<'a, T> {
    /// Depth-first over layers; `a`/`c` are the affine map of the processed
    /// prefix's post-activations, `constraints` the accumulated halfspaces
    /// (g·x ≤ h).
    fn descend(
        &mut self,
        layer: usize,
        a: Vec<Vec<T>>,
        c: Vec<T>,
        constraints: Vec<(Vec<T>, T)>,
    ) {
        if layer == self.net.layers.len() {
            self.at_leaf(&a, &c, &constraints);
            return;
        }
        // Compose the affine layer: pre = W·(a x + c) + b.
        let w = &self.net.layers[layer].weights;
        let bias = &self.net.layers[layer].bias;
        let d0 = self.net.input_dim;
        let mut pre_a: Vec<Vec<T>> = Vec::with_capacity(w.rows);
        let mut pre_c: Vec<T> = Vec::with_capacity(w.rows);
        for r in 0..w.rows {
            let mut row = vec![T::zero(); d0];
            let mut cc = T::from_f64(bias[r]);
            for (k, &wv) in w.row(r).iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let wt = T::from_f64(wv);
                for j in 0..d0 {
                    row[j] = row[j].clone() + wt.clone() * a[k][j].clone();
                }
                cc = cc + wt * c[k].clone();
            }
            pre_a.push(row);
            pre_c.push(cc);
        }

        // Branch over the layer's unstable ReLUs; stable and linear neurons
        // are fixed affine.
        let acts = &self.net.layers[layer].activations;
        let (lb, ub) = self.cache.layer_bounds(layer);
        let mut branch_neurons = Vec::new();
        for j in 0..acts.len() {
            if crate::bounds::status_of(acts[j], lb[j], ub[j]) == NeuronStatus::Unstable {
                branch_neurons.push(j);
            }
        }
        self.branch_neuron(
            layer,
            &pre_a,
            &pre_c,
            &branch_neurons,
            0,
            constraints,
            Vec::new(),
        );
    }

    /// Fix signs for `branch_neurons[pos..]`, then finish the layer.
    #[allow(clippy::too_many_arguments)]
    fn branch_neuron(
        &mut self,
        layer: usize,
        pre_a: &[Vec<T>],
        pre_c: &[T],
        branch_neurons: &[usize],
        pos: usize,
        constraints: Vec<(Vec<T>, T)>,
        signs: Vec<(usize, bool)>,
    ) {
        if pos == branch_neurons.len() {
            // All signs fixed: build post-activation affine map and recurse.
            let acts = &self.net.layers[layer].activations;
            let (lb, ub) = self.cache.layer_bounds(layer);
            let d0 = self.net.input_dim;
            let mut post_a = Vec::with_capacity(pre_a.len());
            let mut post_c = Vec::with_capacity(pre_c.len());
            for j in 0..pre_a.len() {
                let (scale, shift) = match acts[j] {
                    crate::model::ActivationKind::Identity => (T::one(), T::zero()),
                    crate::model::ActivationKind::GraftedLinear { slope, intercept } => {
                        (T::from_f64(slope), T::from_f64(intercept))
                    }
                    crate::model::ActivationKind::Relu => {
                        match crate::bounds::status_of(acts[j], lb[j], ub[j]) {
                            NeuronStatus::Active => (T::one(), T::zero()),
                            NeuronStatus::Inactive => (T::zero(), T::zero()),
                            NeuronStatus::Unstable => {
                                let on = signs
                                    .iter()
                                    .find(|(k, _)| *k == j)
                                    .map(|(_, s)| *s)
                                    .expect("sign fixed");
                                if on {
                                    (T::one(), T::zero())
                                } else {
                                    (T::zero(), T::zero())
                                }
                            }
                            NeuronStatus::Linear => unreachable!(),
                        }
                    }
                };
                let row: Vec<T> = if scale.is_zero() {
                    vec![T::zero(); d0]
                } else {
                    pre_a[j].iter().map(|v| scale.clone() * v.clone()).collect()
                };
                post_a.push(row);
                post_c.push(scale.clone() * pre_c[j].clone() + shift);
            }
            self.descend(layer + 1, post_a, post_c, constraints);
            return;
        }

        let j = branch_neurons[pos];
        // Positive branch: pre_j ≥ 0 ⟺ −a·x ≤ c.
        {
            let g: Vec<T> = pre_a[j].iter().map(|v| -v.clone()).collect();
            let h = pre_c[j].clone();
            let mut cons = constraints.clone();
            cons.push((g, h));
            if self.feasible(&cons) {
                let mut s = signs.clone();
                s.push((j, true));
                self.branch_neuron(layer, pre_a, pre_c, branch_neurons, pos + 1, cons, s);
            }
        }
        // Negative branch: pre_j ≤ 0 ⟺ a·x ≤ −c.
        {
            let g: Vec<T> = pre_a[j].clone();
            let h = -pre_c[j].clone();
            let mut cons = constraints;
            cons.push((g, h));
            if self.feasible(&cons) {
                let mut s = signs;
                s.push((j, false));
                self.branch_neuron(layer, pre_a, pre_c, branch_neurons, pos + 1, cons, s);
            }
        }
    }

    fn feasible(&self, constraints: &[(Vec<T>, T)]) -> bool {
        let c = vec![T::zero(); self.net.input_dim];
        minimize_over_box(&c, &self.lo, &self.hi, constraints).is_some()
    }

    fn at_leaf(&mut self, a: &[Vec<T>], c: &[T], constraints: &[(Vec<T>, T)]) {
        self.feasible_patterns += 1;
        let d_out = a.len();
        // Exact logit ranges.
        for j in 0..d_out {
            if let Some(BoxLpSolution { objective, .. }) =
                minimize_over_box(&a[j], &self.lo, &self.hi, constraints)
            {
                let v = objective + c[j].clone();
                if self.range_lo[j].as_ref().map_or(true, |cur| v < *cur) {
                    self.range_lo[j] = Some(v);
                }
            }
            let neg: Vec<T> = a[j].iter().map(|v| -v.clone()).collect();
            if let Some(BoxLpSolution { objective, .. }) =
                minimize_over_box(&neg, &self.lo, &self.hi, constraints)
            {
                let v = -objective + c[j].clone();
                if self.range_hi[j].as_ref().map_or(true, |cur| v > *cur) {
                    self.range_hi[j] = Some(v);
                }
            }
        }
        // Exact margins against every rival.
        for rival in 0..d_out {
            if rival == self.label {
                continue;
            }
            let coeff: Vec<T> = (0..self.net.input_dim)
                .map(|k| a[self.label][k].clone() - a[rival][k].clone())
                .collect();
            if let Some(BoxLpSolution { objective, x }) =
                minimize_over_box(&coeff, &self.lo, &self.hi, constraints)
            {
                let margin = objective + c[self.label].clone() - c[rival].clone();
                let better = self
                    .min_margin
                    .as_ref()
                    .map_or(true, |(cur, _, _)| margin < *cur);
                if better {
                    self.min_margin = Some((margin, x, rival));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation suite.

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub pgd: PgdConfig,
    pub bab: BabConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pgd: PgdConfig {
                steps: 20,
                step_size: 0.0,
                restarts: 5,
                domain: Some((0.0, 1.0)),
            },
            bab: BabConfig::default(),
            seed: 0,
        }
    }
}

/// Suite metrics, all percentages except the mean verification time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SuiteMetrics {
    pub sa: f64,
    pub ra: f64,
    pub va: f64,
    pub unr: f64,
    pub time_sec: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleReport {
    pub index: usize,
    pub label: usize,
    pub clean_correct: bool,
    pub robust_correct: bool,
    pub certificate: Option<Certificate>,
    pub unr: f64,
}

/// Evaluate SA / RA / VA / UNR / mean verification time over a dataset.
/// Misclassified and successfully attacked samples count as unverified and
/// are excluded from timing.
pub fn evaluate_suite(
    net: &Network,
    x: &Matrix,
    labels: &[usize],
    epsilon: f64,
    cfg: &EvalConfig,
) -> (SuiteMetrics, Vec<SampleReport>) {
    assert_eq!(x.rows, labels.len());
    let n = x.rows;
    let mut pgd = cfg.pgd.clone();
    if pgd.step_size == 0.0 {
        pgd.step_size = (epsilon / 4.0).max(1e-6);
    }
    let reports: Vec<SampleReport> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let label = labels[i];
            let clean_correct = net.predict(xi).expect("dims") == label;
            let adv = pgd_attack_batch(
                net,
                &Matrix::from_rows(&[xi.to_vec()]),
                &[label],
                epsilon,
                &pgd,
                cfg.seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15),
            );
            let robust_correct =
                clean_correct && argmax(&net.forward(adv.row(0)).expect("dims")) == label;
            let cache = ibp(net, xi, epsilon);
            let (_, unr) = neuron_status(net, &cache);
            let certificate = if robust_correct {
                Some(
                    certify_bab(net, xi, label, epsilon, &cfg.bab, cfg.seed ^ (i as u64))
                        .expect("validated config"),
                )
            } else {
                None
            };
            SampleReport {
                index: i,
                label,
                clean_correct,
                robust_correct,
                certificate,
                unr,
            }
        })
        .collect();

    let sa = reports.iter().filter(|r| r.clean_correct).count() as f64 / n as f64 * 100.0;
    let ra = reports.iter().filter(|r| r.robust_correct).count() as f64 / n as f64 * 100.0;
    let va = reports
        .iter()
        .filter(|r| {
            r.certificate
                .as_ref()
                .map_or(false, |c| c.verdict == Verdict::Verified)
        })
        .count() as f64
        / n as f64
        * 100.0;
    let unr = reports.iter().map(|r| r.unr).sum::<f64>() / n as f64;
    let timed: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.certificate.as_ref().map(|c| c.time_sec))
        .collect();
    let time_sec = if timed.is_empty() {
        0.0
    } else {
        timed.iter().sum::<f64>() / timed.len() as f64
    };
    (
        SuiteMetrics {
            sa,
            ra,
            va,
            unr,
            time_sec,
        },
        reports,
    )
}
