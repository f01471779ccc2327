//! Adversarial pre-training and post-graft fine-tuning: PGD attacks, the
//! slope loss, ℓ1 regularization, small-weight pruning, and the SGD loop.

use crate::bounds::{ibp, BoundsCache, NeuronStatus};
use crate::linalg::Matrix;
use crate::model::{ActivationKind, Network};
use crate::rng::stream_rng;
use crate::tape::{grad, GradError, NodeId, ParamGrad, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged { epoch: usize, source: GradError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlopeLossMode {
    #[default]
    Verbatim,
    Symmetric,
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgdConfig {
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    /// Clamp attacked points to this input domain; `None` keeps the pure
    /// ε-ball (used when certifying synthetic anchors outside [0,1]).
    pub domain: Option<(f64, f64)>,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            steps: 7,
            step_size: 0.03,
            restarts: 1,
            domain: Some((0.0, 1.0)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base / self.factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    /// Learning rate for grafted slopes and intercepts.
    pub lr_graft: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_slope: f64,
    pub lambda_l1: f64,
    pub slope_k: f64,
    pub slope_mode: SlopeLossMode,
    pub pgd: PgdConfig,
    /// Small-weight pruning ratio applied at the start of fine-tuning.
    pub prune_ratio: f64,
    pub eps_train: f64,
    /// Ramp the training ε linearly from 0 over this many epochs.
    pub eps_warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            lr: LrSchedule {
                base: 0.1,
                decay_epochs: vec![25, 35],
                factor: 10.0,
            },
            lr_graft: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda_slope: 5e-5,
            lambda_l1: 1e-4,
            slope_k: 2.0,
            slope_mode: SlopeLossMode::Verbatim,
            pgd: PgdConfig::default(),
            prune_ratio: 0.30,
            eps_train: 0.1,
            eps_warmup_epochs: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr.base <= 0.0 || self.lr_graft <= 0.0 || self.lr.factor <= 0.0 {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(TrainError::Config(format!(
                "prune_ratio must lie in [0, 1), got {}",
                self.prune_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.slope_k <= 0.0 {
            return Err(TrainError::Config("slope_k must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// PGD.

/// Projected gradient ascent on cross-entropy within B(x, ε); returns the
/// worst point found. Deterministic under the seed.
pub fn pgd_attack(
    net: &Network,
    x: &[f64],
    label: usize,
    epsilon: f64,
    cfg: &PgdConfig,
    seed: u64,
) -> Vec<f64> {
    let batch = Matrix::from_rows(&[x.to_vec()]);
    let out = pgd_attack_batch(net, &batch, &[label], epsilon, cfg, seed);
    out.row(0).to_vec()
}

/// Batched PGD; row i attacks sample i.
pub fn pgd_attack_batch(
    net: &Network,
    x: &Matrix,
    labels: &[usize],
    epsilon: f64,
    cfg: &PgdConfig,
    seed: u64,
) -> Matrix {
    assert_eq!(x.rows, labels.len());
    if epsilon == 0.0 {
        return clamp_domain(x.clone(), cfg.domain);
    }
    let mut best = clamp_domain(x.clone(), cfg.domain);
    let mut best_loss = per_sample_ce(net, &best, labels);

    for restart in 0..cfg.restarts.max(1) {
        let mut rng = stream_rng(seed, "pgd", restart as u64);
        let mut adv = Matrix::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            for j in 0..x.cols {
                let delta = if restart == 0 {
                    0.0
                } else {
                    rng.gen_range(-epsilon..=epsilon)
                };
                adv.set(i, j, x.get(i, j) + delta);
            }
        }
        adv = project(adv, x, epsilon, cfg.domain);
        for _ in 0..cfg.steps {
            let g = input_ce_grad(net, &adv, labels);
            for i in 0..adv.rows {
                for j in 0..adv.cols {
                    let step = cfg.step_size * sign(g.get(i, j));
                    adv.set(i, j, adv.get(i, j) + step);
                }
            }
            adv = project(adv, x, epsilon, cfg.domain);
        }
        let loss = per_sample_ce(net, &adv, labels);
        for i in 0..x.rows {
            if loss[i] > best_loss[i] {
                best_loss[i] = loss[i];
                best.row_mut(i).copy_from_slice(adv.row(i));
            }
        }
    }
    best
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp_domain(mut m: Matrix, domain: Option<(f64, f64)>) -> Matrix {
    if let Some((lo, hi)) = domain {
        for v in &mut m.data {
            *v = v.clamp(lo, hi);
        }
    }
    m
}

fn project(mut adv: Matrix, x: &Matrix, epsilon: f64, domain: Option<(f64, f64)>) -> Matrix {
    for i in 0..adv.rows {
        for j in 0..adv.cols {
            let c = x.get(i, j);
            let mut v = adv.get(i, j).clamp(c - epsilon, c + epsilon);
            if let Some((lo, hi)) = domain {
                v = v.clamp(lo, hi);
            }
            adv.set(i, j, v);
        }
    }
    adv
}

fn per_sample_ce(net: &Network, x: &Matrix, labels: &[usize]) -> Vec<f64> {
    let out = net.forward_batch(x).expect("dims");
    (0..out.rows)
        .map(|i| {
            let row = out.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            lse - row[labels[i]]
        })
        .collect()
}

fn input_ce_grad(net: &Network, x: &Matrix, labels: &[usize]) -> Matrix {
    let mut tape = Tape::new(net);
    let xin = tape.input_var(x.clone());
    let logits = tape.forward_network(xin);
    let lse = tape.logsumexp(logits);
    let picked = tape.gather_col(logits, labels.to_vec());
    let per = tape.sub(lse, picked);
    let loss = tape.sum_all(per);
    let grads = tape.backward(loss).expect("finite attack gradients");
    grads
        .input(xin)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(x.rows, x.cols))
}

// ---------------------------------------------------------------------------
// Loss terms.

fn slope_term(s: f64, k: f64, mode: SlopeLossMode) -> f64 {
    match mode {
        SlopeLossMode::Verbatim => 1.0 - (k * (1.0 - s) * (1.0 - s)).tanh(),
        SlopeLossMode::Symmetric => 1.0 - (4.0 * k * (s - 0.5) * (s - 0.5)).tanh(),
        SlopeLossMode::Off => 0.0,
    }
}

/// Slope loss for one sample: mean over applicable neurons (unstable ReLUs
/// with s = ub/(ub−lb); grafted neurons with s = γ) of 1 − tanh(k(1−s)²).
/// Stable non-grafted neurons contribute nothing; no applicable neurons
/// gives 0.
pub fn slope_loss(net: &Network, cache: &BoundsCache, k: f64, mode: SlopeLossMode) -> f64 {
    if mode == SlopeLossMode::Off {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for l in 0..net.hidden_layer_count() {
        let (lb, ub) = cache.layer_bounds(l);
        for (j, act) in net.layers[l].activations.iter().enumerate() {
            match *act {
                ActivationKind::GraftedLinear { slope, .. } => {
                    total += slope_term(slope, k, mode);
                    count += 1;
                }
                ActivationKind::Relu => {
                    if crate::bounds::status_of(*act, lb[j], ub[j]) == NeuronStatus::Unstable {
                        let s = ub[j] / (ub[j] - lb[j]);
                        total += slope_term(s, k, mode);
                        count += 1;
                    }
                }
                ActivationKind::Identity => {}
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Σ|w| over all weight matrices; biases excluded.
pub fn l1_reg(net: &Network) -> f64 {
    net.layers.iter().map(|l| l.weights.abs_sum()).sum()
}

// ---------------------------------------------------------------------------
// Pruning.

/// Frozen-zero weight positions per layer (flat indices into the row-major
/// weight data).
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub zeroed: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn empty(net: &Network) -> Self {
        Self {
            zeroed: net
                .layers
                .iter()
                .map(|l| vec![false; l.weights.data.len()])
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.zeroed
            .iter()
            .map(|v| v.iter().filter(|&&b| b).count())
            .sum()
    }

    fn apply(&self, net: &mut Network) {
        for (l, mask) in self.zeroed.iter().enumerate() {
            for (idx, &z) in mask.iter().enumerate() {
                if z {
                    net.layers[l].weights.data[idx] = 0.0;
                }
            }
        }
    }
}

/// Zero the smallest-magnitude fraction `ratio` of all weights network-wide.
/// Ties break deterministically by (layer, flat index).
pub fn small_weight_prune(net: &Network, ratio: f64) -> (Network, PruneMask) {
    assert!((0.0..1.0).contains(&ratio), "prune ratio must lie in [0, 1)");
    let mut mask = PruneMask::empty(net);
    let total: usize = net.layers.iter().map(|l| l.weights.data.len()).sum();
    let n_prune = (ratio * total as f64).floor() as usize;
    if n_prune > 0 {
        let mut entries: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
        for (l, layer) in net.layers.iter().enumerate() {
            for (idx, &w) in layer.weights.data.iter().enumerate() {
                entries.push((w.abs(), l, idx));
            }
        }
        entries.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("finite weights")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        for &(_, l, idx) in entries.iter().take(n_prune) {
            mask.zeroed[l][idx] = true;
        }
    }
    let mut pruned = net.clone();
    mask.apply(&mut pruned);
    (pruned, mask)
}

// ---------------------------------------------------------------------------
// Composite loss on the tape.

/// Build adv-CE + λ_slope·slope + λ_l1·ℓ1 on a tape. `x_adv` holds the
/// already-attacked inputs (fixed), `x_clean` anchors the interval box for
/// the slope term.
pub fn build_total_loss(
    tape: &mut Tape,
    x_adv: &Matrix,
    labels: &[usize],
    x_clean: &Matrix,
    cfg: &TrainConfig,
) -> NodeId {
    let adv = tape.constant(x_adv.clone());
    let logits = tape.forward_network(adv);
    let mut total = tape.cross_entropy(logits, labels);
    if cfg.lambda_slope != 0.0 && cfg.slope_mode != SlopeLossMode::Off {
        let slope = build_slope_loss(tape, x_clean, cfg.eps_train, cfg.slope_k, cfg.slope_mode);
        let scaled = tape.scale(slope, cfg.lambda_slope);
        total = tape.add(total, scaled);
    }
    if cfg.lambda_l1 != 0.0 {
        let l1 = tape.l1_weights();
        let scaled = tape.scale(l1, cfg.lambda_l1);
        total = tape.add(total, scaled);
    }
    total
}

/// Slope loss over a batch: mean over samples of the per-sample mean over
/// applicable neurons. Gradients flow into weights through the interval
/// bounds and into grafted slopes directly.
pub fn build_slope_loss(
    tape: &mut Tape,
    x_clean: &Matrix,
    epsilon: f64,
    k: f64,
    mode: SlopeLossMode,
) -> NodeId {
    let n = x_clean.rows;
    let net = tape.network();
    let hidden = net.hidden_layer_count();
    let grafted_per_layer: Vec<Vec<usize>> = (0..hidden)
        .map(|l| {
            net.layers[l]
                .activations
                .iter()
                .enumerate()
                .filter(|(_, a)| a.is_grafted())
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let grafted_total: usize = grafted_per_layer.iter().map(|v| v.len()).sum();

    let pre = tape.interval_network(x_clean, epsilon);

    // Unstable-ReLU masks per (sample, neuron), read off the forward interval
    // values and held fixed.
    let mut masks: Vec<Matrix> = Vec::with_capacity(hidden);
    let mut counts = vec![grafted_total as f64; n];
    for l in 0..hidden {
        let (zlo, zhi) = pre[l];
        let lo = tape.value(zlo);
        let hi = tape.value(zhi);
        let acts = &tape.network().layers[l].activations;
        let mut mask = Matrix::zeros(lo.rows, lo.cols);
        for i in 0..lo.rows {
            for j in 0..lo.cols {
                if matches!(acts[j], ActivationKind::Relu)
                    && lo.get(i, j) < 0.0
                    && hi.get(i, j) > 0.0
                {
                    mask.set(i, j, 1.0);
                    counts[i] += 1.0;
                }
            }
        }
        masks.push(mask);
    }

    let mut terms: Vec<NodeId> = Vec::new();
    for l in 0..hidden {
        let (zlo, zhi) = pre[l];
        let mask = &masks[l];
        if mask.data.iter().all(|&m| m == 0.0) {
            continue;
        }
        let width = tape.sub(zhi, zlo);
        let width_safe = tape.mask_fill(width, mask.clone(), 1.0);
        let s = tape.div(zhi, width_safe);
        let term = build_slope_term(tape, s, k, mode);
        // Weight each applicable entry by 1/(count_i · n).
        let mut w = Matrix::zeros(mask.rows, mask.cols);
        for i in 0..mask.rows {
            for j in 0..mask.cols {
                if mask.get(i, j) != 0.0 {
                    w.set(i, j, 1.0 / (counts[i] * n as f64));
                }
            }
        }
        let wc = tape.constant(w);
        let weighted = tape.mul(term, wc);
        terms.push(tape.sum_all(weighted));
    }
    for l in 0..hidden {
        if grafted_per_layer[l].is_empty() {
            continue;
        }
        let gamma = tape.slope_param(l);
        let term = build_slope_term(tape, gamma, k, mode);
        // Grafted neurons apply to every sample: weight Σ_i 1/(count_i · n).
        let factor: f64 = counts.iter().map(|&c| 1.0 / (c * n as f64)).sum();
        let dim = tape.value(gamma).cols;
        let mut w = Matrix::zeros(1, dim);
        for &j in &grafted_per_layer[l] {
            w.set(0, j, factor);
        }
        let wc = tape.constant(w);
        let weighted = tape.mul(term, wc);
        terms.push(tape.sum_all(weighted));
    }

    match terms.split_first() {
        None => tape.constant(Matrix::from_vec(1, 1, vec![0.0])),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t);
            }
            acc
        }
    }
}

fn build_slope_term(tape: &mut Tape, s: NodeId, k: f64, mode: SlopeLossMode) -> NodeId {
    match mode {
        SlopeLossMode::Verbatim => {
            let neg = tape.scale(s, -1.0);
            let one_minus = tape.add_scalar(neg, 1.0);
            let sq = tape.mul(one_minus, one_minus);
            let ksq = tape.scale(sq, k);
            let t = tape.tanh(ksq);
            let nt = tape.scale(t, -1.0);
            tape.add_scalar(nt, 1.0)
        }
        SlopeLossMode::Symmetric => {
            let c = tape.add_scalar(s, -0.5);
            let sq = tape.mul(c, c);
            let ksq = tape.scale(sq, 4.0 * k);
            let t = tape.tanh(ksq);
            let nt = tape.scale(t, -1.0);
            tape.add_scalar(nt, 1.0)
        }
        SlopeLossMode::Off => tape.constant(Matrix::from_vec(1, 1, vec![0.0])),
    }
}

/// Total loss value (adv-CE at fixed attacked inputs + regularizers).
pub fn total_loss_value(
    net: &Network,
    x_adv: &Matrix,
    labels: &[usize],
    x_clean: &Matrix,
    cfg: &TrainConfig,
) -> Result<f64, GradError> {
    let mut tape = Tape::new(net);
    let loss = build_total_loss(&mut tape, x_adv, labels, x_clean, cfg);
    // Reuse the NaN bookkeeping from the backward entry point.
    tape.backward(loss)?;
    Ok(tape.scalar(loss))
}

// ---------------------------------------------------------------------------
// SGD loop.

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub sa: f64,
    pub unr: f64,
    pub lip: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub aborted: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,sa,unr,lip\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.loss, e.sa, e.unr, e.lip
            ));
        }
        out
    }
}

/// SGD with momentum and weight decay over the composite loss. Grafted
/// slopes and intercepts train with `lr_graft` (no weight decay) and the
/// slope cap is enforced after each step. Pruned weights stay frozen at 0.
pub fn train_loop(
    net: &Network,
    x: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
    mask: Option<&PruneMask>,
) -> Result<(Network, TrainLog), TrainError> {
    cfg.validate()?;
    assert_eq!(x.rows, labels.len());
    let mut current = net.clone();
    if let Some(m) = mask {
        m.apply(&mut current);
    }
    let mut velocity = ParamGrad::zeros_like(&current);
    let mut log = TrainLog::default();
    let n = x.rows;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch);
        let eps_now = if cfg.eps_warmup_epochs > 0 && epoch < cfg.eps_warmup_epochs {
            cfg.eps_train * (epoch + 1) as f64 / cfg.eps_warmup_epochs as f64
        } else {
            cfg.eps_train
        };
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(cfg.seed, "data", epoch as u64);
        // Fisher-Yates with the epoch substream.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let bx = Matrix::from_rows(&chunk.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
            let blabels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let adv = pgd_attack_batch(
                &current,
                &bx,
                &blabels,
                eps_now,
                &cfg.pgd,
                cfg.seed ^ ((epoch as u64) << 20 | b as u64),
            );
            let step = grad(&current, |tape| {
                build_total_loss(tape, &adv, &blabels, &bx, cfg)
            });
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(e) => {
                    // Divergence: stop and hand back the last good weights.
                    log.aborted = true;
                    let _ = e;
                    return Ok((current, log));
                }
            };
            epoch_loss += loss;
            batches += 1;
            sgd_step(&mut current, &grads, &mut velocity, lr, cfg, mask);
        }
        let sa = accuracy(&current, x, labels);
        let (unr, lip) = probe_metrics(&current, x, cfg.eps_train);
        log.epochs.push(EpochLog {
            epoch,
            loss: if batches > 0 { epoch_loss / batches as f64 } else { 0.0 },
            sa,
            unr,
            lip,
        });
    }
    Ok((current, log))
}

fn sgd_step(
    net: &mut Network,
    grads: &ParamGrad,
    velocity: &mut ParamGrad,
    lr: f64,
    cfg: &TrainConfig,
    mask: Option<&PruneMask>,
) {
    for l in 0..net.layers.len() {
        let layer = &mut net.layers[l];
        for idx in 0..layer.weights.data.len() {
            if mask.map_or(false, |m| m.zeroed[l][idx]) {
                velocity.weights[l].data[idx] = 0.0;
                layer.weights.data[idx] = 0.0;
                continue;
            }
            let g = grads.weights[l].data[idx] + cfg.weight_decay * layer.weights.data[idx];
            let v = cfg.momentum * velocity.weights[l].data[idx] + g;
            velocity.weights[l].data[idx] = v;
            layer.weights.data[idx] -= lr * v;
        }
        for j in 0..layer.bias.len() {
            let g = grads.biases[l][j] + cfg.weight_decay * layer.bias[j];
            let v = cfg.momentum * velocity.biases[l][j] + g;
            velocity.biases[l][j] = v;
            layer.bias[j] -= lr * v;
        }
        for j in 0..layer.activations.len() {
            if let ActivationKind::GraftedLinear { slope, intercept } = layer.activations[j] {
                let gs = grads.slopes[l][j];
                let gc = grads.intercepts[l][j];
                let vs = cfg.momentum * velocity.slopes[l][j] + gs;
                let vc = cfg.momentum * velocity.intercepts[l][j] + gc;
                velocity.slopes[l][j] = vs;
                velocity.intercepts[l][j] = vc;
                let new_slope = (slope - cfg.lr_graft * vs)
                    .clamp(-crate::model::DEFAULT_SLOPE_CAP, crate::model::DEFAULT_SLOPE_CAP);
                let new_intercept = intercept - cfg.lr_graft * vc;
                layer.activations[j] = ActivationKind::GraftedLinear {
                    slope: new_slope,
                    intercept: new_intercept,
                };
            }
        }
    }
}

pub fn accuracy(net: &Network, x: &Matrix, labels: &[usize]) -> f64 {
    let out = net.forward_batch(x).expect("dims");
    let correct = (0..out.rows)
        .filter(|&i| crate::model::argmax(out.row(i)) == labels[i])
        .count();
    correct as f64 / out.rows.max(1) as f64
}

fn probe_metrics(net: &Network, x: &Matrix, epsilon: f64) -> (f64, f64) {
    let n_unr = x.rows.min(64);
    let mut unr_sum = 0.0;
    for i in 0..n_unr {
        let cache = ibp(net, x.row(i), epsilon);
        let (_, unr) = crate::bounds::neuron_status(net, &cache);
        unr_sum += unr;
    }
    let n_lip = x.rows.min(8);
    let mut lip_sum = 0.0;
    for i in 0..n_lip {
        lip_sum += crate::lipschitz::interval_lipschitz(net, x.row(i), epsilon.max(1e-6))
            .map(|b| b.max)
            .unwrap_or(f64::NAN);
    }
    (
        unr_sum / n_unr.max(1) as f64,
        lip_sum / n_lip.max(1) as f64,
    )
}

/// Adversarial pre-training: the composite loss without the slope term.
pub fn adversarial_pretrain(
    net: &Network,
    x: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(Network, TrainLog), TrainError> {
    let mut pre_cfg = cfg.clone();
    pre_cfg.slope_mode = SlopeLossMode::Off;
    pre_cfg.prune_ratio = 0.0;
    train_loop(net, x, labels, &pre_cfg, None)
}

/// Post-graft fine-tuning: prunes small weights first when configured, then
/// trains with the full composite loss.
pub fn finetune(
    net: &Network,
    x: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(Network, TrainLog, PruneMask), TrainError> {
    cfg.validate()?;
    let (pruned, mask) = if cfg.prune_ratio > 0.0 {
        small_weight_prune(net, cfg.prune_ratio)
    } else {
        (net.clone(), PruneMask::empty(net))
    };
    let (out, log) = train_loop(&pruned, x, labels, cfg, Some(&mask))?;
    Ok((out, log, mask))
}
