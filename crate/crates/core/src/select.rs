//! Instability and weighted-interval scores over a calibration set, the
//! backward selection algorithm, and the grafting transform.

use crate::bounds::ibp_batch_pre;
use crate::linalg::Matrix;
use crate::model::{f64_from_string, f64_to_string, ActivationKind, ModelError, Network, NeuronId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("config error: {0}")]
    Config(String),
    #[error("weighted interval score needs a nonempty selected set in the next layer")]
    EmptySelectedNext,
    #[error("graft target out of range or not graftable: layer {layer} index {index}")]
    BadGraftTarget { layer: usize, index: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-neuron instability counts and weighted-interval scores over one
/// calibration set.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub s_u: BTreeMap<NeuronId, u32>,
    pub s_wi: BTreeMap<NeuronId, f64>,
    pub calibration_size: usize,
}

/// Streamed per-layer statistics: instability counts and the maximum
/// pre-activation interval width per neuron over the calibration set.
#[derive(Debug, Clone)]
pub struct LayerStats {
    pub s_u: Vec<Vec<u32>>,
    pub max_width: Vec<Vec<f64>>,
    pub calibration_size: usize,
}

/// One pass over the calibration set collecting s_u counts and max widths
/// for every hidden neuron.
pub fn layer_stats(net: &Network, calibration: &Matrix, epsilon: f64) -> LayerStats {
    let hidden = net.hidden_layer_count();
    let mut s_u: Vec<Vec<u32>> = (0..hidden)
        .map(|l| vec![0; net.layers[l].out_dim()])
        .collect();
    let mut max_width: Vec<Vec<f64>> = (0..hidden)
        .map(|l| vec![0.0; net.layers[l].out_dim()])
        .collect();
    let pre = ibp_batch_pre(net, calibration, epsilon);
    for l in 0..hidden {
        let (lo, hi) = &pre[l];
        let acts = &net.layers[l].activations;
        for i in 0..lo.rows {
            for j in 0..lo.cols {
                let (lb, ub) = (lo.get(i, j), hi.get(i, j));
                if matches!(acts[j], ActivationKind::Relu) && lb < 0.0 && ub > 0.0 {
                    s_u[l][j] += 1;
                }
                let w = (ub - lb).abs();
                if w > max_width[l][j] {
                    max_width[l][j] = w;
                }
            }
        }
    }
    LayerStats {
        s_u,
        max_width,
        calibration_size: calibration.rows,
    }
}

/// Instability score: for each hidden neuron, the number of calibration
/// inputs whose bounds straddle zero strictly.
pub fn instability_score(net: &Network, calibration: &Matrix, epsilon: f64) -> Vec<Vec<u32>> {
    assert!(calibration.rows > 0, "calibration set must be nonempty");
    layer_stats(net, calibration, epsilon).s_u
}

/// Weighted interval score for layer `layer` against the selected neuron set
/// in layer `layer`+1: max over inputs and selected next-layer neurons of
/// |w|·(ub−lb).
pub fn weighted_interval_score(
    net: &Network,
    calibration: &Matrix,
    epsilon: f64,
    layer: usize,
    selected_next: &[usize],
) -> Result<Vec<f64>, SelectError> {
    if selected_next.is_empty() {
        return Err(SelectError::EmptySelectedNext);
    }
    let stats = layer_stats(net, calibration, epsilon);
    Ok(wi_from_stats(net, &stats, layer, selected_next))
}

/// s_wi(j) = (max over selected k of |W[k][j]|) · (max over inputs of the
/// width). The two maxima are independent and nonnegative, so this equals
/// the max over all (input, k) pairs of the product, bit for bit.
fn wi_from_stats(
    net: &Network,
    stats: &LayerStats,
    layer: usize,
    selected_next: &[usize],
) -> Vec<f64> {
    let w_next = &net.layers[layer + 1].weights;
    let dim = net.layers[layer].out_dim();
    (0..dim)
        .map(|j| {
            let mut wmax = 0.0_f64;
            for &k in selected_next {
                wmax = wmax.max(w_next.get(k, j).abs());
            }
            wmax * stats.max_width[layer][j]
        })
        .collect()
}

/// Selection ratios and graft initialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Fraction of all hidden neurons kept as the globally-unstable pool.
    pub pool_ratio: f64,
    /// Fraction of a layer selected by weighted interval score.
    pub influential_ratio: f64,
    /// Retention fraction for the last hidden layer when its pool covers it.
    pub last_layer_retain: f64,
    /// Per-layer grafting budget as a fraction of the layer width.
    pub graft_ratio: f64,
    /// Apply the last-layer retention unconditionally.
    pub retain_always: bool,
    pub init_slope: f64,
    pub init_intercept: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            pool_ratio: 0.8,
            influential_ratio: 0.15,
            last_layer_retain: 0.7,
            graft_ratio: 0.5,
            retain_always: false,
            init_slope: 0.4,
            init_intercept: 0.0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        for (name, v) in [
            ("pool_ratio", self.pool_ratio),
            ("influential_ratio", self.influential_ratio),
            ("last_layer_retain", self.last_layer_retain),
            ("graft_ratio", self.graft_ratio),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(SelectError::Config(format!(
                    "{name} must lie in (0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Selected neurons per layer with their graft parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraftSet {
    pub layers: BTreeMap<usize, LayerGraft>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraft {
    pub indices: Vec<usize>,
    pub slopes: Vec<f64>,
    pub intercepts: Vec<f64>,
}

impl GraftSet {
    pub fn is_empty(&self) -> bool {
        self.layers.values().all(|l| l.indices.is_empty())
    }

    pub fn total_selected(&self) -> usize {
        self.layers.values().map(|l| l.indices.len()).sum()
    }

    pub fn from_indices(selected: &BTreeMap<usize, Vec<usize>>, slope: f64, intercept: f64) -> Self {
        let layers = selected
            .iter()
            .map(|(&l, idx)| {
                let mut indices = idx.clone();
                indices.sort_unstable();
                let n = indices.len();
                (
                    l,
                    LayerGraft {
                        indices,
                        slopes: vec![slope; n],
                        intercepts: vec![intercept; n],
                    },
                )
            })
            .collect();
        GraftSet { layers }
    }
}

/// Backward selection: seed the last hidden layer from the global pool, then
/// walk earlier layers ranking influence against the already-selected set.
pub fn backward_select(
    net: &Network,
    calibration: &Matrix,
    epsilon: f64,
    cfg: &SelectionConfig,
) -> Result<GraftSet, SelectError> {
    cfg.validate()?;
    let hidden = net.hidden_layer_count();
    if hidden < 2 {
        return Err(SelectError::Config(
            "backward selection needs at least 2 hidden layers".into(),
        ));
    }
    let stats = layer_stats(net, calibration, epsilon);
    let total_hidden: usize = (0..hidden).map(|l| net.layers[l].out_dim()).sum();

    // Global pool: rank every hidden neuron by s_u (ties by layer, then
    // index), keep the top pool_ratio of the count, and drop never-unstable
    // neurons.
    let mut ranked: Vec<(usize, usize, u32)> = Vec::with_capacity(total_hidden);
    for (l, counts) in stats.s_u.iter().enumerate() {
        for (j, &c) in counts.iter().enumerate() {
            ranked.push((l, j, c));
        }
    }
    ranked.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let pool_count = (cfg.pool_ratio * total_hidden as f64).floor() as usize;
    let mut pool: Vec<Vec<usize>> = vec![Vec::new(); hidden];
    for &(l, j, c) in ranked.iter().take(pool_count) {
        if c > 0 {
            pool[l].push(j);
        }
    }
    for p in &mut pool {
        p.sort_unstable();
    }

    let mut selected: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let last = hidden - 1;

    // Last hidden layer: the pool itself, with optional retention by s_u.
    let last_dim = net.layers[last].out_dim();
    let retain = cfg.retain_always || pool[last].len() == last_dim;
    let mut last_sel = pool[last].clone();
    if retain && !last_sel.is_empty() {
        let keep = ((cfg.last_layer_retain * last_dim as f64).floor() as usize).max(1);
        let mut by_su: Vec<usize> = last_sel.clone();
        by_su.sort_by(|&a, &b| stats.s_u[last][b].cmp(&stats.s_u[last][a]).then(a.cmp(&b)));
        by_su.truncate(keep);
        by_su.sort_unstable();
        last_sel = by_su;
    }
    selected.insert(last, last_sel);

    // Earlier layers, in descending order.
    for l in (0..last).rev() {
        let dim = net.layers[l].out_dim();
        let next_sel = &selected[&(l + 1)];
        let s_wi: Vec<f64> = if next_sel.is_empty() {
            vec![0.0; dim]
        } else {
            wi_from_stats(net, &stats, l, next_sel)
        };

        let budget = (cfg.graft_ratio * dim as f64).floor() as usize;
        let mut chosen: Vec<usize> = Vec::new();

        // Top influential_ratio of the layer by s_wi, drawn from the pool.
        if !pool[l].is_empty() {
            let k_infl = ((cfg.influential_ratio * dim as f64).floor() as usize).max(1);
            let mut by_wi = pool[l].clone();
            by_wi.sort_by(|&a, &b| {
                s_wi[b].partial_cmp(&s_wi[a]).expect("finite scores").then(a.cmp(&b))
            });
            by_wi.truncate(k_infl);
            chosen.extend(by_wi);
        }

        // Fill the remaining budget with the most unstable neurons.
        if chosen.len() < budget {
            let mut rest: Vec<usize> = (0..dim)
                .filter(|j| stats.s_u[l][*j] > 0 && !chosen.contains(j))
                .collect();
            rest.sort_by(|&a, &b| stats.s_u[l][b].cmp(&stats.s_u[l][a]).then(a.cmp(&b)));
            rest.truncate(budget - chosen.len());
            chosen.extend(rest);
        } else {
            chosen.truncate(budget.max(1).min(chosen.len()));
        }
        chosen.sort_unstable();
        chosen.dedup();
        selected.insert(l, chosen);
    }

    Ok(GraftSet::from_indices(
        &selected,
        cfg.init_slope,
        cfg.init_intercept,
    ))
}

/// Score table assembled from one streamed pass (s_wi against the full next
/// layer; the backward-coupled variant lives in [`backward_select`]).
pub fn score_table(net: &Network, calibration: &Matrix, epsilon: f64) -> ScoreTable {
    let stats = layer_stats(net, calibration, epsilon);
    let hidden = net.hidden_layer_count();
    let mut s_u = BTreeMap::new();
    let mut s_wi = BTreeMap::new();
    for l in 0..hidden {
        let all_next: Vec<usize> = (0..net.layers[l + 1].out_dim()).collect();
        let wi = wi_from_stats(net, &stats, l, &all_next);
        for j in 0..net.layers[l].out_dim() {
            let id = NeuronId { layer: l, index: j };
            s_u.insert(id, stats.s_u[l][j]);
            s_wi.insert(id, wi[j]);
        }
    }
    ScoreTable {
        s_u,
        s_wi,
        calibration_size: stats.calibration_size,
    }
}

/// Replace selected neurons' activations with grafted linear functions.
/// Only hidden ReLU (or already grafted) neurons are valid targets.
pub fn apply_graft(net: &Network, graft: &GraftSet) -> Result<Network, SelectError> {
    let hidden = net.hidden_layer_count();
    let mut out = net.clone();
    for (&layer, lg) in &graft.layers {
        if layer >= hidden {
            return Err(SelectError::BadGraftTarget {
                layer,
                index: lg.indices.first().copied().unwrap_or(0),
            });
        }
        for (pos, &index) in lg.indices.iter().enumerate() {
            if index >= net.layers[layer].out_dim()
                || matches!(net.layers[layer].activations[index], ActivationKind::Identity)
            {
                return Err(SelectError::BadGraftTarget { layer, index });
            }
            out.layers[layer].activations[index] = ActivationKind::GraftedLinear {
                slope: lg.slopes[pos],
                intercept: lg.intercepts[pos],
            };
        }
    }
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSON artifacts.

#[derive(Serialize, Deserialize)]
struct GraftSetFile {
    format: u32,
    layers: Vec<GraftLayerFile>,
}

#[derive(Serialize, Deserialize)]
struct GraftLayerFile {
    layer: usize,
    indices: Vec<usize>,
    slopes: Vec<String>,
    intercepts: Vec<String>,
}

impl GraftSet {
    pub fn to_json(&self) -> String {
        let file = GraftSetFile {
            format: 1,
            layers: self
                .layers
                .iter()
                .map(|(&layer, lg)| GraftLayerFile {
                    layer,
                    indices: lg.indices.clone(),
                    slopes: lg.slopes.iter().map(|&v| f64_to_string(v)).collect(),
                    intercepts: lg.intercepts.iter().map(|&v| f64_to_string(v)).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("graftset serialization")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let file: GraftSetFile =
            serde_json::from_str(s).map_err(|e| ModelError::Parse(e.to_string()))?;
        if file.format != 1 {
            return Err(ModelError::Parse(format!(
                "format: unsupported version {}",
                file.format
            )));
        }
        let mut layers = BTreeMap::new();
        for lf in file.layers {
            if lf.slopes.len() != lf.indices.len() || lf.intercepts.len() != lf.indices.len() {
                return Err(ModelError::Validation(format!(
                    "graft layer {}: indices/slopes/intercepts lengths differ",
                    lf.layer
                )));
            }
            layers.insert(
                lf.layer,
                LayerGraft {
                    indices: lf.indices,
                    slopes: lf
                        .slopes
                        .iter()
                        .map(|s| f64_from_string(s, "graft slope"))
                        .collect::<Result<_, _>>()?,
                    intercepts: lf
                        .intercepts
                        .iter()
                        .map(|s| f64_from_string(s, "graft intercept"))
                        .collect::<Result<_, _>>()?,
                },
            );
        }
        Ok(GraftSet { layers })
    }
}

#[derive(Serialize, Deserialize)]
struct ScoreFile {
    format: u32,
    calibration_size: usize,
    entries: Vec<ScoreEntry>,
}

#[derive(Serialize, Deserialize)]
struct ScoreEntry {
    layer: usize,
    index: usize,
    s_u: u32,
    s_wi: String,
}

impl ScoreTable {
    pub fn to_json(&self) -> String {
        let entries = self
            .s_u
            .iter()
            .map(|(id, &su)| ScoreEntry {
                layer: id.layer,
                index: id.index,
                s_u: su,
                s_wi: f64_to_string(self.s_wi[id]),
            })
            .collect();
        serde_json::to_string_pretty(&ScoreFile {
            format: 1,
            calibration_size: self.calibration_size,
            entries,
        })
        .expect("score serialization")
    }
}
