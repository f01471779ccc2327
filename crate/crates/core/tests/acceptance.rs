//! Acceptance suite: one test per criterion, each printing a pass/fail line.

use graftcert_core::bounds::{concretize, crown_backward, ibp, unstable_neurons, CrownConfig};
use graftcert_core::data::{make_synthetic, SyntheticKind};
use graftcert_core::linalg::{affine_batch, Matrix};
use graftcert_core::lipschitz::interval_lipschitz;
use graftcert_core::model::{relu_mlp, ActivationKind, Network, NeuronId};
use graftcert_core::rng::stream_rng;
use graftcert_core::select::{apply_graft, backward_select, layer_stats, SelectionConfig};
use graftcert_core::tape::grad;
use graftcert_core::train::{
    adversarial_pretrain, build_total_loss, finetune, pgd_attack, slope_loss, total_loss_value,
    PgdConfig, SlopeLossMode, TrainConfig,
};
use graftcert_core::verify::{
    certify_bab, evaluate_suite, exhaustive_oracle, BabConfig, EvalConfig, Verdict,
};
use rand::Rng;
use std::time::Instant;

fn random_net(rng: &mut impl Rng, dims: &[usize], scale: f64) -> Network {
    let mut params = Vec::new();
    for w in dims.windows(2) {
        let weights = Matrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-scale..scale));
        let bias = (0..w[1]).map(|_| rng.gen_range(-0.3..0.3)).collect();
        params.push((weights, bias));
    }
    relu_mlp(dims[0], params)
}

fn graft_subset(net: &Network, subset: &[NeuronId], gamma: f64) -> Network {
    let mut out = net.clone();
    for id in subset {
        out.layers[id.layer].activations[id.index] = ActivationKind::GraftedLinear {
            slope: gamma,
            intercept: 0.0,
        };
    }
    out
}

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "[{}] criterion {}: {}",
        if pass { "PASS" } else { "FAIL" },
        criterion,
        detail
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_1_lemma_suite() {
    let start = Instant::now();
    let mut violations = 0usize;
    let mut checks = 0usize;
    for net_idx in 0..100u64 {
        let mut rng = stream_rng(1000 + net_idx, "acc1", 0);
        let n_hidden = rng.gen_range(2..=4);
        let mut dims = vec![rng.gen_range(2..=4)];
        for _ in 0..n_hidden {
            dims.push(rng.gen_range(4..=16));
        }
        dims.push(rng.gen_range(2..=4));
        let net = random_net(&mut rng, &dims, 0.8);
        for _ in 0..10 {
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eps = [0.05, 0.1, 0.2][rng.gen_range(0..3)];
            let original = interval_lipschitz(&net, &x, eps).unwrap().max;
            let unstable = unstable_neurons(&net, &ibp(&net, &x, eps));
            let subset: Vec<NeuronId> = unstable
                .iter()
                .copied()
                .filter(|_| rng.gen_bool(0.5))
                .collect();
            for gamma in [0.0, 0.4, 1.0] {
                let grafted = graft_subset(&net, &subset, gamma);
                let after = interval_lipschitz(&grafted, &x, eps).unwrap().max;
                checks += 1;
                if after > original * (1.0 + 1e-9) {
                    violations += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "1 (Lemma 1 suite)",
        violations == 0 && elapsed < 60.0,
        &format!("{checks} checks, {violations} violations, {elapsed:.1}s"),
    );
}

fn combinations(items: &[NeuronId], k: usize) -> Vec<Vec<NeuronId>> {
    let mut out = Vec::new();
    let n = items.len();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        // Advance the combination.
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[test]
fn criterion_2_theorem_suite() {
    let start = Instant::now();
    let mut violations = 0usize;
    let mut checks = 0usize;
    for net_idx in 0..50u64 {
        let mut rng = stream_rng(2000 + net_idx, "acc2", 0);
        // One hidden layer, width ≤ 10, single logit: the regime where the
        // top-k claim is exact.
        let dims = [rng.gen_range(2..=4), rng.gen_range(4..=10), 1];
        let net = random_net(&mut rng, &dims, 0.9);
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let eps = 0.15;
        let cache = ibp(&net, &x, eps);
        let unstable = unstable_neurons(&net, &cache);
        if unstable.is_empty() {
            continue;
        }
        // Weighted-interval score at the anchor against the single output.
        let (lb, ub) = cache.layer_bounds(0);
        let score = |id: &NeuronId| {
            net.layers[1].weights.get(0, id.index).abs() * (ub[id.index] - lb[id.index])
        };
        for k in 1..=3usize.min(unstable.len()) {
            let mut ranked = unstable.clone();
            ranked.sort_by(|a, b| {
                score(b)
                    .partial_cmp(&score(a))
                    .unwrap()
                    .then(a.index.cmp(&b.index))
            });
            let top_k: Vec<NeuronId> = ranked[..k].to_vec();
            for gamma in [0.0, 0.4, 1.0] {
                let lip_top = interval_lipschitz(&graft_subset(&net, &top_k, gamma), &x, eps)
                    .unwrap()
                    .max;
                for other in combinations(&unstable, k) {
                    let lip_other =
                        interval_lipschitz(&graft_subset(&net, &other, gamma), &x, eps)
                            .unwrap()
                            .max;
                    checks += 1;
                    if lip_top > lip_other + 1e-9 {
                        violations += 1;
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "2 (Theorem 1 suite)",
        violations == 0 && elapsed < 120.0 && checks > 0,
        &format!("{checks} subset comparisons, {violations} violations, {elapsed:.1}s"),
    );
}

/// Forward pass of a batch keeping every layer's pre-activations.
fn forward_batch_pre(net: &Network, x: &Matrix) -> Vec<Matrix> {
    let mut h = x.clone();
    let mut out = Vec::new();
    for layer in &net.layers {
        let z = affine_batch(&layer.weights, &layer.bias, &h);
        let mut post = z.clone();
        for i in 0..post.rows {
            let row = post.row_mut(i);
            for (v, a) in row.iter_mut().zip(&layer.activations) {
                *v = a.apply(*v);
            }
        }
        out.push(z);
        h = post;
    }
    out
}

#[test]
fn criterion_3_soundness_suite() {
    let mut escapes = 0usize;
    let mut oracle_violations = 0usize;
    let n_points = 10_000usize;
    for net_idx in 0..20u64 {
        let mut rng = stream_rng(3000 + net_idx, "acc3", 0);
        let dims = [2, 4, 4, 2];
        let net = random_net(&mut rng, &dims, 0.8);
        for _ in 0..5 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
            for eps in [0.01, 0.1] {
                let cache = ibp(&net, &x, eps);
                let linb = crown_backward(&net, &cache, CrownConfig::default());
                let (clo, chi) = concretize(&linb, &x, eps);
                // 10⁴ uniform samples in the box.
                let samples = Matrix::from_fn(n_points, 2, |i, j| {
                    let _ = i;
                    x[j] + rng.gen_range(-eps..=eps)
                });
                let pre = forward_batch_pre(&net, &samples);
                for (l, z) in pre.iter().enumerate() {
                    for i in 0..z.rows {
                        for j in 0..z.cols {
                            let v = z.get(i, j);
                            if v < cache.pre_lo[l][j] - 1e-9 || v > cache.pre_hi[l][j] + 1e-9 {
                                escapes += 1;
                            }
                        }
                    }
                }
                let logits = pre.last().unwrap();
                for i in 0..logits.rows {
                    for j in 0..logits.cols {
                        let v = logits.get(i, j);
                        if v < clo[j] - 1e-9 || v > chi[j] + 1e-9 {
                            escapes += 1;
                        }
                    }
                }
                // Exhaustive exact range sits inside both outer boxes.
                let label = net.predict(&x).unwrap();
                let oracle = exhaustive_oracle(&net, &x, label, eps).unwrap();
                let (ilo, ihi) = cache.output_bounds();
                for j in 0..net.output_dim() {
                    if oracle.range_lo[j] < ilo[j] - 1e-9
                        || oracle.range_hi[j] > ihi[j] + 1e-9
                        || oracle.range_lo[j] < clo[j] - 1e-9
                        || oracle.range_hi[j] > chi[j] + 1e-9
                    {
                        oracle_violations += 1;
                    }
                }
            }
        }
    }
    report(
        "3 (soundness suite)",
        escapes == 0 && oracle_violations == 0,
        &format!("{escapes} escapes, {oracle_violations} oracle containment violations"),
    );
}

#[test]
fn criterion_4_oracle_equivalence() {
    let mut instances = 0usize;
    let mut decided = 0usize;
    let mut mismatches = 0usize;
    let mut attack_contradictions = 0usize;
    let mut seed = 0u64;
    while instances < 200 {
        seed += 1;
        let mut rng = stream_rng(4000 + seed, "acc4", 0);
        let dims = [2, rng.gen_range(3..=5), rng.gen_range(3..=4), 2];
        let net = random_net(&mut rng, &dims, 0.9);
        let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.6..0.6)).collect();
        let eps = rng.gen_range(0.02..0.3);
        let cache = ibp(&net, &x, eps);
        if unstable_neurons(&net, &cache).len() > 10 {
            continue;
        }
        let label = net.predict(&x).unwrap();
        instances += 1;
        let oracle = exhaustive_oracle(&net, &x, label, eps).unwrap();
        let bab_cfg = BabConfig {
            max_branches: 4000,
            max_seconds: 30.0,
            ..BabConfig::default()
        };
        let cert = certify_bab(&net, &x, label, eps, &bab_cfg, seed).unwrap();
        if cert.verdict != Verdict::Unknown {
            decided += 1;
            if cert.verdict != oracle.verdict {
                mismatches += 1;
            }
        }
        if cert.verdict == Verdict::Verified {
            // PGD cross-check.
            let pgd = PgdConfig {
                steps: 20,
                step_size: eps / 4.0,
                restarts: 10,
                domain: None,
            };
            let adv = pgd_attack(&net, &x, label, eps, &pgd, seed);
            if net.predict(&adv).unwrap() != label {
                attack_contradictions += 1;
            }
            // 10⁵ random samples.
            let samples = Matrix::from_fn(100_000, 2, |_, j| x[j] + rng.gen_range(-eps..=eps));
            let out = net.forward_batch(&samples).unwrap();
            for i in 0..out.rows {
                if graftcert_core::model::argmax(out.row(i)) != label {
                    attack_contradictions += 1;
                    break;
                }
            }
        }
    }
    report(
        "4 (oracle equivalence)",
        mismatches == 0 && attack_contradictions == 0 && decided == instances,
        &format!(
            "{instances} instances, {decided} decided, {mismatches} verdict mismatches, {attack_contradictions} attack contradictions"
        ),
    );
}

#[test]
fn criterion_5_gradient_checks() {
    let mut checked = 0usize;
    let mut seed = 0u64;
    let h = 1e-5;
    while checked < 50 {
        seed += 1;
        let mut rng = stream_rng(5000 + seed, "acc5", 0);
        let dims = [3, 5, 4, 3];
        let mut params = Vec::new();
        for w in dims.windows(2) {
            let weights = Matrix::from_fn(w[1], w[0], |_, _| {
                rng.gen_range(0.05..0.7) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
            });
            let bias = (0..w[1]).map(|_| rng.gen_range(-0.3..0.3)).collect();
            params.push((weights, bias));
        }
        let mut net = relu_mlp(dims[0], params);
        // Graft a couple of neurons so slope/intercept gradients are covered.
        net.layers[0].activations[1] = ActivationKind::GraftedLinear { slope: 0.4, intercept: 0.0 };
        net.layers[1].activations[2] = ActivationKind::GraftedLinear { slope: 0.7, intercept: 0.1 };

        let xs = Matrix::from_fn(3, dims[0], |_, _| rng.gen_range(-0.8..0.8));
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..dims[3])).collect();
        let eps = 0.1;

        // Non-kink guard: every forward pre-activation and interval bound
        // stays clear of 0, and weights stay clear of 0, over the FD step.
        let margin_ok = {
            let mut ok = true;
            for i in 0..xs.rows {
                let trace = net.forward_trace(xs.row(i)).unwrap();
                for z in &trace.pre {
                    if z.iter().any(|v| v.abs() < 1e-3) {
                        ok = false;
                    }
                }
                let cache = ibp(&net, xs.row(i), eps);
                for l in 0..net.layers.len() {
                    if cache.pre_lo[l].iter().any(|v| v.abs() < 1e-3)
                        || cache.pre_hi[l].iter().any(|v| v.abs() < 1e-3)
                    {
                        ok = false;
                    }
                }
            }
            ok && net
                .layers
                .iter()
                .all(|l| l.weights.data.iter().all(|w| w.abs() > 1e-3))
        };
        if !margin_ok {
            continue;
        }
        checked += 1;

        let cfgs = [
            ("adv-ce", 0.0, 0.0),
            ("slope", 0.05, 0.0),
            ("l1", 0.0, 0.01),
            ("total", 0.05, 0.01),
        ];
        for (name, lambda_slope, lambda_l1) in cfgs {
            let cfg = TrainConfig {
                lambda_slope,
                lambda_l1,
                eps_train: eps,
                slope_mode: if lambda_slope == 0.0 {
                    SlopeLossMode::Off
                } else {
                    SlopeLossMode::Verbatim
                },
                ..TrainConfig::default()
            };
            let (_, analytic) = grad(&net, |tape| {
                build_total_loss(tape, &xs, &labels, &xs, &cfg)
            })
            .unwrap();
            let xs2 = xs.clone();
            let labels2 = labels.clone();
            let cfg2 = cfg.clone();
            let fd = finite_diff(&net, h, move |n| {
                total_loss_value(n, &xs2, &labels2, &xs2, &cfg2).unwrap()
            });
            let rel = max_rel_err(&analytic, &fd, &net);
            assert!(
                rel <= 1e-4,
                "term {name} at point {checked}: rel err {rel}"
            );
        }
    }
    report("5 (gradient checks)", checked == 50, &format!("{checked} non-kink points, all terms within 1e-4"));
}

fn finite_diff<F: Fn(&Network) -> f64>(
    net: &Network,
    h: f64,
    eval: F,
) -> graftcert_core::tape::ParamGrad {
    let mut fd = graftcert_core::tape::ParamGrad::zeros_like(net);
    for l in 0..net.layers.len() {
        for idx in 0..net.layers[l].weights.data.len() {
            let mut plus = net.clone();
            plus.layers[l].weights.data[idx] += h;
            let mut minus = net.clone();
            minus.layers[l].weights.data[idx] -= h;
            fd.weights[l].data[idx] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        for j in 0..net.layers[l].bias.len() {
            let mut plus = net.clone();
            plus.layers[l].bias[j] += h;
            let mut minus = net.clone();
            minus.layers[l].bias[j] -= h;
            fd.biases[l][j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        for j in 0..net.layers[l].out_dim() {
            if let ActivationKind::GraftedLinear { slope, intercept } = net.layers[l].activations[j]
            {
                let mut plus = net.clone();
                plus.layers[l].activations[j] =
                    ActivationKind::GraftedLinear { slope: slope + h, intercept };
                let mut minus = net.clone();
                minus.layers[l].activations[j] =
                    ActivationKind::GraftedLinear { slope: slope - h, intercept };
                fd.slopes[l][j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let mut plus = net.clone();
                plus.layers[l].activations[j] =
                    ActivationKind::GraftedLinear { slope, intercept: intercept + h };
                let mut minus = net.clone();
                minus.layers[l].activations[j] =
                    ActivationKind::GraftedLinear { slope, intercept: intercept - h };
                fd.intercepts[l][j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
        }
    }
    fd
}

fn max_rel_err(
    a: &graftcert_core::tape::ParamGrad,
    b: &graftcert_core::tape::ParamGrad,
    net: &Network,
) -> f64 {
    let mut worst = 0.0_f64;
    let mut upd = |x: f64, y: f64| {
        let denom = x.abs().max(y.abs()).max(1e-6);
        worst = worst.max((x - y).abs() / denom);
    };
    for l in 0..net.layers.len() {
        for (x, y) in a.weights[l].data.iter().zip(&b.weights[l].data) {
            upd(*x, *y);
        }
        for (x, y) in a.biases[l].iter().zip(&b.biases[l]) {
            upd(*x, *y);
        }
        for (j, (x, y)) in a.slopes[l].iter().zip(&b.slopes[l]).enumerate() {
            if net.layers[l].activations[j].is_grafted() {
                upd(*x, *y);
            }
        }
        for (j, (x, y)) in a.intercepts[l].iter().zip(&b.intercepts[l]).enumerate() {
            if net.layers[l].activations[j].is_grafted() {
                upd(*x, *y);
            }
        }
    }
    worst
}

#[test]
fn criterion_6_slope_loss_values() {
    // A single grafted neuron with slope s and no unstable ReLUs makes the
    // slope loss equal the pointwise term value.
    let eval = |s: f64| {
        let mut net = relu_mlp(
            1,
            vec![
                (Matrix::from_rows(&[vec![1.0]]), vec![10.0]),
                (Matrix::from_rows(&[vec![1.0]]), vec![0.0]),
            ],
        );
        net.layers[0].activations[0] = ActivationKind::GraftedLinear { slope: s, intercept: 0.0 };
        let cache = ibp(&net, &[0.0], 0.01);
        slope_loss(&net, &cache, 2.0, SlopeLossMode::Verbatim)
    };
    let f1 = eval(1.0);
    let f_half = eval(0.5);
    let f0 = eval(0.0);
    let ok = f1 == 1.0
        && (f_half - (1.0 - 0.5_f64.tanh())).abs() <= 1e-12
        && (f0 - (1.0 - 2.0_f64.tanh())).abs() <= 1e-12;
    report(
        "6 (slope-loss values)",
        ok,
        &format!("f(1)={f1}, f(0.5)={f_half}, f(0)={f0}"),
    );
}

#[test]
fn criterion_7_pruning_equivalence() {
    let mut max_dev = 0.0_f64;
    for trial in 0..10u64 {
        let mut rng = stream_rng(7000 + trial, "acc7", 0);
        let dims = [3, 6, 5, 2];
        let net = random_net(&mut rng, &dims, 0.9);
        // Graft two neurons with slope 0, intercept 0.
        let targets = [
            NeuronId { layer: 0, index: rng.gen_range(0..6) },
            NeuronId { layer: 1, index: rng.gen_range(0..5) },
        ];
        let grafted = graft_subset(&net, &targets, 0.0);
        let mut zeroed = net.clone();
        for id in &targets {
            let next = id.layer + 1;
            for r in 0..zeroed.layers[next].weights.rows {
                zeroed.layers[next].weights.set(r, id.index, 0.0);
            }
        }
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = grafted.forward(&x).unwrap();
            let b = zeroed.forward(&x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                max_dev = max_dev.max((u - v).abs());
            }
        }
    }
    report(
        "7 (pruning equivalence)",
        max_dev <= 1e-12,
        &format!("1000 random inputs, max abs deviation {max_dev:.2e}"),
    );
}

#[test]
fn criterion_8_score_oracle() {
    let mut exact = true;
    let mut permutation_ok = true;
    for trial in 0..50u64 {
        let mut rng = stream_rng(8000 + trial, "acc8", 0);
        let dims = [3, rng.gen_range(5..=9), rng.gen_range(4..=8), 3];
        let net = random_net(&mut rng, &dims, 0.8);
        let calib = Matrix::from_fn(500, 3, |_, _| rng.gen_range(-1.0..1.0));
        let eps = 0.15;
        let stats = layer_stats(&net, &calib, eps);
        // Two-pass brute force straight from the definitions.
        for l in 0..net.hidden_layer_count() {
            let next: Vec<usize> = (0..net.layers[l + 1].out_dim()).collect();
            let streamed =
                graftcert_core::select::weighted_interval_score(&net, &calib, eps, l, &next)
                    .unwrap();
            let dim = net.layers[l].out_dim();
            let mut brute_su = vec![0u32; dim];
            let mut brute_wi = vec![0.0_f64; dim];
            for i in 0..calib.rows {
                let cache = ibp(&net, calib.row(i), eps);
                let (lb, ub) = cache.layer_bounds(l);
                for j in 0..dim {
                    if lb[j] < 0.0 && ub[j] > 0.0 {
                        brute_su[j] += 1;
                    }
                    for &k in &next {
                        let v =
                            net.layers[l + 1].weights.get(k, j).abs() * (ub[j] - lb[j]).abs();
                        if v > brute_wi[j] {
                            brute_wi[j] = v;
                        }
                    }
                }
            }
            if stats.s_u[l] != brute_su {
                exact = false;
            }
            for j in 0..dim {
                if streamed[j].to_bits() != brute_wi[j].to_bits() {
                    exact = false;
                }
            }
        }
        // Permutation invariance of the full selection.
        let sel_a = backward_select(&net, &calib, eps, &SelectionConfig::default()).unwrap();
        let mut order: Vec<usize> = (0..calib.rows).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let permuted =
            Matrix::from_rows(&order.iter().map(|&i| calib.row(i).to_vec()).collect::<Vec<_>>());
        let sel_b = backward_select(&net, &permuted, eps, &SelectionConfig::default()).unwrap();
        if sel_a != sel_b {
            permutation_ok = false;
        }
    }
    report(
        "8 (score oracle)",
        exact && permutation_ok,
        &format!("50 nets x 500 samples: streamed == brute force: {exact}, permutation-invariant: {permutation_ok}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: end-to-end directional runs.

struct PipelineOutcome {
    sa: f64,
    va: f64,
    unr: f64,
    lip: f64,
}

struct DeskTask {
    name: &'static str,
    kind: SyntheticKind,
    n_train: usize,
    n_test: usize,
    n_eval: usize,
    noise: f64,
    dims: Vec<usize>,
    eps: f64,
    pre_cfg: TrainConfig,
    fine_cfg: TrainConfig,
    select_cfg: SelectionConfig,
}

fn init_net(dims: &[usize], seed: u64) -> Network {
    let mut rng = stream_rng(seed, "init", 0);
    let mut params = Vec::new();
    for w in dims.windows(2) {
        let r = (6.0 / (w[0] + w[1]) as f64).sqrt();
        let weights = Matrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-r..r));
        let bias = vec![0.0; w[1]];
        params.push((weights, bias));
    }
    relu_mlp(dims[0], params)
}

fn measure(
    net: &Network,
    test_x: &Matrix,
    test_labels: &[usize],
    n_eval: usize,
    eps: f64,
    seed: u64,
) -> PipelineOutcome {
    let sa = graftcert_core::train::accuracy(net, test_x, test_labels) * 100.0;
    let n_eval = n_eval.min(test_x.rows);
    let eval_x = Matrix::from_rows(
        &(0..n_eval)
            .map(|i| test_x.row(i).to_vec())
            .collect::<Vec<_>>(),
    );
    let eval_labels: Vec<usize> = test_labels[..n_eval].to_vec();
    let cfg = EvalConfig {
        bab: BabConfig {
            max_branches: 600,
            max_seconds: 10.0,
            ..BabConfig::default()
        },
        seed,
        ..EvalConfig::default()
    };
    let (metrics, _) = evaluate_suite(net, &eval_x, &eval_labels, eps, &cfg);
    let n_anchor = 40.min(test_x.rows);
    let mut lip = 0.0;
    for i in 0..n_anchor {
        lip += interval_lipschitz(net, test_x.row(i), eps).unwrap().max;
    }
    lip /= n_anchor as f64;
    PipelineOutcome {
        sa,
        va: metrics.va,
        unr: metrics.unr,
        lip,
    }
}

fn run_desk_task(task: &DeskTask) -> (PipelineOutcome, PipelineOutcome) {
    let data = make_synthetic(task.kind, task.n_train + task.n_test, task.noise, 11);
    let (test, train) = data.split_calibration(task.n_test, 23);
    let (calib, _) = train.split_calibration(train.len().min(300), 29);

    let net0 = init_net(&task.dims, 31);
    let (baseline, pre_log) =
        adversarial_pretrain(&net0, &train.inputs, &train.labels, &task.pre_cfg).unwrap();
    assert!(!pre_log.aborted, "{}: pretraining diverged", task.name);
    let base = measure(&baseline, &test.inputs, &test.labels, task.n_eval, task.eps, 7);

    let graftset = backward_select(&baseline, &calib.inputs, task.eps, &task.select_cfg).unwrap();
    assert!(
        !graftset.is_empty(),
        "{}: selection picked no neurons",
        task.name
    );
    let grafted = apply_graft(&baseline, &graftset).unwrap();
    let (tuned, fine_log, _) =
        finetune(&grafted, &train.inputs, &train.labels, &task.fine_cfg).unwrap();
    assert!(!fine_log.aborted, "{}: fine-tuning diverged", task.name);
    let ours = measure(&tuned, &test.inputs, &test.labels, task.n_eval, task.eps, 7);
    (base, ours)
}

#[test]
fn criterion_9_end_to_end_directional() {
    let start = Instant::now();
    let moons = DeskTask {
        name: "moons 2-32-32-2",
        kind: SyntheticKind::Moons,
        n_train: 600,
        n_test: 200,
        n_eval: 100,
        noise: 0.08,
        dims: vec![2, 32, 32, 2],
        eps: 0.05,
        pre_cfg: TrainConfig {
            epochs: 40,
            batch_size: 64,
            lr: graftcert_core::train::LrSchedule {
                base: 0.05,
                decay_epochs: vec![25, 35],
                factor: 10.0,
            },
            eps_train: 0.05,
            eps_warmup_epochs: 8,
            pgd: PgdConfig {
                steps: 7,
                step_size: 0.0125,
                restarts: 1,
                domain: Some((0.0, 1.0)),
            },
            lambda_l1: 1e-4,
            prune_ratio: 0.0,
            seed: 71,
            ..TrainConfig::default()
        },
        fine_cfg: TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr: graftcert_core::train::LrSchedule {
                base: 0.02,
                decay_epochs: vec![32, 44],
                factor: 10.0,
            },
            lr_graft: 0.01,
            eps_train: 0.05,
            pgd: PgdConfig {
                steps: 7,
                step_size: 0.0125,
                restarts: 1,
                domain: Some((0.0, 1.0)),
            },
            lambda_slope: 0.05,
            lambda_l1: 1e-4,
            prune_ratio: 0.30,
            seed: 72,
            ..TrainConfig::default()
        },
        select_cfg: SelectionConfig::default(),
    };
    let (base_m, ours_m) = run_desk_task(&moons);

    let digits = DeskTask {
        name: "digits 784-64-64-10",
        kind: SyntheticKind::Digits,
        n_train: 1200,
        n_test: 300,
        n_eval: 60,
        noise: 0.12,
        dims: vec![784, 64, 64, 10],
        eps: 0.1,
        pre_cfg: TrainConfig {
            epochs: 18,
            batch_size: 128,
            lr: graftcert_core::train::LrSchedule {
                base: 0.05,
                decay_epochs: vec![14],
                factor: 10.0,
            },
            eps_train: 0.1,
            eps_warmup_epochs: 8,
            pgd: PgdConfig {
                steps: 5,
                step_size: 0.025,
                restarts: 1,
                domain: Some((0.0, 1.0)),
            },
            lambda_l1: 1e-4,
            prune_ratio: 0.0,
            seed: 73,
            ..TrainConfig::default()
        },
        fine_cfg: TrainConfig {
            epochs: 15,
            batch_size: 128,
            lr: graftcert_core::train::LrSchedule {
                base: 0.01,
                decay_epochs: vec![10, 13],
                factor: 10.0,
            },
            lr_graft: 0.01,
            eps_train: 0.1,
            pgd: PgdConfig {
                steps: 5,
                step_size: 0.025,
                restarts: 1,
                domain: Some((0.0, 1.0)),
            },
            lambda_slope: 0.02,
            lambda_l1: 1e-4,
            prune_ratio: 0.30,
            seed: 74,
            ..TrainConfig::default()
        },
        select_cfg: SelectionConfig::default(),
    };
    let (base_d, ours_d) = run_desk_task(&digits);

    let elapsed = start.elapsed().as_secs_f64();
    let mut ok = true;
    for (name, base, ours) in [
        ("moons", &base_m, &ours_m),
        ("digits", &base_d, &ours_d),
    ] {
        println!(
            "  {name}: baseline SA {:.1} VA {:.1} UNR {:.2} Lip {:.3} -> ours SA {:.1} VA {:.1} UNR {:.2} Lip {:.3}",
            base.sa, base.va, base.unr, base.lip, ours.sa, ours.va, ours.unr, ours.lip
        );
        ok &= ours.lip < base.lip;
        ok &= ours.unr < base.unr || (base.unr == 0.0 && ours.unr == 0.0);
        ok &= ours.va >= base.va;
        ok &= ours.sa >= base.sa - 8.0;
    }
    ok &= elapsed < 900.0;
    report(
        "9 (end-to-end directional)",
        ok,
        &format!("runtime {elapsed:.0}s"),
    );
}

#[test]
fn criterion_10_highest_vs_lowest_swi() {
    // Multi-layer desk instances: top-k against bottom-k by weighted
    // interval score; directional on ≥ 90%.
    let mut desk_success = 0usize;
    let mut desk_total = 0usize;
    let mut trial = 0u64;
    while desk_total < 50 {
        trial += 1;
        let mut rng = stream_rng(10_000 + trial, "acc10", 0);
        let dims = [3, 10, 8, 3];
        let net = random_net(&mut rng, &dims, 0.8);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let eps = 0.15;
        let cache = ibp(&net, &x, eps);
        let layer0: Vec<NeuronId> = unstable_neurons(&net, &cache)
            .into_iter()
            .filter(|id| id.layer == 0)
            .collect();
        if layer0.len() < 4 {
            continue;
        }
        let (lb, ub) = cache.layer_bounds(0);
        let score = |id: &NeuronId| {
            let mut wmax = 0.0_f64;
            for r in 0..net.layers[1].weights.rows {
                wmax = wmax.max(net.layers[1].weights.get(r, id.index).abs());
            }
            wmax * (ub[id.index] - lb[id.index])
        };
        let mut ranked = layer0.clone();
        ranked.sort_by(|a, b| score(b).partial_cmp(&score(a)).unwrap().then(a.index.cmp(&b.index)));
        let k = (ranked.len() / 2).min(3);
        let top: Vec<NeuronId> = ranked[..k].to_vec();
        let bottom: Vec<NeuronId> = ranked[ranked.len() - k..].to_vec();
        let lip_top = interval_lipschitz(&graft_subset(&net, &top, 0.4), &x, eps)
            .unwrap()
            .max;
        let lip_bottom = interval_lipschitz(&graft_subset(&net, &bottom, 0.4), &x, eps)
            .unwrap()
            .max;
        desk_total += 1;
        if lip_top <= lip_bottom + 1e-12 {
            desk_success += 1;
        }
    }

    // One-hidden-layer single-logit instances: exact, must hold on 100%.
    let mut exact_success = 0usize;
    let mut exact_total = 0usize;
    let mut trial = 0u64;
    while exact_total < 50 {
        trial += 1;
        let mut rng = stream_rng(11_000 + trial, "acc10", 1);
        let dims = [3, rng.gen_range(5..=10), 1];
        let net = random_net(&mut rng, &dims, 0.9);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let eps = 0.15;
        let cache = ibp(&net, &x, eps);
        let unstable = unstable_neurons(&net, &cache);
        if unstable.len() < 2 {
            continue;
        }
        let (lb, ub) = cache.layer_bounds(0);
        let score = |id: &NeuronId| {
            net.layers[1].weights.get(0, id.index).abs() * (ub[id.index] - lb[id.index])
        };
        let mut ranked = unstable.clone();
        ranked.sort_by(|a, b| score(b).partial_cmp(&score(a)).unwrap().then(a.index.cmp(&b.index)));
        let k = (ranked.len() / 2).max(1);
        let top: Vec<NeuronId> = ranked[..k].to_vec();
        let bottom: Vec<NeuronId> = ranked[ranked.len() - k..].to_vec();
        let lip_top = interval_lipschitz(&graft_subset(&net, &top, 0.4), &x, eps)
            .unwrap()
            .max;
        let lip_bottom = interval_lipschitz(&graft_subset(&net, &bottom, 0.4), &x, eps)
            .unwrap()
            .max;
        exact_total += 1;
        if lip_top <= lip_bottom + 1e-9 {
            exact_success += 1;
        }
    }

    let desk_rate = desk_success as f64 / desk_total.max(1) as f64;
    let ok = desk_rate >= 0.9 && exact_success == exact_total;
    report(
        "10 (highest vs lowest weighted-interval score)",
        ok,
        &format!(
            "desk {desk_success}/{desk_total} ({:.0}%), one-hidden-layer {exact_success}/{exact_total}",
            100.0 * desk_rate
        ),
    );
}
