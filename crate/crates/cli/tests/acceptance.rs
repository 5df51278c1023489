//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sheaf_ode::data::{write_window_set, NormScope, TrajectoryWindow};
use sheaf_ode::dynamics::rk4_integrate;
use sheaf_ode::graphs::{generate_small_world, granger_prior, granger_prior_pooled, granger_scores, BrainGraph, GrangerConfig, PriorGraph};
use sheaf_ode::metrics::dtw_normalized;
use sheaf_ode::model::{Ablation, Model, ModelConfig};
use sheaf_ode::neurosim::{bin_and_smooth, sample_perturbation, simulate, simulate_spikes, LifParams};
use sheaf_ode::sheaf::{edge_discrepancy, sheaf_laplacian_apply, AttentionMode, SheafParameters};
use sheaf_ode::synthetic::{
    cv_dataset, evaluation_windows, simulate_pairs, training_windows, EvalProtocol, SeriesPair, WindowConfig,
};
use sheaf_ode::training::{
    context_mean_forecast, copy_last_forecast, cross_validate, score_model, score_windows, train, Method,
    ModelCheckpoint, TrainingConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Each ordered pair is an edge with probability `p`.
fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> BrainGraph {
    let mut edges = Vec::new();
    for s in 0..n {
        for t in 0..n {
            if s != t && rng.random::<f64>() < p {
                edges.push((s, t));
            }
        }
    }
    BrainGraph::new(n, edges).unwrap()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

fn dense_laplacian(graph: &BrainGraph) -> Array2<f64> {
    let n = graph.n_nodes;
    let mut lap = Array2::zeros((n, n));
    for &(s, t) in &graph.edges {
        lap[[s, s]] += 1.0;
        lap[[t, t]] += 1.0;
        lap[[s, t]] -= 1.0;
        lap[[t, s]] -= 1.0;
    }
    lap
}

fn sheaf_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=20);
        let d = rng.random_range(1..=8);
        let graph = random_graph(&mut rng, n, 0.25);
        let h = uniform_matrix(&mut rng, n, d);
        let params = SheafParameters::identity(graph.n_edges(), d, d, 1, false);
        let got = sheaf_laplacian_apply(&h, &params, &graph).unwrap();
        let want = dense_laplacian(&graph).dot(&h) * 0.5;
        worst = worst.max(max_abs_diff(&got, &want));
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-6 && elapsed < Duration::from_secs(1),
        format!("max |L_F H - L H / 2| = {worst:.2e} (tol 1e-6) on 50 graphs in {elapsed:.2?} (limit 1 s)"),
    )
}

// ---------------------------------------------------------------- 2

fn attention_free_psd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut min_quad = f64::INFINITY;
    let mut worst_gap = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=12);
        let d = rng.random_range(1..=6);
        let m = rng.random_range(1..=6);
        let graph = random_graph(&mut rng, n, 0.3);
        let e = graph.n_edges();
        let mut params = SheafParameters::identity(e, d, m, 1, false);
        params.rho_src = Array3::from_shape_simple_fn((e, m, d), || rng.random_range(-1.0..1.0));
        params.rho_dst = Array3::from_shape_simple_fn((e, m, d), || rng.random_range(-1.0..1.0));
        params.attention = Array1::from_shape_simple_fn(m, || rng.random_range(-2.0..2.0));
        params.attention_mode = AttentionMode::Fixed(1.0);
        let h = uniform_matrix(&mut rng, n, d);
        let lh = sheaf_laplacian_apply(&h, &params, &graph).unwrap();
        let quad = (&h * &lh).sum();
        let energy: f64 = graph
            .edges
            .iter()
            .map(|&edge| edge_discrepancy(edge, &h, &params, &graph).unwrap().delta.mapv(|v| v * v).sum())
            .sum();
        min_quad = min_quad.min(quad);
        worst_gap = worst_gap.max((quad - energy).abs());
    }
    outcome(
        min_quad >= -1e-9 && worst_gap <= 1e-6,
        format!("min quadratic form {min_quad:.3e} (>= -1e-9), max |form - sum |delta|^2| = {worst_gap:.2e} (tol 1e-6) on 100 instances"),
    )
}

// ---------------------------------------------------------------- 3

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let n = 4;
    let mut scores = Array2::zeros((n, n));
    for s in 0..n {
        for t in 0..n {
            if s != t {
                scores[[s, t]] = rng.random_range(0.1..1.0);
            }
        }
    }
    let prior = PriorGraph::from_scores(scores.view(), 3, 2).unwrap();
    let config = ModelConfig {
        hidden_dim: 3,
        map_dim: 3,
        mlp_width: 6,
        rounds: 2,
        ablation: Ablation::Full,
        ..ModelConfig::default()
    };
    let mut model = Model::init(&config, &prior, 17).unwrap();
    model.params.sheaf.rho_src.mapv_inplace(|v| v + 0.3 * normal(&mut rng));
    model.params.sheaf.rho_dst.mapv_inplace(|v| v + 0.3 * normal(&mut rng));
    model.params.sheaf.attention.mapv_inplace(|_| normal(&mut rng));
    let context = Array2::from_shape_simple_fn((n, 5), || normal(&mut rng));
    let target = Array2::from_shape_simple_fn((n, 3), || normal(&mut rng));
    let (l1, l2) = (0.05, 0.1);

    let (_, grads) = model.loss_and_grad(context.view(), target.view(), l1, l2).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(<[f64]>::to_vec).collect();
    let step = 1e-5;
    let mut probe = model.clone();
    let (mut total, mut good) = (0usize, 0usize);
    let mut worst = 0.0f64;
    for (ti, tensor) in analytic.iter().enumerate() {
        for (k, &a) in tensor.iter().enumerate() {
            let orig = probe.params.tensors_mut()[ti][k];
            probe.params.tensors_mut()[ti][k] = orig + step;
            let up = probe.loss(context.view(), target.view(), l1, l2).unwrap().total;
            probe.params.tensors_mut()[ti][k] = orig - step;
            let down = probe.loss(context.view(), target.view(), l1, l2).unwrap().total;
            probe.params.tensors_mut()[ti][k] = orig;
            let fd = (up - down) / (2.0 * step);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
            total += 1;
            if rel <= 1e-3 {
                good += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let frac = good as f64 / total as f64;
    outcome(
        frac >= 0.99 && elapsed < Duration::from_secs(30),
        format!(
            "{good}/{total} parameters within rel 1e-3 ({:.2}%, need 99%), worst rel {worst:.2e}, {elapsed:.2?} (limit 30 s)",
            100.0 * frac
        ),
    )
}

// ---------------------------------------------------------------- 4

fn rk4_order() -> Outcome {
    let decay = |_: f64, x: &[f64], dx: &mut [f64]| dx[0] = -x[0];
    let err = |dt: f64| {
        let tr = rk4_integrate(&[1.0], decay, 0.0, 1.0, dt).unwrap();
        (tr.values[[0, tr.values.ncols() - 1]] - (-1.0f64).exp()).abs()
    };
    let ratio = err(0.1) / err(0.05);
    let single = rk4_integrate(&[1.0], decay, 0.0, 1.0, 1.0).unwrap().values[[0, 0]];
    outcome(
        ratio >= 14.0 && single == 0.375,
        format!("error ratio dt 0.1 -> 0.05 = {ratio:.3} (>= 14), single step = {single}"),
    )
}

// ---------------------------------------------------------------- 5

const GRID: usize = 6;

/// Every monotone path through an `la x lb` grid as a cell bitmask plus its
/// cell count.
fn all_paths(la: usize, lb: usize) -> Vec<(u64, u32)> {
    let mut out = Vec::new();
    let mut stack = vec![(0usize, 0usize, 1u64, 1u32)];
    while let Some((u, v, mask, cells)) = stack.pop() {
        if u == la - 1 && v == lb - 1 {
            out.push((mask, cells));
            continue;
        }
        for (du, dv) in [(1, 0), (0, 1), (1, 1)] {
            let (nu, nv) = (u + du, v + dv);
            if nu < la && nv < lb {
                stack.push((nu, nv, mask | 1 << (nu * GRID + nv), cells + 1));
            }
        }
    }
    out
}

fn ternary_sequences(len: usize) -> Vec<Vec<f64>> {
    (0..3usize.pow(len as u32))
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let v = (code % 3) as f64 - 1.0;
                    code /= 3;
                    v
                })
                .collect()
        })
        .collect()
}

fn dtw_oracle() -> Outcome {
    let seqs: Vec<Vec<Vec<f64>>> = (1..=GRID).map(ternary_sequences).collect();
    let mut pairs = 0usize;
    let mut mismatches = 0usize;
    for la in 1..=GRID {
        for lb in 1..=GRID {
            let paths = all_paths(la, lb);
            for a in &seqs[la - 1] {
                for b in &seqs[lb - 1] {
                    let (mut ones, mut twos) = (0u64, 0u64);
                    for u in 0..la {
                        for v in 0..lb {
                            let bit = 1u64 << (u * GRID + v);
                            match (a[u] - b[v]).abs() as u32 {
                                1 => ones |= bit,
                                2 => twos |= bit,
                                _ => {}
                            }
                        }
                    }
                    let (cost, cells) = paths
                        .iter()
                        .map(|&(p, c)| ((p & ones).count_ones() + 2 * (p & twos).count_ones(), c))
                        .min()
                        .unwrap();
                    let want = cost as f64 / cells as f64;
                    if dtw_normalized(a, b).unwrap() != want {
                        mismatches += 1;
                    }
                    pairs += 1;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut identity_fail = 0;
    let mut worst_asym = 0.0f64;
    for _ in 0..1000 {
        let la = rng.random_range(1..=20);
        let lb = rng.random_range(1..=20);
        let a: Vec<f64> = (0..la).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..lb).map(|_| rng.random_range(-2.0..2.0)).collect();
        if dtw_normalized(&a, &a).unwrap() != 0.0 {
            identity_fail += 1;
        }
        worst_asym = worst_asym.max((dtw_normalized(&a, &b).unwrap() - dtw_normalized(&b, &a).unwrap()).abs());
    }
    outcome(
        mismatches == 0 && identity_fail == 0 && worst_asym <= 1e-12,
        format!(
            "{mismatches} mismatches over {pairs} exhaustive pairs, {identity_fail} identity failures, max asymmetry {worst_asym:.1e} (tol 1e-12) on 1000 random pairs"
        ),
    )
}

// ---------------------------------------------------------------- 6

/// Ordinary least squares residual sum of squares through an SVD solve.
fn ols_rss(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let beta = x.clone().svd(true, true).solve(y, 1e-12).unwrap();
    (y - x * beta).norm_squared()
}

/// Log RSS ratio of `x_dst` regressed on its own lags versus its own lags
/// plus those of `x_src`, on the raw series.
fn oracle_score(x: &Array2<f64>, src: usize, dst: usize, p: usize) -> f64 {
    let t = x.ncols();
    let rows = t - p;
    let y = DVector::from_iterator(rows, (p..t).map(|s| x[[dst, s]]));
    let design = |with_src: bool| {
        let cols = 1 + p + if with_src { p } else { 0 };
        DMatrix::from_fn(rows, cols, |r, c| {
            let s = r + p;
            match c {
                0 => 1.0,
                c if c <= p => x[[dst, s - c]],
                c => x[[src, s - (c - p)]],
            }
        })
    };
    (ols_rss(&design(false), &y) / ols_rss(&design(true), &y)).ln().max(0.0)
}

fn driven_var(rng: &mut ChaCha8Rng, t: usize) -> Array2<f64> {
    let burn = 50;
    let mut x = Array2::zeros((2, t + burn));
    for s in 0..t + burn {
        x[[1, s]] = normal(rng);
        let drive = if s > 0 { 0.9 * x[[1, s - 1]] } else { 0.0 };
        x[[0, s]] = drive + normal(rng);
    }
    x.slice(ndarray::s![.., burn..]).to_owned()
}

fn granger_direction() -> Outcome {
    let p = 3;
    let mut wins = 0;
    let mut oracle_wins = 0;
    let mut worst_gap = 0.0f64;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + trial);
        let x = driven_var(&mut rng, 200);
        let scores = granger_scores(x.view(), p, 1e-6).unwrap();
        if scores[[1, 0]] > scores[[0, 1]] {
            wins += 1;
        }
        let (fwd, rev) = (oracle_score(&x, 1, 0, p), oracle_score(&x, 0, 1, p));
        if fwd > rev {
            oracle_wins += 1;
        }
        worst_gap = worst_gap.max((fwd - scores[[1, 0]]).abs()).max((rev - scores[[0, 1]]).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6500);
    let mut degree_violations = 0;
    for _ in 0..50 {
        let n = rng.random_range(2..=12);
        let k = rng.random_range(1..=5);
        let mut x = Array2::from_shape_simple_fn((n, 60), || normal(&mut rng));
        for s in 1..60 {
            for i in 1..n {
                let v = x[[i, s]] + 0.8 * x[[i - 1, s - 1]];
                x[[i, s]] = v;
            }
        }
        let single = granger_prior(x.view(), p, k, 1e-6).unwrap();
        let blocks = [x.slice(ndarray::s![.., ..30]), x.slice(ndarray::s![.., 30..])];
        let pooled = granger_prior_pooled(blocks, &GrangerConfig { lag_order: p, top_k: k, ridge: 1e-6 }).unwrap();
        degree_violations += single.in_degrees().iter().chain(pooled.in_degrees().iter()).filter(|&&d| d > k).count();
    }
    outcome(
        wins >= 95 && oracle_wins >= 95 && worst_gap <= 1e-5 && degree_violations == 0,
        format!(
            "driver outranks reverse in {wins}/100 (oracle {oracle_wins}/100), max |score - oracle| = {worst_gap:.1e} (tol 1e-5), {degree_violations} in-degree violations over 100 priors"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn simulator_contracts() -> Outcome {
    let graph = generate_small_world(100, 8, 0.1, 7).unwrap();
    let params = LifParams::default();
    let mut silenced_ok = 0;
    let mut worst_mass = 0.0f64;
    for trial in 0..100u64 {
        let seed = 7000 + trial;
        let spec = sample_perturbation(params.duration_ms, graph.n_nodes, seed ^ 0xa5a5).unwrap();
        let spikes = simulate_spikes(&graph, &params, seed, Some(&spec)).unwrap();
        let silent_spikes = spikes[spec.neuron].iter().filter(|&&t| spec.contains(t)).count();
        let record = simulate(&graph, &params, seed, Some(spec)).unwrap();
        let inside: Vec<f64> = (0..record.n_bins())
            .filter(|&b| record.bin_edges_ms[b] >= spec.onset_ms && record.bin_edges_ms[b + 1] <= spec.end_ms())
            .map(|b| record.rates[[spec.neuron, b]])
            .collect();
        if silent_spikes == 0 && !inside.is_empty() && inside.iter().all(|&r| r == 0.0) {
            silenced_ok += 1;
        }

        let rates = bin_and_smooth(&spikes, params.duration_ms, params.bin_ms, params.sigma_ms).unwrap();
        for (i, train) in spikes.iter().enumerate() {
            let mass = rates.row(i).sum() * params.bin_ms / 1000.0;
            let count = train.len() as f64;
            worst_mass = worst_mass.max((mass - count).abs() / count.max(1.0));
        }
    }

    let tmp = tempfile::tempdir().unwrap();
    let write = |name: &str, seed: u64| {
        let rec = simulate(&graph, &params, seed, None).unwrap();
        rec.write(tmp.path(), name).unwrap();
        ["rates.csv", "adjacency.csv", "meta.json"]
            .map(|suffix| std::fs::read(tmp.path().join(format!("{name}_{suffix}"))).unwrap())
    };
    let a = write("a", 42);
    let b = write("b", 42);
    let c = write("c", 43);
    let identical = a == b;
    let differs = a[0] != c[0];
    outcome(
        silenced_ok == 100 && worst_mass <= 1e-6 && identical && differs,
        format!(
            "silenced neuron quiet in {silenced_ok}/100, max relative mass error {worst_mass:.1e} (tol 1e-6), same seed byte-identical: {identical}, new seed differs: {differs}"
        ),
    )
}

// ---------------------------------------------------------------- 8-10

/// Shared 10-node dataset: series 0..40 train, 40..45 validate, 45..50 test,
/// 50..70 extra held-out series for the perturbed protocol.
struct Dataset {
    pairs: Vec<SeriesPair>,
    windows: WindowConfig,
    elapsed: Duration,
}

fn dataset() -> Dataset {
    let start = Instant::now();
    let graph = generate_small_world(10, 4, 0.1, 7).unwrap();
    let pairs = simulate_pairs(&graph, &LifParams::default(), 70, 1000).unwrap();
    Dataset {
        pairs,
        windows: WindowConfig::default(),
        elapsed: start.elapsed(),
    }
}

fn collect<F>(pairs: &[SeriesPair], f: F) -> Vec<TrajectoryWindow>
where
    F: Fn(&SeriesPair) -> Vec<TrajectoryWindow>,
{
    pairs.iter().flat_map(f).collect()
}

fn baselines(windows: &[TrajectoryWindow]) -> (f64, f64) {
    let copy = score_windows(windows, |w| Ok(copy_last_forecast(w.context.view(), w.horizon_len()))).unwrap();
    let mean = score_windows(windows, |w| Ok(context_mean_forecast(w.context.view(), w.horizon_len()))).unwrap();
    (copy.mse, mean.mse)
}

fn learning_beats_baselines(data: &Dataset) -> (Outcome, Option<ModelCheckpoint>) {
    let start = Instant::now();
    let w = &data.windows;
    let train_w = collect(&data.pairs[..40], |p| training_windows(p, w).unwrap());
    let val_w = collect(&data.pairs[40..45], |p| training_windows(p, w).unwrap());
    let test_w = collect(&data.pairs[45..50], |p| evaluation_windows(p, w, EvalProtocol::Unperturbed).unwrap());
    let prior = granger_prior_pooled(train_w.iter().map(|w| w.context.view()), &GrangerConfig::default()).unwrap();
    let config = TrainingConfig {
        max_epochs: 60,
        seed: 8,
        ..TrainingConfig::default()
    };
    let trained = train(&train_w, &val_w, &prior, &ModelConfig::default(), &config).unwrap();
    let model_mse = score_model(&trained.checkpoint.model, &test_w).unwrap().mse;
    let (copy, mean) = baselines(&test_w);
    let elapsed = start.elapsed() + data.elapsed;
    let pass = train_w.len() == 200 && model_mse < copy && model_mse < mean && elapsed < Duration::from_secs(600);
    let detail = format!(
        "{} training windows, test MSE model {model_mse:.4} vs copy-last {copy:.4} vs mean {mean:.4} on {} windows, {elapsed:.1?} (limit 600 s)",
        train_w.len(),
        test_w.len()
    );
    (outcome(pass, detail), Some(trained.checkpoint))
}

fn ablation_ordering(data: &Dataset) -> Outcome {
    let start = Instant::now();
    let series = cv_dataset(&data.pairs[..50], &data.windows, EvalProtocol::Perturbed).unwrap();
    let model = ModelConfig {
        hidden_dim: 16,
        map_dim: 16,
        mlp_width: 32,
        ..ModelConfig::default()
    };
    let config = TrainingConfig {
        max_epochs: 40,
        folds: 5,
        seed: 9,
        ..TrainingConfig::default()
    };
    let methods = [
        Method::Model(Ablation::Full),
        Method::Model(Ablation::Graph),
        Method::Model(Ablation::NoLstm),
        Method::CopyLast,
        Method::ContextMean,
    ];
    let report = cross_validate(&series, &GrangerConfig::default(), &model, &config, &methods).unwrap();
    let row = |m| report.row(m).unwrap();
    let full = row(Method::Model(Ablation::Full));
    let mut pass = true;
    let mut parts = vec![format!("full {:.4}±{:.4}", full.mse_mean, full.mse_std)];
    for ablation in [Ablation::Graph, Ablation::NoLstm] {
        let r = row(Method::Model(ablation));
        let strict = full.mse_mean <= r.mse_mean;
        let tie = (full.mse_mean - r.mse_mean).abs() <= full.mse_std.max(r.mse_std);
        pass &= strict || tie;
        let verdict = if strict { "ordered" } else if tie { "tie within 1 std" } else { "violated" };
        parts.push(format!("{} {:.4}±{:.4} ({verdict})", ablation.name(), r.mse_mean, r.mse_std));
    }
    for m in [Method::CopyLast, Method::ContextMean] {
        let r = row(m);
        parts.push(format!("{} {:.4}±{:.4}", r.method, r.mse_mean, r.mse_std));
    }
    let test_series: usize = report.folds.iter().map(|f| f.split.test.len()).sum();
    outcome(
        pass,
        format!("5-fold perturbed-window MSE: {} ({test_series} test series, {:.1?})", parts.join(", "), start.elapsed()),
    )
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sheaf-ode"))
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn perturbation_generalization(data: &Dataset, checkpoint: Option<&ModelCheckpoint>) -> Outcome {
    let Some(clean) = checkpoint else {
        return outcome(false, "no checkpoint from the learning criterion".into());
    };
    let w = &data.windows;
    let perturbed = collect(&data.pairs[45..], |p| evaluation_windows(p, w, EvalProtocol::Perturbed).unwrap());
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let windows_dir = t.join("perturbed");
    write_window_set(&windows_dir, &perturbed, NormScope::ContextOnly).unwrap();
    let clean_dir = t.join("clean");
    std::fs::create_dir_all(&clean_dir).unwrap();
    clean.save(&clean_dir).unwrap();

    let report_dir = t.join("report");
    let out = run_cli(&["perturb-eval", "--checkpoint", path_str(&clean_dir), "--windows", path_str(&windows_dir), "--out", path_str(&report_dir)]);
    let report: serde_json::Value = if out.status.success() {
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap()
    } else {
        serde_json::Value::Null
    };
    let model_mse = report["model"]["mse"].as_f64().unwrap_or(f64::NAN);
    let mean_mse = report["context_mean"]["mse"].as_f64().unwrap_or(f64::NAN);
    let finite = perturbed
        .iter()
        .all(|w| clean.model.forecast(w.context.view(), w.horizon_len()).unwrap().values.iter().all(|v| v.is_finite()));

    // A checkpoint whose training set contains perturbed windows.
    let tiny = ModelConfig {
        hidden_dim: 4,
        map_dim: 4,
        mlp_width: 4,
        ..ModelConfig::default()
    };
    let one_epoch = TrainingConfig {
        max_epochs: 1,
        ..TrainingConfig::default()
    };
    let dirty = train(&perturbed, &[], &clean.model.prior, &tiny, &one_epoch).unwrap().checkpoint;
    let dirty_dir = t.join("dirty");
    std::fs::create_dir_all(&dirty_dir).unwrap();
    dirty.save(&dirty_dir).unwrap();
    let refused = run_cli(&[
        "perturb-eval",
        "--checkpoint",
        path_str(&dirty_dir),
        "--windows",
        path_str(&windows_dir),
        "--out",
        path_str(&t.join("dirty_report")),
    ]);
    let guard = refused.status.code() == Some(6) && !t.join("dirty_report").join("report.json").exists();
    let clean_sources = clean.perturbed_sources.is_empty();
    outcome(
        out.status.success() && finite && model_mse < mean_mse && guard && clean_sources,
        format!(
            "perturbed MSE model {model_mse:.4} vs mean {mean_mse:.4} on {} windows, forecasts finite: {finite}, contaminated checkpoint refused with exit {:?}",
            perturbed.len(),
            refused.status.code()
        ),
    )
}

// ---------------------------------------------------------------- 11

/// Least-squares slope of `ln t` against `ln x`.
fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Fastest of several forward passes, in seconds.
fn forward_seconds(model: &Model, context: &Array2<f64>, horizon: usize) -> f64 {
    (0..7)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(model.forecast(context.view(), horizon).unwrap());
            start.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn prior_with_edges(n: usize, edges: &[(usize, usize)]) -> PriorGraph {
    let mut scores = Array2::zeros((n, n));
    for &(s, t) in edges {
        scores[[s, t]] = 1.0;
    }
    PriorGraph::from_scores(scores.view(), 1, n).unwrap()
}

fn complexity_budget() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1100);
    let n = 40;
    let context = Array2::from_shape_simple_fn((n, 2), || normal(&mut rng));

    let ring: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    let horizon_model = Model::init(
        &ModelConfig {
            hidden_dim: 8,
            map_dim: 8,
            mlp_width: 64,
            rounds: 1,
            ..ModelConfig::default()
        },
        &prior_with_edges(n, &ring),
        1,
    )
    .unwrap();
    let horizon_points: Vec<(f64, f64)> = [250, 500, 1000, 2000]
        .iter()
        .map(|&s| (s as f64, forward_seconds(&horizon_model, &context, s)))
        .collect();

    let mut all_edges: Vec<(usize, usize)> =
        (0..n).flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t))).collect();
    for i in (1..all_edges.len()).rev() {
        all_edges.swap(i, rng.random_range(0..=i));
    }
    let edge_config = ModelConfig {
        hidden_dim: 32,
        map_dim: 32,
        mlp_width: 8,
        rounds: 4,
        ..ModelConfig::default()
    };
    let edge_points: Vec<(f64, f64)> = [195, 390, 780, 1560]
        .iter()
        .map(|&e| {
            let model = Model::init(&edge_config, &prior_with_edges(n, &all_edges[..e]), 2).unwrap();
            (e as f64, forward_seconds(&model, &context, 1))
        })
        .collect();

    let s_exp = loglog_slope(&horizon_points);
    let e_exp = loglog_slope(&edge_points);
    let in_range = |x: f64| (0.8..=1.2).contains(&x);
    outcome(
        in_range(s_exp) && in_range(e_exp),
        format!("time exponent in horizon S = {s_exp:.3}, in edge count E = {e_exp:.3} (both in [0.8, 1.2])"),
    )
}

// ----------------------------------------------------------------

fn guarded<F: FnOnce() -> Outcome>(f: F) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    })
}

fn report(results: &mut Vec<bool>, id: usize, name: &str, o: Outcome) {
    println!("{} criterion {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    results.push(o.pass);
}

fn main() {
    let mut results = Vec::new();
    report(&mut results, 1, "sheaf reduction", guarded(sheaf_reduction));
    report(&mut results, 2, "attention-free PSD", guarded(attention_free_psd));
    report(&mut results, 3, "gradient fidelity", guarded(gradient_fidelity));
    report(&mut results, 4, "RK4 order", guarded(rk4_order));
    report(&mut results, 5, "DTW oracle", guarded(dtw_oracle));
    report(&mut results, 6, "Granger direction", guarded(granger_direction));
    report(&mut results, 7, "simulator contracts", guarded(simulator_contracts));

    let data = catch_unwind(dataset).ok();
    let mut checkpoint = None;
    let learning = match &data {
        Some(d) => guarded(|| {
            let (o, ck) = learning_beats_baselines(d);
            checkpoint = ck;
            o
        }),
        None => outcome(false, "dataset simulation failed".into()),
    };
    report(&mut results, 8, "learning beats baselines", learning);
    let ablation = match &data {
        Some(d) => guarded(|| ablation_ordering(d)),
        None => outcome(false, "dataset simulation failed".into()),
    };
    report(&mut results, 9, "ablation ordering", ablation);
    let generalization = match &data {
        Some(d) => guarded(|| perturbation_generalization(d, checkpoint.as_ref())),
        None => outcome(false, "dataset simulation failed".into()),
    };
    report(&mut results, 10, "perturbation generalization", generalization);
    report(&mut results, 11, "complexity budget", guarded(complexity_budget));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
