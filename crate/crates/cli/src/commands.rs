//! Subcommand implementations. Each one validates its inputs, calls into the
//! engine, writes its outputs and finishes with a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sheaf_ode::data::{read_window_set, write_window_set, NormScope, TrajectoryWindow, WINDOW_MANIFEST};
use sheaf_ode::graphs::{generate_small_world, granger_prior_pooled, PriorGraph};
use sheaf_ode::io::{read_json, read_rates_csv, sha256_file, write_json, write_rates_csv};
use sheaf_ode::metrics::{MetricReport, WindowMetrics};
use sheaf_ode::synthetic::{evaluation_windows, simulate_pairs, training_windows, EvalProtocol};
use sheaf_ode::training::{
    context_mean_forecast, copy_last_forecast, holdout_split, score_model, score_windows, train, ModelCheckpoint,
    CHECKPOINT_BINARY, CHECKPOINT_MANIFEST,
};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one command run. Paths are relative to the input root or
/// the output directory, so identical runs in different places agree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub details: serde_json::Value,
}

fn digest_tree(root: &Path, label: &str) -> Result<Vec<FileDigest>, CliError> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    files
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n != MANIFEST) || p.parent() != Some(root))
        .map(|p| {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            Ok(FileDigest {
                path: format!("{label}/{rel}"),
                sha256: sha256_file(&p)?,
            })
        })
        .collect()
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    if dir.is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let entries = fs::read_dir(dir).map_err(|e| CliError::from_io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| CliError::from_io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn finish(
    out: &Path,
    command: &str,
    cfg: Option<&RunConfig>,
    inputs: &[(&str, &Path)],
    details: serde_json::Value,
) -> Result<RunManifest, CliError> {
    let mut input_digests = Vec::new();
    for (label, path) in inputs {
        input_digests.extend(digest_tree(path, label)?);
    }
    let manifest = RunManifest {
        command: command.into(),
        tool_version: TOOL_VERSION.into(),
        config_sha256: cfg.map(|c| sheaf_ode::io::sha256_hex(c.canonical_json().as_bytes())),
        seed: cfg.map(|c| c.seed),
        inputs: input_digests,
        outputs: digest_tree(out, ".")?,
        details,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    log::info!("{command}: wrote {} files to {}", manifest.outputs.len(), out.display());
    Ok(manifest)
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::from_io(out, e))
}

fn require_dir(path: &Path, marker: &str) -> Result<(), CliError> {
    let m = path.join(marker);
    if !m.is_file() {
        return Err(CliError::Missing(m));
    }
    Ok(())
}

#[derive(Serialize)]
struct SeriesEntry {
    id: String,
    seed: u64,
    perturbation: sheaf_ode::neurosim::PerturbationSpec,
    mean_rate_hz: f64,
}

/// Simulates paired records and writes the split window sets:
/// `windows/{train,val}` (full-window statistics, unperturbed),
/// `windows/test` and `windows/perturbed` (context statistics, test series).
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<RunManifest, CliError> {
    prepare_out(out)?;
    let s = &cfg.simulate;
    let graph = generate_small_world(s.n_nodes, s.k, s.beta, s.graph_seed)?;
    let pairs = simulate_pairs(&graph, &s.lif, s.count, cfg.seed)?;
    let records = out.join("records");
    prepare_out(&records)?;
    for p in &pairs {
        p.unperturbed.write(&records, &format!("{}_unperturbed", p.id))?;
        p.perturbed.write(&records, &format!("{}_perturbed", p.id))?;
    }
    graph.write_csv(&out.join("graph.csv"))?;
    write_json(&out.join("config.json"), cfg)?;

    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let split = holdout_split(&ids, cfg.seed)?;
    write_json(&out.join("split.json"), &split)?;
    let w = &cfg.train.windows;
    let mut sets: BTreeMap<&str, (Vec<TrajectoryWindow>, NormScope)> = BTreeMap::new();
    for p in &pairs {
        if split.train.contains(&p.id) {
            sets.entry("train").or_insert((Vec::new(), NormScope::FullWindow)).0.extend(training_windows(p, w)?);
        } else if split.val.contains(&p.id) {
            sets.entry("val").or_insert((Vec::new(), NormScope::FullWindow)).0.extend(training_windows(p, w)?);
        } else {
            sets.entry("test")
                .or_insert((Vec::new(), NormScope::ContextOnly))
                .0
                .extend(evaluation_windows(p, w, EvalProtocol::Unperturbed)?);
            sets.entry("perturbed")
                .or_insert((Vec::new(), NormScope::ContextOnly))
                .0
                .extend(evaluation_windows(p, w, EvalProtocol::Perturbed)?);
        }
    }
    let mut counts = BTreeMap::new();
    for (name, (windows, scope)) in &sets {
        write_window_set(&out.join("windows").join(name), windows, *scope)?;
        counts.insert(name.to_string(), windows.len());
    }
    let series: Vec<SeriesEntry> = pairs
        .iter()
        .map(|p| SeriesEntry {
            id: p.id.clone(),
            seed: p.unperturbed.seed,
            perturbation: p.spec,
            mean_rate_hz: p.unperturbed.mean_rate_hz(),
        })
        .collect();
    let details = serde_json::json!({
        "count": pairs.len(),
        "n_nodes": graph.n_nodes,
        "n_edges": graph.n_edges(),
        "graph_seed": s.graph_seed,
        "windows": counts,
        "series": series,
    });
    finish(out, "simulate", Some(cfg), &[], details)
}

pub const PRIOR_JSON: &str = "prior.json";

pub fn prior(cfg: &RunConfig, windows_dir: &Path, out: &Path) -> Result<RunManifest, CliError> {
    require_dir(windows_dir, WINDOW_MANIFEST)?;
    let windows = read_window_set(windows_dir)?;
    if let Some(w) = windows.iter().find(|w| w.perturbation_onset_index.is_some()) {
        log::warn!("prior input contains perturbed window {}", w.id());
    }
    prepare_out(out)?;
    let prior = granger_prior_pooled(windows.iter().map(|w| w.context.view()), &cfg.prior)?;
    prior.write_csv(&out.join("prior.csv"))?;
    write_json(&out.join(PRIOR_JSON), &prior)?;
    let details = serde_json::json!({
        "n_windows": windows.len(),
        "n_edges": prior.edges.len(),
        "max_in_degree": prior.in_degrees().into_iter().max().unwrap_or(0),
    });
    finish(out, "prior", Some(cfg), &[("windows", windows_dir)], details)
}

fn read_prior(dir: &Path) -> Result<PriorGraph, CliError> {
    require_dir(dir, PRIOR_JSON)?;
    Ok(read_json(&dir.join(PRIOR_JSON))?)
}

fn check_nodes(windows: &[TrajectoryWindow], n: usize, what: &str) -> Result<(), CliError> {
    match windows.iter().find(|w| w.n_nodes() != n) {
        Some(w) => Err(CliError::Mismatch(format!(
            "window {} has {} nodes, {what} expects {n}",
            w.id(),
            w.n_nodes()
        ))),
        None => Ok(()),
    }
}

pub const CHECKPOINT_DIR: &str = "checkpoint";

pub fn train_cmd(
    cfg: &RunConfig,
    windows_dir: &Path,
    val_dir: Option<&Path>,
    prior_dir: &Path,
    out: &Path,
) -> Result<RunManifest, CliError> {
    require_dir(windows_dir, WINDOW_MANIFEST)?;
    if let Some(v) = val_dir {
        require_dir(v, WINDOW_MANIFEST)?;
    }
    let prior = read_prior(prior_dir)?;
    let train_w = read_window_set(windows_dir)?;
    let val_w = match val_dir {
        Some(v) => read_window_set(v)?,
        None => Vec::new(),
    };
    check_nodes(&train_w, prior.n_nodes, "the prior graph")?;
    check_nodes(&val_w, prior.n_nodes, "the prior graph")?;
    prepare_out(out)?;
    let outcome = train(&train_w, &val_w, &prior, &cfg.model, &cfg.training_config())?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    outcome.checkpoint.save(&ckpt_dir)?;
    let mut log_text = String::new();
    for entry in &outcome.log {
        log_text.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        log_text.push('\n');
    }
    let log_path = out.join("train_log.jsonl");
    fs::write(&log_path, log_text).map_err(|e| CliError::from_io(&log_path, e))?;
    let ck = &outcome.checkpoint;
    let details = serde_json::json!({
        "training_sources": ck.training_sources,
        "perturbed_sources": ck.perturbed_sources,
        "best_epoch": ck.epoch,
        "validation_loss": ck.validation_loss,
        "n_train_windows": train_w.len(),
        "n_val_windows": val_w.len(),
    });
    let mut inputs = vec![("windows", windows_dir), ("prior", prior_dir)];
    if let Some(v) = val_dir {
        inputs.push(("val_windows", v));
    }
    finish(out, "train", Some(cfg), &inputs, details)
}

fn load_checkpoint(dir: &Path, cfg: Option<&RunConfig>) -> Result<ModelCheckpoint, CliError> {
    require_dir(dir, CHECKPOINT_MANIFEST)?;
    if !dir.join(CHECKPOINT_BINARY).is_file() {
        return Err(CliError::Missing(dir.join(CHECKPOINT_BINARY)));
    }
    let ckpt = ModelCheckpoint::load(dir)?;
    if let Some(c) = cfg {
        if c.model != ckpt.model.config {
            return Err(CliError::Mismatch(
                "the model section of the config differs from the checkpoint's".into(),
            ));
        }
    }
    Ok(ckpt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastEntry {
    pub window_id: String,
    pub file: String,
    /// True when values are in source units, false for window-normalized units.
    pub denormalized: bool,
}

pub const FORECAST_INDEX: &str = "forecasts.json";

pub fn forecast(
    cfg: Option<&RunConfig>,
    ckpt_dir: &Path,
    windows_dir: &Path,
    out: &Path,
) -> Result<RunManifest, CliError> {
    let ckpt = load_checkpoint(ckpt_dir, cfg)?;
    require_dir(windows_dir, WINDOW_MANIFEST)?;
    let windows = read_window_set(windows_dir)?;
    check_nodes(&windows, ckpt.model.prior.n_nodes, "the checkpoint")?;
    prepare_out(out)?;
    let denorm = cfg.is_some_and(|c| c.eval.denormalize);
    let mut index = Vec::with_capacity(windows.len());
    for (k, w) in windows.iter().enumerate() {
        let traj = ckpt.model.forecast(w.context.view(), w.horizon_len())?;
        let values = if denorm { w.denormalize(traj.values.view()) } else { traj.values };
        let file = format!("f{k:05}_forecast.csv");
        write_rates_csv(&out.join(&file), values.view())?;
        index.push(ForecastEntry {
            window_id: w.id(),
            file,
            denormalized: denorm,
        });
    }
    write_json(&out.join(FORECAST_INDEX), &index)?;
    let details = serde_json::json!({ "n_windows": windows.len(), "denormalized": denorm });
    finish(out, "forecast", cfg, &[("checkpoint", ckpt_dir), ("windows", windows_dir)], details)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    pub model: MetricReport,
    pub copy_last: MetricReport,
    pub context_mean: MetricReport,
}

pub const REPORT: &str = "report.json";

/// Scores a checkpoint on perturbed windows. Refuses checkpoints whose
/// training data included perturbed windows.
pub fn perturb_eval(
    cfg: Option<&RunConfig>,
    ckpt_dir: &Path,
    windows_dir: &Path,
    out: &Path,
) -> Result<RunManifest, CliError> {
    let ckpt = load_checkpoint(ckpt_dir, cfg)?;
    if !ckpt.perturbed_sources.is_empty() {
        return Err(CliError::Leakage(format!(
            "training sources include perturbed windows from {}",
            ckpt.perturbed_sources.join(", ")
        )));
    }
    require_dir(windows_dir, WINDOW_MANIFEST)?;
    let windows = read_window_set(windows_dir)?;
    check_nodes(&windows, ckpt.model.prior.n_nodes, "the checkpoint")?;
    let unperturbed = windows.iter().filter(|w| w.perturbation_onset_index.is_none()).count();
    if unperturbed > 0 {
        log::warn!("{unperturbed} of {} evaluation windows are not perturbed", windows.len());
    }
    prepare_out(out)?;
    let report = PerturbReport {
        model: score_model(&ckpt.model, &windows)?,
        copy_last: score_windows(&windows, |w| Ok(copy_last_forecast(w.context.view(), w.horizon_len())))?,
        context_mean: score_windows(&windows, |w| Ok(context_mean_forecast(w.context.view(), w.horizon_len())))?,
    };
    write_json(&out.join(REPORT), &report)?;
    let details = serde_json::json!({
        "n_windows": windows.len(),
        "model_mse": report.model.mse,
        "context_mean_mse": report.context_mean.mse,
    });
    finish(out, "perturb-eval", cfg, &[("checkpoint", ckpt_dir), ("windows", windows_dir)], details)
}

/// Scores forecasts written by `forecast` against the horizons of a window set.
pub fn metrics(
    cfg: Option<&RunConfig>,
    forecasts_dir: &Path,
    targets_dir: &Path,
    out: &Path,
) -> Result<RunManifest, CliError> {
    require_dir(forecasts_dir, FORECAST_INDEX)?;
    require_dir(targets_dir, WINDOW_MANIFEST)?;
    let index: Vec<ForecastEntry> = read_json(&forecasts_dir.join(FORECAST_INDEX))?;
    let targets: BTreeMap<String, TrajectoryWindow> =
        read_window_set(targets_dir)?.into_iter().map(|w| (w.id(), w)).collect();
    let mut per = Vec::with_capacity(index.len());
    for entry in &index {
        let target = targets
            .get(&entry.window_id)
            .ok_or_else(|| CliError::Mismatch(format!("no target window {}", entry.window_id)))?;
        let pred = read_rates_csv(&forecasts_dir.join(&entry.file))?;
        let truth = if entry.denormalized { target.raw_horizon() } else { target.horizon.clone() };
        if pred.dim() != truth.dim() {
            return Err(CliError::Mismatch(format!(
                "forecast {} is {:?}, target is {:?}",
                entry.file,
                pred.dim(),
                truth.dim()
            )));
        }
        per.push(WindowMetrics::compute(pred.view(), truth.view())?);
    }
    prepare_out(out)?;
    let report = MetricReport::from_windows(per)?;
    write_json(&out.join(REPORT), &report)?;
    let details = serde_json::json!({ "n_windows": report.n_windows });
    finish(out, "metrics", cfg, &[("forecasts", forecasts_dir), ("targets", targets_dir)], details)
}
