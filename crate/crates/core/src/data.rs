//! Windowing, per-window z-scoring and the perturbation-straddling window
//! construction.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::neurosim::{PerturbationSpec, SimulationRecord};

/// Which samples of a window feed its z-score statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Context and horizon together (training windows).
    FullWindow,
    /// Context only, so the horizon is never read (evaluation windows).
    ContextOnly,
}

/// One forecasting example, z-scored per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    /// `N x T_ctx`
    pub context: Array2<f64>,
    /// `N x T_hor`, immediately following the context in time.
    pub horizon: Array2<f64>,
    pub time_step: f64,
    pub norm_mean: Array1<f64>,
    pub norm_std: Array1<f64>,
    pub source_id: String,
    /// Index of the first context sample in the source series.
    pub start: usize,
    pub perturbation_onset_index: Option<usize>,
}

impl TrajectoryWindow {
    pub fn n_nodes(&self) -> usize {
        self.context.nrows()
    }

    pub fn context_len(&self) -> usize {
        self.context.ncols()
    }

    pub fn horizon_len(&self) -> usize {
        self.horizon.ncols()
    }

    /// Maps normalized values of this window back to source units.
    pub fn denormalize(&self, values: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = values.to_owned();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let (m, sd) = (self.norm_mean[i], self.norm_std[i]);
            row.mapv_inplace(|z| z * sd + m);
        }
        out
    }

    pub fn raw_context(&self) -> Array2<f64> {
        self.denormalize(self.context.view())
    }

    pub fn raw_horizon(&self) -> Array2<f64> {
        self.denormalize(self.horizon.view())
    }

    /// Stable identifier `{source_id}@{start}`.
    pub fn id(&self) -> String {
        format!("{}@{}", self.source_id, self.start)
    }
}

/// Z-scores a raw `N x (T_ctx + T_hor)` block into a window.
fn normalize_block(
    raw: ArrayView2<'_, f64>,
    t_ctx: usize,
    scope: NormScope,
) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>, Array1<f64>)> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("series contains non-finite values".into()));
    }
    let n = raw.nrows();
    let stats_cols = match scope {
        NormScope::FullWindow => raw.ncols(),
        NormScope::ContextOnly => t_ctx,
    };
    let mut mean = Array1::zeros(n);
    let mut std = Array1::ones(n);
    let mut z = raw.to_owned();
    for i in 0..n {
        let stats = raw.slice(s![i, ..stats_cols]);
        let len = stats_cols as f64;
        let m = stats.sum() / len;
        let var = stats.iter().map(|v| (v - m).powi(2)).sum::<f64>() / len;
        let sd = var.sqrt();
        let sd = if sd <= 1e-12 * (1.0 + m.abs()) { 1.0 } else { sd };
        mean[i] = m;
        std[i] = sd;
        z.row_mut(i).mapv_inplace(|v| (v - m) / sd);
    }
    let context = z.slice(s![.., ..t_ctx]).to_owned();
    let horizon = z.slice(s![.., t_ctx..]).to_owned();
    Ok((context, horizon, mean, std))
}

/// Number of windows [`make_windows`] produces for a series of length `t`.
pub fn window_count(t: usize, t_ctx: usize, t_hor: usize, stride: usize) -> usize {
    if t < t_ctx + t_hor || stride == 0 {
        0
    } else {
        (t - t_ctx - t_hor) / stride + 1
    }
}

/// Slides a `t_ctx + t_hor` window along an `N x T` series with the given
/// stride, z-scoring each window over all of its samples.
pub fn make_windows(
    series: ArrayView2<'_, f64>,
    t_ctx: usize,
    t_hor: usize,
    stride: usize,
) -> Result<Vec<TrajectoryWindow>> {
    make_windows_with(series, "", t_ctx, t_hor, stride, NormScope::FullWindow)
}

pub fn make_windows_with(
    series: ArrayView2<'_, f64>,
    source_id: &str,
    t_ctx: usize,
    t_hor: usize,
    stride: usize,
    scope: NormScope,
) -> Result<Vec<TrajectoryWindow>> {
    if t_ctx == 0 || t_hor == 0 || stride == 0 {
        return Err(Error::InvalidParameter(
            "context, horizon and stride must be positive".into(),
        ));
    }
    let t = series.ncols();
    if t < t_ctx + t_hor {
        return Err(Error::SeriesTooShort {
            needed: t_ctx + t_hor,
            got: t,
        });
    }
    (0..window_count(t, t_ctx, t_hor, stride))
        .map(|w| {
            let start = w * stride;
            let block = series.slice(s![.., start..start + t_ctx + t_hor]);
            let (context, horizon, norm_mean, norm_std) = normalize_block(block, t_ctx, scope)?;
            Ok(TrajectoryWindow {
                context,
                horizon,
                time_step: 1.0,
                norm_mean,
                norm_std,
                source_id: source_id.to_string(),
                start,
                perturbation_onset_index: None,
            })
        })
        .collect()
}

/// Context index at which the perturbation onset is placed: 90% of the
/// context precedes it.
pub fn onset_context_index(t_ctx: usize) -> usize {
    (9 * t_ctx) / 10
}

/// Raw spliced block for a perturbation-straddling window, returned with the
/// context start bin and the onset's context index. Bins before the onset
/// bin come from the unperturbed record, the rest from the perturbed one.
pub fn splice_perturbed(
    record_pre: &SimulationRecord,
    record_post: &SimulationRecord,
    spec: &PerturbationSpec,
    t_ctx: usize,
    t_hor: usize,
) -> Result<(Array2<f64>, usize, usize)> {
    if record_pre.bin_edges_ms != record_post.bin_edges_ms
        || record_pre.rates.dim() != record_post.rates.dim()
    {
        return Err(Error::ShapeMismatch(
            "unperturbed and perturbed records do not share bins".into(),
        ));
    }
    if t_ctx == 0 || t_hor == 0 {
        return Err(Error::InvalidParameter("context and horizon must be positive".into()));
    }
    let edges = &record_pre.bin_edges_ms;
    let n_bins = record_pre.n_bins();
    if spec.onset_ms < edges[0] || spec.onset_ms >= edges[n_bins] {
        return Err(Error::InfeasiblePlacement(format!(
            "onset {} ms lies outside the series",
            spec.onset_ms
        )));
    }
    let onset_bin = edges.partition_point(|&e| e <= spec.onset_ms) - 1;
    let onset_idx = onset_context_index(t_ctx);
    if onset_bin < onset_idx {
        return Err(Error::InfeasiblePlacement(format!(
            "onset bin {onset_bin} leaves fewer than {onset_idx} context bins before it"
        )));
    }
    let start = onset_bin - onset_idx;
    if start + t_ctx + t_hor > n_bins {
        return Err(Error::InfeasiblePlacement(format!(
            "window starting at bin {start} runs past the end of {n_bins} bins"
        )));
    }
    let mut block = record_post
        .rates
        .slice(s![.., start..start + t_ctx + t_hor])
        .to_owned();
    block
        .slice_mut(s![.., ..onset_idx])
        .assign(&record_pre.rates.slice(s![.., start..onset_bin]));
    Ok((block, start, onset_idx))
}

/// Perturbation-straddling window: onset at context index `floor(0.9 t_ctx)`,
/// unperturbed rates before it, perturbed rates from it onwards.
pub fn make_perturbed_windows(
    record_pre: &SimulationRecord,
    record_post: &SimulationRecord,
    spec: &PerturbationSpec,
    t_ctx: usize,
    t_hor: usize,
    source_id: &str,
    scope: NormScope,
) -> Result<Vec<TrajectoryWindow>> {
    let (block, start, onset_idx) = splice_perturbed(record_pre, record_post, spec, t_ctx, t_hor)?;
    let (context, horizon, norm_mean, norm_std) = normalize_block(block.view(), t_ctx, scope)?;
    let time_step = record_pre.bin_edges_ms[1] - record_pre.bin_edges_ms[0];
    Ok(vec![TrajectoryWindow {
        context,
        horizon,
        time_step,
        norm_mean,
        norm_std,
        source_id: source_id.to_string(),
        start,
        perturbation_onset_index: Some(onset_idx),
    }])
}

/// Metadata of one stored window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowMeta {
    pub id: String,
    pub source_id: String,
    pub start: usize,
    pub time_step: f64,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub perturbation_onset_index: Option<usize>,
    pub context_file: String,
    pub horizon_file: String,
}

/// JSON manifest listing the window files of a dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowManifest {
    pub windows: Vec<String>,
    pub normalization: Option<NormScope>,
}

pub const WINDOW_MANIFEST: &str = "windows.json";

/// Writes each window as `w{k}_context.csv`, `w{k}_horizon.csv` and
/// `w{k}_meta.json`, plus a `windows.json` manifest.
pub fn write_window_set(dir: &Path, windows: &[TrajectoryWindow], scope: NormScope) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = WindowManifest {
        windows: Vec::new(),
        normalization: Some(scope),
    };
    for (k, w) in windows.iter().enumerate() {
        let stem = format!("w{k:05}");
        let meta = WindowMeta {
            id: w.id(),
            source_id: w.source_id.clone(),
            start: w.start,
            time_step: w.time_step,
            norm_mean: w.norm_mean.to_vec(),
            norm_std: w.norm_std.to_vec(),
            perturbation_onset_index: w.perturbation_onset_index,
            context_file: format!("{stem}_context.csv"),
            horizon_file: format!("{stem}_horizon.csv"),
        };
        io::write_rates_csv(&dir.join(&meta.context_file), w.context.view())?;
        io::write_rates_csv(&dir.join(&meta.horizon_file), w.horizon.view())?;
        let meta_name = format!("{stem}_meta.json");
        io::write_json(&dir.join(&meta_name), &meta)?;
        manifest.windows.push(meta_name);
    }
    io::write_json(&dir.join(WINDOW_MANIFEST), &manifest)
}

pub fn read_window_set(dir: &Path) -> Result<Vec<TrajectoryWindow>> {
    let manifest: WindowManifest = io::read_json(&dir.join(WINDOW_MANIFEST))?;
    manifest
        .windows
        .iter()
        .map(|name| {
            let meta: WindowMeta = io::read_json(&dir.join(name))?;
            let context = io::read_rates_csv(&dir.join(&meta.context_file))?;
            let horizon = io::read_rates_csv(&dir.join(&meta.horizon_file))?;
            if context.nrows() != horizon.nrows() || meta.norm_mean.len() != context.nrows() {
                return Err(Error::ShapeMismatch(format!("window {name} has inconsistent shapes")));
            }
            Ok(TrajectoryWindow {
                context,
                horizon,
                time_step: meta.time_step,
                norm_mean: Array1::from(meta.norm_mean),
                norm_std: Array1::from(meta.norm_std),
                source_id: meta.source_id,
                start: meta.start,
                perturbation_onset_index: meta.perturbation_onset_index,
            })
        })
        .collect()
}

/// Paths of the files listed in a window-set manifest.
pub fn window_set_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest: WindowManifest = io::read_json(&dir.join(WINDOW_MANIFEST))?;
    Ok(manifest.windows.iter().map(|n| dir.join(n)).collect())
}
