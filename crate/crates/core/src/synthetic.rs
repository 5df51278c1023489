//! Paired unperturbed/perturbed simulation datasets and their window sets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_perturbed_windows, make_windows_with, NormScope, TrajectoryWindow};
use crate::error::{Error, Result};
use crate::graphs::BrainGraph;
use crate::neurosim::{sample_perturbation, simulate, LifParams, PerturbationSpec, SimulationRecord};
use crate::training::CvSeries;

/// One network instantiation simulated with and without silencing. Both runs
/// share the noise seed, so they differ only through the perturbation.
#[derive(Clone, Debug)]
pub struct SeriesPair {
    pub id: String,
    pub unperturbed: SimulationRecord,
    pub perturbed: SimulationRecord,
    pub spec: PerturbationSpec,
}

/// Noise seed of the `index`-th instantiation.
pub fn series_seed(base_seed: u64, index: usize) -> u64 {
    base_seed.wrapping_add(index as u64)
}

pub fn series_id(index: usize) -> String {
    format!("sim{index:05}")
}

/// Simulates `count` pairs on `graph`, in parallel.
pub fn simulate_pairs(graph: &BrainGraph, params: &LifParams, count: usize, base_seed: u64) -> Result<Vec<SeriesPair>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = series_seed(base_seed, i);
            let spec = sample_perturbation(params.duration_ms, graph.n_nodes, seed ^ 0x5bd1_e995)?;
            Ok(SeriesPair {
                id: series_id(i),
                unperturbed: simulate(graph, params, seed, None)?,
                perturbed: simulate(graph, params, seed, Some(spec))?,
                spec,
            })
        })
        .collect()
}

/// Which windows a series contributes when it is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalProtocol {
    /// Unperturbed windows at the training stride.
    Unperturbed,
    /// The single perturbation-straddling window of each series.
    Perturbed,
}

/// Window geometry shared by training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub t_ctx: usize,
    pub t_hor: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t_ctx: 30,
            t_hor: 10,
            stride: 40,
        }
    }
}

/// Training windows (full-window statistics) of an unperturbed record.
pub fn training_windows(pair: &SeriesPair, w: &WindowConfig) -> Result<Vec<TrajectoryWindow>> {
    make_windows_with(pair.unperturbed.rates.view(), &pair.id, w.t_ctx, w.t_hor, w.stride, NormScope::FullWindow)
}

/// Scored windows (context-only statistics) under `protocol`. A perturbed
/// series whose onset cannot host a window yields none.
pub fn evaluation_windows(pair: &SeriesPair, w: &WindowConfig, protocol: EvalProtocol) -> Result<Vec<TrajectoryWindow>> {
    match protocol {
        EvalProtocol::Unperturbed => {
            make_windows_with(pair.unperturbed.rates.view(), &pair.id, w.t_ctx, w.t_hor, w.stride, NormScope::ContextOnly)
        }
        EvalProtocol::Perturbed => match make_perturbed_windows(
            &pair.unperturbed,
            &pair.perturbed,
            &pair.spec,
            w.t_ctx,
            w.t_hor,
            &pair.id,
            NormScope::ContextOnly,
        ) {
            Err(Error::InfeasiblePlacement(msg)) => {
                log::warn!("{}: no perturbed window ({msg})", pair.id);
                Ok(Vec::new())
            }
            other => other,
        },
    }
}

/// Harness input: training windows are always unperturbed.
pub fn cv_dataset(pairs: &[SeriesPair], w: &WindowConfig, protocol: EvalProtocol) -> Result<Vec<CvSeries>> {
    pairs
        .iter()
        .map(|p| {
            Ok(CvSeries {
                id: p.id.clone(),
                train_windows: training_windows(p, w)?,
                eval_windows: evaluation_windows(p, w, protocol)?,
            })
        })
        .collect()
}
