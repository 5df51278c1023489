//! Leaky integrate-and-fire network with alpha-shaped synaptic currents and a
//! shared Poisson drive, plus rate estimation and single-neuron silencing.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::BrainGraph;
use crate::io;

/// Neuron, synapse and integration parameters. Units: ms, mV, pF, pA, Hz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifParams {
    pub membrane_tau: f64,
    pub threshold_mv: f64,
    pub reset_mv: f64,
    pub resting_mv: f64,
    pub capacitance_pf: f64,
    pub refractory_ms: f64,
    /// Alpha-current time constant; the kernel peaks this long after arrival.
    pub syn_tau: f64,
    /// Peak current of one recurrent spike, uniform over edges.
    pub syn_weight: f64,
    pub syn_delay_ms: f64,
    pub poisson_rate_hz: f64,
    /// Peak current of one background spike.
    pub poisson_weight: f64,
    pub dt_ms: f64,
    pub duration_ms: f64,
    pub bin_ms: f64,
    pub sigma_ms: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            membrane_tau: 10.0,
            threshold_mv: -55.0,
            reset_mv: -70.0,
            resting_mv: -70.0,
            capacitance_pf: 250.0,
            refractory_ms: 2.0,
            syn_tau: 2.0,
            syn_weight: DEFAULT_SYN_WEIGHT,
            syn_delay_ms: 1.5,
            poisson_rate_hz: 1000.0,
            poisson_weight: DEFAULT_POISSON_WEIGHT,
            dt_ms: 0.1,
            duration_ms: 2000.0,
            bin_ms: 10.0,
            sigma_ms: 20.0,
        }
    }
}

/// Calibrated with [`calibrate_poisson_weight`] on the 100-node, k = 8,
/// beta = 0.1 network (seeds 0..4) for a mean rate near 20 Hz.
pub const DEFAULT_POISSON_WEIGHT: f64 = 61.7;
pub const DEFAULT_SYN_WEIGHT: f64 = 30.0;

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("membrane_tau", self.membrane_tau),
            ("capacitance_pf", self.capacitance_pf),
            ("refractory_ms", self.refractory_ms),
            ("syn_tau", self.syn_tau),
            ("dt_ms", self.dt_ms),
            ("duration_ms", self.duration_ms),
            ("bin_ms", self.bin_ms),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.threshold_mv > self.reset_mv) {
            return Err(Error::InvalidParameter("threshold must exceed reset".into()));
        }
        if self.dt_ms > self.refractory_ms {
            return Err(Error::InvalidParameter("dt_ms must not exceed refractory_ms".into()));
        }
        if self.syn_delay_ms < 0.0 || self.poisson_rate_hz < 0.0 || self.sigma_ms < 0.0 {
            return Err(Error::InvalidParameter(
                "delay, Poisson rate and smoothing width must be >= 0".into(),
            ));
        }
        if !self.syn_weight.is_finite() || !self.poisson_weight.is_finite() {
            return Err(Error::InvalidParameter("weights must be finite".into()));
        }
        self.n_bins()?;
        Ok(())
    }

    fn n_steps(&self) -> usize {
        (self.duration_ms / self.dt_ms).round() as usize
    }

    pub fn n_bins(&self) -> Result<usize> {
        let b = self.duration_ms / self.bin_ms;
        if (b - b.round()).abs() > 1e-9 || b < 1.0 {
            return Err(Error::InvalidParameter(format!(
                "duration {} is not a whole number of {} ms bins",
                self.duration_ms, self.bin_ms
            )));
        }
        Ok(b.round() as usize)
    }
}

/// One neuron silenced over `[onset_ms, onset_ms + duration_ms]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub neuron: usize,
    pub onset_ms: f64,
    pub duration_ms: f64,
}

pub const MIN_SILENCE_MS: f64 = 240.0;
pub const MAX_SILENCE_MS: f64 = 400.0;

impl PerturbationSpec {
    pub fn end_ms(&self) -> f64 {
        self.onset_ms + self.duration_ms
    }

    pub fn contains(&self, t_ms: f64) -> bool {
        t_ms >= self.onset_ms && t_ms <= self.end_ms()
    }

    /// Checks the duration range and that the window sits inside the inner
    /// 80% of a simulation of length `sim_ms`.
    pub fn validate(&self, sim_ms: f64, n_nodes: usize) -> Result<()> {
        if self.neuron >= n_nodes {
            return Err(Error::InvalidParameter(format!(
                "perturbed neuron {} out of range",
                self.neuron
            )));
        }
        if !(MIN_SILENCE_MS..=MAX_SILENCE_MS).contains(&self.duration_ms) {
            return Err(Error::InvalidParameter(format!(
                "silencing duration {} outside [240, 400] ms",
                self.duration_ms
            )));
        }
        if self.onset_ms < 0.1 * sim_ms - 1e-9 || self.end_ms() > 0.9 * sim_ms + 1e-9 {
            return Err(Error::InvalidParameter(
                "silencing window leaves the inner 80% of the simulation".into(),
            ));
        }
        Ok(())
    }
}

/// Draws a silencing window: `D ~ U[240, 400]`, onset uniform over
/// `[0.1 T, 0.9 T - D]`, target neuron uniform.
pub fn sample_perturbation(sim_ms: f64, n_nodes: usize, seed: u64) -> Result<PerturbationSpec> {
    if !(sim_ms >= 500.0) {
        return Err(Error::InvalidParameter(format!(
            "simulation of {sim_ms} ms is too short for a 240-400 ms window in its inner 80%"
        )));
    }
    if n_nodes == 0 {
        return Err(Error::InvalidParameter("no neurons to silence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration_ms = rng.random_range(MIN_SILENCE_MS..=MAX_SILENCE_MS);
    let lo = 0.1 * sim_ms;
    let hi = 0.9 * sim_ms - duration_ms;
    let onset_ms = lo + rng.random::<f64>() * (hi - lo);
    let neuron = rng.random_range(0..n_nodes);
    Ok(PerturbationSpec {
        neuron,
        onset_ms,
        duration_ms,
    })
}

/// Output of one simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    /// `N x B` smoothed firing rates in Hz.
    pub rates: Array2<f64>,
    pub adjacency: BrainGraph,
    pub perturbation: Option<PerturbationSpec>,
    pub bin_edges_ms: Vec<f64>,
    pub seed: u64,
    pub params: LifParams,
    pub total_spikes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordSidecar {
    seed: u64,
    params: LifParams,
    bin_edges_ms: Vec<f64>,
    perturbation: Option<PerturbationSpec>,
    n_nodes: usize,
    graph_seed: u64,
    total_spikes: usize,
}

impl SimulationRecord {
    pub fn n_nodes(&self) -> usize {
        self.rates.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.rates.ncols()
    }

    pub fn mean_rate_hz(&self) -> f64 {
        self.total_spikes as f64 / (self.n_nodes() as f64 * self.params.duration_ms / 1000.0)
    }

    /// Writes `{stem}_rates.csv`, `{stem}_adjacency.csv` and `{stem}_meta.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        io::write_rates_csv(&dir.join(format!("{stem}_rates.csv")), self.rates.view())?;
        self.adjacency
            .write_csv(&dir.join(format!("{stem}_adjacency.csv")))?;
        io::write_json(
            &dir.join(format!("{stem}_meta.json")),
            &RecordSidecar {
                seed: self.seed,
                params: self.params.clone(),
                bin_edges_ms: self.bin_edges_ms.clone(),
                perturbation: self.perturbation,
                n_nodes: self.adjacency.n_nodes,
                graph_seed: self.adjacency.seed,
                total_spikes: self.total_spikes,
            },
        )
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let meta: RecordSidecar = io::read_json(&dir.join(format!("{stem}_meta.json")))?;
        let rates = io::read_rates_csv(&dir.join(format!("{stem}_rates.csv")))?;
        let mut adjacency =
            BrainGraph::read_csv(&dir.join(format!("{stem}_adjacency.csv")), meta.n_nodes)?;
        adjacency.seed = meta.graph_seed;
        if rates.nrows() != meta.n_nodes || rates.ncols() + 1 != meta.bin_edges_ms.len() {
            return Err(Error::ShapeMismatch(format!(
                "{stem}: rates {:?} disagree with metadata",
                rates.shape()
            )));
        }
        Ok(Self {
            rates,
            adjacency,
            perturbation: meta.perturbation,
            bin_edges_ms: meta.bin_edges_ms,
            seed: meta.seed,
            params: meta.params,
            total_spikes: meta.total_spikes,
        })
    }
}

/// Smallest `c` with `P(Poisson(lambda) <= c) >= u`. Monotone in `lambda` for
/// a fixed `u`, which couples drives of different rates under one seed.
fn poisson_inverse_cdf(lambda: f64, u: f64) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    let mut term = (-lambda).exp();
    let mut cdf = term;
    let mut c = 0u32;
    while cdf < u && c < 10_000 {
        c += 1;
        term *= lambda / c as f64;
        cdf += term;
    }
    c
}

/// Spike times per neuron from a forward-Euler run of the network.
pub fn simulate_spikes(
    graph: &BrainGraph,
    params: &LifParams,
    seed: u64,
    perturbation: Option<&PerturbationSpec>,
) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    let n = graph.n_nodes;
    if n == 0 {
        return Err(Error::InvalidParameter("graph has no nodes".into()));
    }
    if let Some(p) = perturbation {
        if p.neuron >= n {
            return Err(Error::InvalidParameter(format!("perturbed neuron {} out of range", p.neuron)));
        }
    }

    let dt = params.dt_ms;
    let steps = params.n_steps();
    let decay = (-dt / params.syn_tau).exp();
    // Alpha kernel (u/tau) e^{1-u/tau} split as x = u * a with a = (e w / tau) e^{-u/tau}.
    let jump = std::f64::consts::E / params.syn_tau;
    let delay_steps = (params.syn_delay_ms / dt).round() as usize;
    let refractory_steps = (params.refractory_ms / dt).round().max(1.0) as usize;
    let lambda = params.poisson_rate_hz * dt / 1000.0;
    let out = graph.out_neighbors();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n)
        .map(|_| params.reset_mv + rng.random::<f64>() * (params.threshold_mv - params.reset_mv))
        .collect();
    let mut refractory = vec![0usize; n];
    let mut syn_a = vec![0.0; n];
    let mut syn_x = vec![0.0; n];
    let mut bg_a = 0.0;
    let mut bg_x = 0.0;
    // Ring buffer of pending recurrent arrivals, in spike counts.
    let ring = delay_steps + 2;
    let mut pending = vec![vec![0u32; n]; ring];
    let mut spikes = vec![Vec::new(); n];

    let first = poisson_inverse_cdf(lambda, rng.random::<f64>());
    bg_a += jump * params.poisson_weight * first as f64;

    for k in 0..steps {
        let t = k as f64 * dt;
        let mut fired = Vec::new();
        for i in 0..n {
            let silenced = perturbation.is_some_and(|p| p.neuron == i && p.contains(t));
            if silenced || refractory[i] > 0 {
                v[i] = params.reset_mv;
                refractory[i] = refractory[i].saturating_sub(1);
                continue;
            }
            let current = syn_x[i] + bg_x;
            v[i] += dt * (-(v[i] - params.resting_mv) / params.membrane_tau + current / params.capacitance_pf);
            if v[i] >= params.threshold_mv {
                v[i] = params.reset_mv;
                refractory[i] = refractory_steps;
                spikes[i].push(t);
                fired.push(i);
            }
        }

        for &i in &fired {
            let slot = &mut pending[(k + 1 + delay_steps) % ring];
            for &j in &out[i] {
                slot[j] += 1;
            }
        }

        for i in 0..n {
            syn_x[i] = decay * (syn_x[i] + dt * syn_a[i]);
            syn_a[i] *= decay;
        }
        bg_x = decay * (bg_x + dt * bg_a);
        bg_a *= decay;

        let arriving = &mut pending[(k + 1) % ring];
        for i in 0..n {
            if arriving[i] > 0 {
                syn_a[i] += jump * params.syn_weight * arriving[i] as f64;
                arriving[i] = 0;
            }
        }
        let bg = poisson_inverse_cdf(lambda, rng.random::<f64>());
        bg_a += jump * params.poisson_weight * bg as f64;
    }
    Ok(spikes)
}

/// Runs the network and converts spikes to smoothed rates. With a
/// perturbation, the silenced neuron's rate is pinned to 0 on every bin that
/// lies wholly inside the silencing window.
pub fn simulate(
    graph: &BrainGraph,
    params: &LifParams,
    seed: u64,
    perturbation: Option<PerturbationSpec>,
) -> Result<SimulationRecord> {
    if let Some(p) = &perturbation {
        p.validate(params.duration_ms, graph.n_nodes)?;
    }
    let spikes = simulate_spikes(graph, params, seed, perturbation.as_ref())?;
    let total_spikes = spikes.iter().map(Vec::len).sum();
    let mut rates = bin_and_smooth(&spikes, params.duration_ms, params.bin_ms, params.sigma_ms)?;
    let n_bins = rates.ncols();
    if let Some(p) = &perturbation {
        for b in 0..n_bins {
            let lo = b as f64 * params.bin_ms;
            let hi = lo + params.bin_ms;
            if lo >= p.onset_ms && hi <= p.end_ms() {
                rates[[p.neuron, b]] = 0.0;
            }
        }
    }
    let bin_edges_ms = (0..=n_bins).map(|b| b as f64 * params.bin_ms).collect();
    Ok(SimulationRecord {
        rates,
        adjacency: graph.clone(),
        perturbation,
        bin_edges_ms,
        seed,
        params: params.clone(),
        total_spikes,
    })
}

/// Per-bin firing rates in Hz, smoothed along time by a Gaussian of width
/// `sigma_ms` truncated at 4 sigma and renormalized. Kernel mass that falls
/// past either end is reflected back, so total spike mass is conserved.
pub fn bin_and_smooth(
    spikes: &[Vec<f64>],
    duration_ms: f64,
    bin_ms: f64,
    sigma_ms: f64,
) -> Result<Array2<f64>> {
    if !(bin_ms > 0.0) || !(duration_ms > 0.0) || !(sigma_ms >= 0.0) {
        return Err(Error::InvalidParameter("bin, duration and sigma must be positive".into()));
    }
    let n_bins = (duration_ms / bin_ms).round() as usize;
    let n = spikes.len();
    let to_hz = 1000.0 / bin_ms;
    let mut counts = Array2::<f64>::zeros((n, n_bins));
    for (i, train) in spikes.iter().enumerate() {
        for &t in train {
            let b = ((t / bin_ms).floor() as usize).min(n_bins.saturating_sub(1));
            counts[[i, b]] += to_hz;
        }
    }

    let kernel = gaussian_kernel(sigma_ms / bin_ms);
    if kernel.len() == 1 || n_bins == 0 {
        return Ok(counts);
    }
    let half = (kernel.len() / 2) as isize;
    let last = n_bins as isize - 1;
    let reflect = |j: isize| -> usize {
        if last == 0 {
            return 0;
        }
        let m = j.rem_euclid(2 * last);
        (if m > last { 2 * last - m } else { m }) as usize
    };
    // Scatter form: every bin spreads its mass over its neighbours, and mass
    // falling past an edge is mirrored back about the edge bin.
    let mut out = Array2::zeros((n, n_bins));
    for i in 0..n {
        for b in 0..n_bins {
            let c = counts[[i, b]];
            if c == 0.0 {
                continue;
            }
            for (k, w) in kernel.iter().enumerate() {
                let j = b as isize + k as isize - half;
                out[[i, reflect(j)]] += w * c;
            }
        }
    }
    Ok(out)
}

fn gaussian_kernel(sigma_bins: f64) -> Vec<f64> {
    if sigma_bins < 1e-6 {
        return vec![1.0];
    }
    let half = (4.0 * sigma_bins).ceil() as isize;
    let raw: Vec<f64> = (-half..=half)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma_bins * sigma_bins)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Bisects the background weight until the mean network rate over `seeds`
/// reaches `target_hz`. Returns the weight and the achieved rate.
pub fn calibrate_poisson_weight(
    graph: &BrainGraph,
    params: &LifParams,
    seeds: &[u64],
    target_hz: f64,
    (mut lo, mut hi): (f64, f64),
    iterations: usize,
) -> Result<(f64, f64)> {
    let rate_at = |w: f64| -> Result<f64> {
        let p = LifParams {
            poisson_weight: w,
            ..params.clone()
        };
        let mut total = 0.0;
        for &s in seeds {
            let spikes = simulate_spikes(graph, &p, s, None)?;
            let count: usize = spikes.iter().map(Vec::len).sum();
            total += count as f64 / (graph.n_nodes as f64 * p.duration_ms / 1000.0);
        }
        Ok(total / seeds.len().max(1) as f64)
    };
    let mut mid = 0.5 * (lo + hi);
    let mut rate = rate_at(mid)?;
    for _ in 0..iterations {
        if rate < target_hz {
            lo = mid;
        } else {
            hi = mid;
        }
        mid = 0.5 * (lo + hi);
        rate = rate_at(mid)?;
    }
    Ok((mid, rate))
}
