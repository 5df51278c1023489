//! Learnable sheaf over the working graph: per-edge restriction maps,
//! attention-weighted edge discrepancies, the sheaf Laplacian and rounds of
//! `H <- (I - L_F) H` message passing.
//!
//! Every stored edge `(src, dst)` fixes an orientation. Its discrepancy is
//! `delta = a_src * rho_src h_src - a_dst * rho_dst h_dst`, the source node
//! receives `rho_src^T delta` and the destination receives `-rho_dst^T delta`.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{sigmoid, StalkMatrix};
use crate::error::{Error, Result};
use crate::graphs::BrainGraph;

/// How the per-endpoint attention scalars are produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// `alpha = sigmoid(a^T rho h)`.
    Learned,
    /// Constant coefficient, bypassing the sigmoid.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SheafParameters {
    pub stalk_dim: usize,
    pub map_dim: usize,
    /// `E x m x d`, the source-side map of each edge.
    pub rho_src: Array3<f64>,
    /// `E x m x d`, the destination-side map of each edge.
    pub rho_dst: Array3<f64>,
    /// Shared attention vector in `R^m`.
    pub attention: Array1<f64>,
    pub rounds: usize,
    /// Divide each node's aggregate by `1 + degree`.
    pub normalize: bool,
    pub attention_mode: AttentionMode,
}

impl SheafParameters {
    /// Identity maps (on the leading `min(m, d)` diagonal) and zero attention.
    pub fn identity(n_edges: usize, stalk_dim: usize, map_dim: usize, rounds: usize, normalize: bool) -> Self {
        let mut rho = Array3::zeros((n_edges, map_dim, stalk_dim));
        for e in 0..n_edges {
            for k in 0..map_dim.min(stalk_dim) {
                rho[[e, k, k]] = 1.0;
            }
        }
        Self {
            stalk_dim,
            map_dim,
            rho_src: rho.clone(),
            rho_dst: rho,
            attention: Array1::zeros(map_dim),
            rounds,
            normalize,
            attention_mode: AttentionMode::Learned,
        }
    }

    /// Identity maps plus uniform noise in `±0.01`, attention vector 0.
    pub fn init<R: Rng + ?Sized>(
        n_edges: usize,
        stalk_dim: usize,
        map_dim: usize,
        rounds: usize,
        normalize: bool,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::identity(n_edges, stalk_dim, map_dim, rounds, normalize);
        p.rho_src.mapv_inplace(|v| v + rng.random_range(-0.01..0.01));
        p.rho_dst.mapv_inplace(|v| v + rng.random_range(-0.01..0.01));
        p
    }

    pub fn n_edges(&self) -> usize {
        self.rho_src.shape()[0]
    }

    /// Checks the parameters against a graph and a stalk width.
    pub fn check(&self, graph: &BrainGraph, stalk_dim: usize) -> Result<()> {
        let (m, d) = (self.map_dim, self.stalk_dim);
        if self.n_edges() != graph.n_edges() || self.rho_dst.shape()[0] != graph.n_edges() {
            return Err(Error::MissingEdgeParameters {
                have: self.n_edges().min(self.rho_dst.shape()[0]),
                need: graph.n_edges(),
            });
        }
        if self.rho_src.shape()[1..] != [m, d] || self.rho_dst.shape()[1..] != [m, d] || self.attention.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "restriction maps must be {m}x{d} and the attention vector length {m}"
            )));
        }
        if stalk_dim != d {
            return Err(Error::ShapeMismatch(format!(
                "stalks have width {stalk_dim}, maps expect {d}"
            )));
        }
        Ok(())
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 3] {
        [
            self.rho_src.as_slice().expect("standard layout"),
            self.rho_dst.as_slice().expect("standard layout"),
            self.attention.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.rho_src.as_slice_mut().expect("standard layout"),
            self.rho_dst.as_slice_mut().expect("standard layout"),
            self.attention.as_slice_mut().expect("standard layout"),
        ]
    }

    fn alpha(&self, projected: &[f64]) -> f64 {
        match self.attention_mode {
            AttentionMode::Learned => {
                let a = self.attention.as_slice().expect("standard layout");
                sigmoid(dot(a, projected))
            }
            AttentionMode::Fixed(v) => v,
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = rho h` for a row-major `m x d` map.
#[inline]
fn mat_vec(rho: &[f64], h: &[f64], out: &mut [f64]) {
    let d = h.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&rho[r * d..(r + 1) * d], h);
    }
}

/// `out += sign * rho^T v` for a row-major `m x d` map.
#[inline]
fn mat_t_vec_acc(rho: &[f64], v: &[f64], sign: f64, out: &mut [f64]) {
    let d = out.len();
    for (r, &vr) in v.iter().enumerate() {
        let coef = sign * vr;
        for (o, w) in out.iter_mut().zip(&rho[r * d..(r + 1) * d]) {
            *o += coef * w;
        }
    }
}

/// Transports a stalk into an edge space: `rho h`.
pub fn edge_project(h: ArrayView1<'_, f64>, rho: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if rho.ncols() != h.len() {
        return Err(Error::ShapeMismatch(format!(
            "map is {:?}, stalk has length {}",
            rho.shape(),
            h.len()
        )));
    }
    Ok(rho.dot(&h))
}

/// `(sigmoid(a^T p_src), sigmoid(a^T p_dst))`.
pub fn attention_coeffs(
    src_projected: ArrayView1<'_, f64>,
    dst_projected: ArrayView1<'_, f64>,
    attention: ArrayView1<'_, f64>,
) -> Result<(f64, f64)> {
    if src_projected.len() != attention.len() || dst_projected.len() != attention.len() {
        return Err(Error::ShapeMismatch("projected stalks and attention vector differ in length".into()));
    }
    Ok((
        sigmoid(attention.dot(&src_projected)),
        sigmoid(attention.dot(&dst_projected)),
    ))
}

/// Discrepancy on one edge together with the attention scalars behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeDiscrepancy {
    pub delta: Array1<f64>,
    pub alpha_src: f64,
    pub alpha_dst: f64,
}

/// Discrepancy of edge `(src, dst)` of `graph` for the stalks `h`.
pub fn edge_discrepancy(
    edge: (usize, usize),
    h: &StalkMatrix,
    params: &SheafParameters,
    graph: &BrainGraph,
) -> Result<EdgeDiscrepancy> {
    params.check(graph, h.ncols())?;
    let e = graph
        .edges
        .iter()
        .position(|&x| x == edge)
        .ok_or(Error::UnknownEdge(edge.0, edge.1))?;
    let p_src = edge_project(h.row(edge.0), params.rho_src.index_axis(ndarray::Axis(0), e))?;
    let p_dst = edge_project(h.row(edge.1), params.rho_dst.index_axis(ndarray::Axis(0), e))?;
    let (alpha_src, alpha_dst) = match params.attention_mode {
        AttentionMode::Learned => attention_coeffs(p_src.view(), p_dst.view(), params.attention.view())?,
        AttentionMode::Fixed(v) => (v, v),
    };
    Ok(EdgeDiscrepancy {
        delta: &p_src * alpha_src - &p_dst * alpha_dst,
        alpha_src,
        alpha_dst,
    })
}

/// Intermediate values of one Laplacian application.
#[derive(Clone, Debug)]
pub(crate) struct RoundTape {
    input: Array2<f64>,
    /// `E x m` projected source stalks.
    p_src: Vec<f64>,
    p_dst: Vec<f64>,
    alpha_src: Vec<f64>,
    alpha_dst: Vec<f64>,
    /// `E x m` discrepancies.
    pub(crate) delta: Vec<f64>,
    /// `(L_F H)`, after the optional degree normalization.
    pub(crate) output: Array2<f64>,
}

fn laplacian_round(h: &Array2<f64>, params: &SheafParameters, graph: &BrainGraph, degrees: &[usize]) -> RoundTape {
    let (n, d) = h.dim();
    let m = params.map_dim;
    let n_edges = graph.n_edges();
    let h_std = h.as_standard_layout();
    let hs = h_std.as_slice().expect("standard layout");
    let rho_src = params.rho_src.as_slice().expect("standard layout");
    let rho_dst = params.rho_dst.as_slice().expect("standard layout");
    let mut tape = RoundTape {
        input: h.clone(),
        p_src: vec![0.0; n_edges * m],
        p_dst: vec![0.0; n_edges * m],
        alpha_src: vec![0.0; n_edges],
        alpha_dst: vec![0.0; n_edges],
        delta: vec![0.0; n_edges * m],
        output: Array2::zeros((n, d)),
    };
    let out = tape.output.as_slice_mut().expect("standard layout");
    for (e, &(s, t)) in graph.edges.iter().enumerate() {
        let rs = &rho_src[e * m * d..(e + 1) * m * d];
        let rt = &rho_dst[e * m * d..(e + 1) * m * d];
        let ps = &mut tape.p_src[e * m..(e + 1) * m];
        mat_vec(rs, &hs[s * d..(s + 1) * d], ps);
        let pt = &mut tape.p_dst[e * m..(e + 1) * m];
        mat_vec(rt, &hs[t * d..(t + 1) * d], pt);
        let a_s = params.alpha(ps);
        let a_t = params.alpha(pt);
        tape.alpha_src[e] = a_s;
        tape.alpha_dst[e] = a_t;
        let delta = &mut tape.delta[e * m..(e + 1) * m];
        for r in 0..m {
            delta[r] = a_s * ps[r] - a_t * pt[r];
        }
        mat_t_vec_acc(rs, delta, 1.0, &mut out[s * d..(s + 1) * d]);
        mat_t_vec_acc(rt, delta, -1.0, &mut out[t * d..(t + 1) * d]);
    }
    if params.normalize {
        for i in 0..n {
            let scale = 1.0 / (1.0 + degrees[i] as f64);
            out[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= scale);
        }
    }
    tape
}

/// Gradients of one round: given `d loss / d output` and an optional direct
/// gradient on the discrepancies, accumulates map and attention gradients and
/// returns `d loss / d input`.
fn laplacian_round_backward(
    tape: &RoundTape,
    params: &SheafParameters,
    graph: &BrainGraph,
    degrees: &[usize],
    d_output: Option<&Array2<f64>>,
    d_delta: Option<&[f64]>,
    grads: &mut SheafParameters,
) -> Array2<f64> {
    let (n, d) = tape.input.dim();
    let m = params.map_dim;
    let hs = tape.input.as_slice().expect("standard layout");
    let rho_src = params.rho_src.as_slice().expect("standard layout");
    let rho_dst = params.rho_dst.as_slice().expect("standard layout");
    let attention = params.attention.as_slice().expect("standard layout");
    let learned = params.attention_mode == AttentionMode::Learned;

    let mut d_raw = vec![0.0; n * d];
    if let Some(dout) = d_output {
        let dout = dout.as_standard_layout();
        d_raw.copy_from_slice(dout.as_slice().expect("standard layout"));
        if params.normalize {
            for i in 0..n {
                let scale = 1.0 / (1.0 + degrees[i] as f64);
                d_raw[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= scale);
            }
        }
    }

    let mut d_input = Array2::zeros((n, d));
    let dh = d_input.as_slice_mut().expect("standard layout");
    let [g_src, g_dst, g_att] = grads.tensors_mut();
    let mut dd = vec![0.0; m];
    let mut dps = vec![0.0; m];
    let mut dpt = vec![0.0; m];
    for (e, &(s, t)) in graph.edges.iter().enumerate() {
        let rs = &rho_src[e * m * d..(e + 1) * m * d];
        let rt = &rho_dst[e * m * d..(e + 1) * m * d];
        let gs = &mut g_src[e * m * d..(e + 1) * m * d];
        let gt = &mut g_dst[e * m * d..(e + 1) * m * d];
        let delta = &tape.delta[e * m..(e + 1) * m];
        let ps = &tape.p_src[e * m..(e + 1) * m];
        let pt = &tape.p_dst[e * m..(e + 1) * m];
        let (a_s, a_t) = (tape.alpha_src[e], tape.alpha_dst[e]);
        let drs = &d_raw[s * d..(s + 1) * d];
        let drt = &d_raw[t * d..(t + 1) * d];

        // pull-back terms: out_s += rs^T delta, out_t -= rt^T delta
        match d_delta {
            Some(extra) => dd.copy_from_slice(&extra[e * m..(e + 1) * m]),
            None => dd.fill(0.0),
        }
        for r in 0..m {
            let row_s = &rs[r * d..(r + 1) * d];
            let row_t = &rt[r * d..(r + 1) * d];
            dd[r] += dot(row_s, drs) - dot(row_t, drt);
            let (gs_row, gt_row) = (&mut gs[r * d..(r + 1) * d], &mut gt[r * d..(r + 1) * d]);
            for k in 0..d {
                gs_row[k] += delta[r] * drs[k];
                gt_row[k] -= delta[r] * drt[k];
            }
        }

        // delta = a_s ps - a_t pt
        let mut da_s = 0.0;
        let mut da_t = 0.0;
        for r in 0..m {
            dps[r] = a_s * dd[r];
            dpt[r] = -a_t * dd[r];
            da_s += dd[r] * ps[r];
            da_t -= dd[r] * pt[r];
        }
        if learned {
            let dz_s = da_s * a_s * (1.0 - a_s);
            let dz_t = da_t * a_t * (1.0 - a_t);
            for r in 0..m {
                g_att[r] += dz_s * ps[r] + dz_t * pt[r];
                dps[r] += dz_s * attention[r];
                dpt[r] += dz_t * attention[r];
            }
        }

        // p = rho h
        let h_s = &hs[s * d..(s + 1) * d];
        let h_t = &hs[t * d..(t + 1) * d];
        for r in 0..m {
            let (gs_row, gt_row) = (&mut gs[r * d..(r + 1) * d], &mut gt[r * d..(r + 1) * d]);
            for k in 0..d {
                gs_row[k] += dps[r] * h_s[k];
                gt_row[k] += dpt[r] * h_t[k];
            }
        }
        mat_t_vec_acc(rs, &dps, 1.0, &mut dh[s * d..(s + 1) * d]);
        mat_t_vec_acc(rt, &dpt, 1.0, &mut dh[t * d..(t + 1) * d]);
    }
    d_input
}

/// `(L_F H)_i`: the sum over edges touching `i` of the pulled-back
/// discrepancies, signed by `i`'s role on each edge.
pub fn sheaf_laplacian_apply(h: &StalkMatrix, params: &SheafParameters, graph: &BrainGraph) -> Result<Array2<f64>> {
    check_inputs(h, params, graph)?;
    let degrees = graph.degrees();
    Ok(laplacian_round(h, params, graph, &degrees).output)
}

fn check_inputs(h: &StalkMatrix, params: &SheafParameters, graph: &BrainGraph) -> Result<()> {
    params.check(graph, h.ncols())?;
    if h.nrows() != graph.n_nodes {
        return Err(Error::ShapeMismatch(format!(
            "{} stalk rows for a {}-node graph",
            h.nrows(),
            graph.n_nodes
        )));
    }
    Ok(())
}

/// Applies `H <- H - L_F H` for `params.rounds` rounds, recomputing the
/// attention from the current stalks every round.
pub fn message_pass(h0: &StalkMatrix, params: &SheafParameters, graph: &BrainGraph) -> Result<StalkMatrix> {
    Ok(SheafPass::forward(h0, params, graph)?.output)
}

/// Forward record of a full message-passing run, including the discrepancies
/// of the first round (used by the regularizers).
#[derive(Clone, Debug)]
pub(crate) struct SheafPass {
    rounds: Vec<RoundTape>,
    /// Discrepancy pass on `H^(0)` kept separately when no round is applied.
    probe: Option<RoundTape>,
    degrees: Vec<usize>,
    pub(crate) output: StalkMatrix,
}

impl SheafPass {
    pub(crate) fn forward(h0: &StalkMatrix, params: &SheafParameters, graph: &BrainGraph) -> Result<Self> {
        check_inputs(h0, params, graph)?;
        let degrees = graph.degrees();
        let mut h = h0.as_standard_layout().into_owned();
        let mut rounds = Vec::with_capacity(params.rounds);
        for _ in 0..params.rounds {
            let tape = laplacian_round(&h, params, graph, &degrees);
            h = &h - &tape.output;
            rounds.push(tape);
        }
        let probe = rounds
            .is_empty()
            .then(|| laplacian_round(&h, params, graph, &degrees));
        Ok(Self {
            rounds,
            probe,
            degrees,
            output: h,
        })
    }

    /// First-round discrepancies, `E x m` row-major.
    pub(crate) fn first_deltas(&self) -> &[f64] {
        match self.rounds.first() {
            Some(t) => &t.delta,
            None => &self.probe.as_ref().expect("probe exists without rounds").delta,
        }
    }

    /// Backpropagates `d loss / d H^(L)` and `d loss / d delta^(1)` to the
    /// parameters and returns `d loss / d H^(0)`.
    pub(crate) fn backward(
        &self,
        params: &SheafParameters,
        graph: &BrainGraph,
        d_output: &Array2<f64>,
        d_first_delta: Option<&[f64]>,
        grads: &mut SheafParameters,
    ) -> Array2<f64> {
        let mut dh = d_output.as_standard_layout().into_owned();
        for (l, tape) in self.rounds.iter().enumerate().rev() {
            let d_out = -&dh;
            let extra = if l == 0 { d_first_delta } else { None };
            let through = laplacian_round_backward(tape, params, graph, &self.degrees, Some(&d_out), extra, grads);
            dh += &through;
        }
        if let (Some(probe), Some(extra)) = (&self.probe, d_first_delta) {
            let through = laplacian_round_backward(probe, params, graph, &self.degrees, None, Some(extra), grads);
            dh += &through;
        }
        dh
    }
}
