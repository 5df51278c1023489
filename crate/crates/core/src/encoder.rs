//! Node stalk encoding: a single-layer LSTM over each node's scalar context
//! sequence, with a hand-written backward pass.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stacked node stalks, one row per node (`N x d`).
pub type StalkMatrix = Array2<f64>;

/// Single-layer LSTM with scalar input. Gate blocks are stacked in the order
/// input, forget, cell candidate, output, each `d` rows long.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub hidden_dim: usize,
    /// `4d x 1`
    pub w_ih: Array2<f64>,
    /// `4d x d`
    pub w_hh: Array2<f64>,
    /// `4d`
    pub bias: Array1<f64>,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl LstmParams {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            hidden_dim,
            w_ih: Array2::zeros((4 * hidden_dim, 1)),
            w_hh: Array2::zeros((4 * hidden_dim, hidden_dim)),
            bias: Array1::zeros(4 * hidden_dim),
        }
    }

    /// Uniform in `±1/sqrt(d)`, forget-gate bias set to 1.
    pub fn init<R: Rng + ?Sized>(hidden_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut p = Self::zeros(hidden_dim);
        p.w_ih.mapv_inplace(|_| rng.random_range(-bound..bound));
        p.w_hh.mapv_inplace(|_| rng.random_range(-bound..bound));
        p.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
        p.bias
            .slice_mut(ndarray::s![hidden_dim..2 * hidden_dim])
            .fill(1.0);
        p
    }

    pub fn check(&self) -> Result<()> {
        let d = self.hidden_dim;
        if d == 0 {
            return Err(Error::InvalidParameter("LSTM hidden dimension must be positive".into()));
        }
        if self.w_ih.dim() != (4 * d, 1) || self.w_hh.dim() != (4 * d, d) || self.bias.len() != 4 * d {
            return Err(Error::ShapeMismatch(format!(
                "LSTM parameters do not match hidden_dim {d}"
            )));
        }
        Ok(())
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 3] {
        [
            self.w_ih.as_slice().expect("standard layout"),
            self.w_hh.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.w_ih.as_slice_mut().expect("standard layout"),
            self.w_hh.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Per-step activations kept for the backward pass of one node.
#[derive(Clone, Debug)]
pub struct LstmTape {
    inputs: Vec<f64>,
    /// Gate activations `[i, f, g, o]` per step, `4d` each.
    gates: Vec<f64>,
    /// Cell states `c_0..c_T`, `d` each.
    cells: Vec<f64>,
    /// Hidden states `h_0..h_T`, `d` each.
    hidden: Vec<f64>,
}

fn run(x: &[f64], p: &LstmParams, keep: bool) -> (Vec<f64>, Option<LstmTape>) {
    let d = p.hidden_dim;
    let w_ih = p.w_ih.as_slice().expect("standard layout");
    let w_hh = p.w_hh.as_slice().expect("standard layout");
    let bias = p.bias.as_slice().expect("standard layout");
    let mut h = vec![0.0; d];
    let mut c = vec![0.0; d];
    let mut z = vec![0.0; 4 * d];
    let mut tape = keep.then(|| LstmTape {
        inputs: x.to_vec(),
        gates: Vec::with_capacity(4 * d * x.len()),
        cells: vec![0.0; d],
        hidden: vec![0.0; d],
    });
    for &xt in x {
        for r in 0..4 * d {
            let row = &w_hh[r * d..(r + 1) * d];
            let mut acc = bias[r] + w_ih[r] * xt;
            for (w, hv) in row.iter().zip(&h) {
                acc += w * hv;
            }
            z[r] = acc;
        }
        for k in 0..d {
            let ig = sigmoid(z[k]);
            let fg = sigmoid(z[d + k]);
            let gg = z[2 * d + k].tanh();
            let og = sigmoid(z[3 * d + k]);
            z[k] = ig;
            z[d + k] = fg;
            z[2 * d + k] = gg;
            z[3 * d + k] = og;
            c[k] = fg * c[k] + ig * gg;
            h[k] = og * c[k].tanh();
        }
        if let Some(t) = tape.as_mut() {
            t.gates.extend_from_slice(&z);
            t.cells.extend_from_slice(&c);
            t.hidden.extend_from_slice(&h);
        }
    }
    (h, tape)
}

/// Final hidden state of the LSTM run from `h_0 = c_0 = 0` over `x`.
pub fn encode_history(x: &[f64], params: &LstmParams) -> Result<Array1<f64>> {
    params.check()?;
    if x.is_empty() {
        return Err(Error::ShapeMismatch("empty input sequence".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite input".into()));
    }
    Ok(Array1::from(run(x, params, false).0))
}

/// Encodes every row of an `N x T_ctx` context with shared parameters.
pub fn encode_all(context: ArrayView2<'_, f64>, params: &LstmParams) -> Result<StalkMatrix> {
    Ok(encode_all_with_tape(context, params)?.0)
}

pub(crate) fn encode_all_with_tape(
    context: ArrayView2<'_, f64>,
    params: &LstmParams,
) -> Result<(StalkMatrix, Vec<LstmTape>)> {
    params.check()?;
    let (n, t) = context.dim();
    if t == 0 {
        return Err(Error::ShapeMismatch("context has no time steps".into()));
    }
    let d = params.hidden_dim;
    let mut out = Array2::zeros((n, d));
    let mut tapes = Vec::with_capacity(n);
    for (i, row) in context.rows().into_iter().enumerate() {
        let x = row.to_vec();
        let (h, tape) = run(&x, params, true);
        out.row_mut(i).assign(&Array1::from(h));
        tapes.push(tape.expect("tape requested"));
    }
    Ok((out, tapes))
}

/// Accumulates parameter gradients given `d loss / d h_T` for every node.
pub(crate) fn backward(
    tapes: &[LstmTape],
    params: &LstmParams,
    d_stalks: ArrayView2<'_, f64>,
    grads: &mut LstmParams,
) {
    let d = params.hidden_dim;
    let w_hh = params.w_hh.as_slice().expect("standard layout");
    let [g_ih, g_hh, g_b] = grads.tensors_mut();
    let mut dz = vec![0.0; 4 * d];
    for (tape, dh_final) in tapes.iter().zip(d_stalks.rows()) {
        let steps = tape.inputs.len();
        let mut dh = dh_final.to_vec();
        let mut dc = vec![0.0; d];
        for t in (0..steps).rev() {
            let gates = &tape.gates[4 * d * t..4 * d * (t + 1)];
            let c_prev = &tape.cells[d * t..d * (t + 1)];
            let c_cur = &tape.cells[d * (t + 1)..d * (t + 2)];
            let h_prev = &tape.hidden[d * t..d * (t + 1)];
            for k in 0..d {
                let (ig, fg, gg, og) = (gates[k], gates[d + k], gates[2 * d + k], gates[3 * d + k]);
                let tc = c_cur[k].tanh();
                let d_o = dh[k] * tc;
                let dck = dc[k] + dh[k] * og * (1.0 - tc * tc);
                dz[k] = dck * gg * ig * (1.0 - ig);
                dz[d + k] = dck * c_prev[k] * fg * (1.0 - fg);
                dz[2 * d + k] = dck * ig * (1.0 - gg * gg);
                dz[3 * d + k] = d_o * og * (1.0 - og);
                dc[k] = dck * fg;
            }
            let xt = tape.inputs[t];
            for r in 0..4 * d {
                g_ih[r] += dz[r] * xt;
                g_b[r] += dz[r];
                let grow = &mut g_hh[r * d..(r + 1) * d];
                for (g, hv) in grow.iter_mut().zip(h_prev) {
                    *g += dz[r] * hv;
                }
            }
            dh.fill(0.0);
            for r in 0..4 * d {
                let row = &w_hh[r * d..(r + 1) * d];
                for (acc, w) in dh.iter_mut().zip(row) {
                    *acc += w * dz[r];
                }
            }
        }
    }
}

/// Stalks for the encoder-free ablation: each row holds the most recent `d`
/// context samples, left-padded with zeros when the context is shorter.
pub fn raw_stalks(context: ArrayView2<'_, f64>, d: usize) -> StalkMatrix {
    let (n, t) = context.dim();
    let mut out = Array2::zeros((n, d));
    let take = t.min(d);
    for i in 0..n {
        for k in 0..take {
            out[[i, d - take + k]] = context[[i, t - take + k]];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_zero_stalk() {
        let p = LstmParams::zeros(4);
        let h = encode_history(&[1.0, -3.0, 2.5], &p).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        let all = encode_all(array![[1.0, 2.0], [3.0, 4.0]].view(), &p).unwrap();
        assert!(all.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_step_scalar_hand_trace() {
        let mut p = LstmParams::zeros(1);
        p.w_ih.fill(1.0);
        let h = encode_history(&[1.0], &p).unwrap();
        // i = f = o = sigmoid(1), g = tanh(1), c = i g, h = o tanh(c)
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        let expected = s * (s * 1.0f64.tanh()).tanh();
        assert!((h[0] - expected).abs() < 1e-15);
        assert!((h[0] - 0.369_606_352_935_7).abs() < 1e-9);
    }

    #[test]
    fn identical_rows_share_stalks_and_rows_permute() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LstmParams::init(5, &mut rng);
        let ctx = array![[0.1, 0.5, -0.2], [0.1, 0.5, -0.2], [1.0, -1.0, 0.3]];
        let h = encode_all(ctx.view(), &p).unwrap();
        assert_eq!(h.row(0), h.row(1));
        let perm = array![[1.0, -1.0, 0.3], [0.1, 0.5, -0.2], [0.1, 0.5, -0.2]];
        let hp = encode_all(perm.view(), &p).unwrap();
        assert_eq!(hp.row(0), h.row(2));
        assert_eq!(hp.row(1), h.row(0));
    }

    #[test]
    fn shape_errors() {
        let p = LstmParams::zeros(3);
        assert!(encode_history(&[], &p).is_err());
        let mut bad = p.clone();
        bad.hidden_dim = 4;
        assert!(encode_history(&[1.0], &bad).is_err());
    }

    #[test]
    fn raw_stalks_pad_and_truncate() {
        let ctx = array![[1.0, 2.0, 3.0]];
        assert_eq!(raw_stalks(ctx.view(), 5), array![[0.0, 0.0, 1.0, 2.0, 3.0]]);
        assert_eq!(raw_stalks(ctx.view(), 2), array![[2.0, 3.0]]);
    }
}
