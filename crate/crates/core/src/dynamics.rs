//! Continuous-time evolution of each node's signal: a two-layer tanh MLP
//! vector field over `[x; h]` integrated with fixed-step RK4.
//!
//! Stalks are held fixed over the horizon, so nodes decouple during
//! integration and each one is a scalar ODE.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `f(x, h) = w2 . tanh(W1 [x; h] + b1) + b2`, shared by all nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorFieldParams {
    /// `V x (d + 1)`, column 0 multiplies the state.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl VectorFieldParams {
    pub fn zeros(stalk_dim: usize, width: usize) -> Self {
        Self {
            w1: Array2::zeros((width, stalk_dim + 1)),
            b1: Array1::zeros(width),
            w2: Array1::zeros(width),
            b2: 0.0,
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` per layer.
    pub fn init<R: Rng + ?Sized>(stalk_dim: usize, width: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(stalk_dim, width);
        let b1 = 1.0 / ((stalk_dim + 1) as f64).sqrt();
        let b2 = 1.0 / (width as f64).sqrt();
        p.w1.mapv_inplace(|_| rng.random_range(-b1..b1));
        p.b1.mapv_inplace(|_| rng.random_range(-b1..b1));
        p.w2.mapv_inplace(|_| rng.random_range(-b2..b2));
        p.b2 = rng.random_range(-b2..b2);
        p
    }

    pub fn width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn stalk_dim(&self) -> usize {
        self.w1.ncols().saturating_sub(1)
    }

    pub fn check(&self, stalk_dim: usize) -> Result<()> {
        let v = self.width();
        if v == 0 || self.w1.ncols() != stalk_dim + 1 || self.b1.len() != v || self.w2.len() != v {
            return Err(Error::ShapeMismatch(format!(
                "vector field expects stalks of width {}, got {stalk_dim}",
                self.stalk_dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.b2),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.b2),
        ]
    }

    /// Hidden pre-activation offset contributed by the stalk: `W1[:, 1:] h + b1`.
    fn stalk_offset(&self, h: &[f64]) -> Vec<f64> {
        let cols = self.w1.ncols();
        let w1 = self.w1.as_slice().expect("standard layout");
        (0..self.width())
            .map(|v| {
                let row = &w1[v * cols + 1..(v + 1) * cols];
                self.b1[v] + row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }
}

/// Scalar derivative for one node.
pub fn vector_field(x: f64, h: ArrayView1<'_, f64>, params: &VectorFieldParams) -> Result<f64> {
    params.check(h.len())?;
    let h = h.to_vec();
    let field = NodeField::new(params, &h, true);
    Ok(field.eval(x).0)
}

/// The field of a single node with its stalk folded into the hidden offset.
struct NodeField<'a> {
    u: Vec<f64>,
    offset: Vec<f64>,
    params: &'a VectorFieldParams,
    /// 1 when the state feeds the field, 0 for the state-free reading.
    state_gain: f64,
}

impl<'a> NodeField<'a> {
    fn new(params: &'a VectorFieldParams, h: &[f64], use_state: bool) -> Self {
        Self {
            u: params.w1.column(0).to_vec(),
            offset: params.stalk_offset(h),
            params,
            state_gain: if use_state { 1.0 } else { 0.0 },
        }
    }

    /// Value and `df/dx`.
    fn eval(&self, x: f64) -> (f64, f64) {
        let xs = self.state_gain * x;
        let mut f = self.params.b2;
        let mut dfdx = 0.0;
        for v in 0..self.u.len() {
            let a = (self.u[v] * xs + self.offset[v]).tanh();
            f += self.params.w2[v] * a;
            dfdx += self.params.w2[v] * self.u[v] * (1.0 - a * a);
        }
        (f, dfdx * self.state_gain)
    }

    /// Adds `g * df/dtheta` at state `x`; the stalk-offset part goes to `d_offset`.
    fn accumulate(&self, x: f64, g: f64, d_u: &mut [f64], d_offset: &mut [f64], d_w2: &mut [f64], d_b2: &mut f64) {
        let xs = self.state_gain * x;
        *d_b2 += g;
        for v in 0..self.u.len() {
            let a = (self.u[v] * xs + self.offset[v]).tanh();
            d_w2[v] += g * a;
            let dz = g * self.params.w2[v] * (1.0 - a * a);
            d_u[v] += dz * xs;
            d_offset[v] += dz;
        }
    }
}

/// Predicted signals over the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastTrajectory {
    /// `N x T_hor`.
    pub values: Array2<f64>,
    pub times: Vec<f64>,
}

fn rk4_steps(t_span: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() || !(t_span > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need dt > 0 and a positive span, got dt={dt}, span={t_span}"
        )));
    }
    let steps = (t_span / dt).round();
    if (steps * dt - t_span).abs() > 1e-9 * t_span.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "span {t_span} is not a multiple of dt {dt}"
        )));
    }
    Ok(steps as usize)
}

/// Classical RK4 on `dx/dt = field(t, x)` from `t0` over `t_span`, recording
/// the state after every step. `field` writes the derivative into its last
/// argument.
pub fn rk4_integrate<F>(x0: &[f64], mut field: F, t0: f64, t_span: f64, dt: f64) -> Result<ForecastTrajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let steps = rk4_steps(t_span, dt)?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut values = Array2::zeros((n, steps));
    let mut times = Vec::with_capacity(steps);
    for s in 0..steps {
        let t = t0 + s as f64 * dt;
        field(t, &x, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        field(t + 0.5 * dt, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        field(t + 0.5 * dt, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + dt * k3[i];
        }
        field(t + dt, &tmp, &mut k4);
        for i in 0..n {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            if !x[i].is_finite() {
                return Err(Error::NonFiniteState { step: s, node: i });
            }
            values[[i, s]] = x[i];
        }
        times.push(t0 + (s + 1) as f64 * dt);
    }
    Ok(ForecastTrajectory { values, times })
}

/// Per-node record of one RK4 run for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NodeTape {
    /// States at the four stage evaluations of every step.
    stages: Vec<[f64; 4]>,
    /// Stage slopes `k1..k4` of every step.
    slopes: Vec<[f64; 4]>,
}

/// Integration of all nodes under the learned field, keeping per-node tapes.
#[derive(Clone, Debug)]
pub(crate) struct FieldRun {
    tapes: Vec<NodeTape>,
    pub(crate) trajectory: ForecastTrajectory,
    steps_per_sample: usize,
    dt: f64,
    use_state: bool,
}

/// Integrates every node from `x0` with fixed stalks `h` for `samples`
/// unit-spaced sampling times, taking `1/dt` RK4 steps per sample.
pub(crate) fn integrate_field(
    x0: ArrayView1<'_, f64>,
    h: &Array2<f64>,
    params: &VectorFieldParams,
    samples: usize,
    dt: f64,
    use_state: bool,
) -> Result<FieldRun> {
    params.check(h.ncols())?;
    if x0.len() != h.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} initial states for {} stalks",
            x0.len(),
            h.nrows()
        )));
    }
    let per = rk4_steps(1.0, dt)?;
    let steps = per * samples;
    let n = x0.len();
    let mut values = Array2::zeros((n, samples));
    let mut tapes = Vec::with_capacity(n);
    for i in 0..n {
        let stalk = h.row(i).to_vec();
        let field = NodeField::new(params, &stalk, use_state);
        let mut tape = NodeTape {
            stages: Vec::with_capacity(steps),
            slopes: Vec::with_capacity(steps),
        };
        let mut x = x0[i];
        for s in 0..steps {
            let s1 = x;
            let k1 = field.eval(s1).0;
            let s2 = x + 0.5 * dt * k1;
            let k2 = field.eval(s2).0;
            let s3 = x + 0.5 * dt * k2;
            let k3 = field.eval(s3).0;
            let s4 = x + dt * k3;
            let k4 = field.eval(s4).0;
            x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if !x.is_finite() {
                return Err(Error::NonFiniteState { step: s, node: i });
            }
            tape.stages.push([s1, s2, s3, s4]);
            tape.slopes.push([k1, k2, k3, k4]);
            if (s + 1) % per == 0 {
                values[[i, (s + 1) / per - 1]] = x;
            }
        }
        tapes.push(tape);
    }
    Ok(FieldRun {
        tapes,
        trajectory: ForecastTrajectory {
            values,
            times: (1..=samples).map(|k| k as f64).collect(),
        },
        steps_per_sample: per,
        dt,
        use_state,
    })
}

impl FieldRun {
    /// Backpropagates `d loss / d values` through the unrolled steps.
    /// Accumulates field-parameter gradients and returns `d loss / d h`.
    pub(crate) fn backward(
        &self,
        params: &VectorFieldParams,
        h: &Array2<f64>,
        d_values: &Array2<f64>,
        grads: &mut VectorFieldParams,
    ) -> Array2<f64> {
        let (n, d) = h.dim();
        let width = params.width();
        let cols = d + 1;
        let w1 = params.w1.as_slice().expect("standard layout");
        let dt = self.dt;
        let mut d_h = Array2::zeros((n, d));
        let mut d_u = vec![0.0; width];
        let mut d_w2 = vec![0.0; width];
        let mut d_b2 = 0.0;
        for (i, tape) in self.tapes.iter().enumerate() {
            let stalk = h.row(i).to_vec();
            let field = NodeField::new(params, &stalk, self.use_state);
            let mut d_offset = vec![0.0; width];
            let mut dx = 0.0;
            for s in (0..tape.stages.len()).rev() {
                if (s + 1) % self.steps_per_sample == 0 {
                    dx += d_values[[i, (s + 1) / self.steps_per_sample - 1]];
                }
                let st = tape.stages[s];
                // x' = x + dt/6 (k1 + 2k2 + 2k3 + k4)
                let mut dk = [dx * dt / 6.0, dx * dt / 3.0, dx * dt / 3.0, dx * dt / 6.0];
                let mut dx_prev = dx;
                // k4 = f(x + dt k3)
                let (_, j4) = field.eval(st[3]);
                field.accumulate(st[3], dk[3], &mut d_u, &mut d_offset, &mut d_w2, &mut d_b2);
                let ds4 = dk[3] * j4;
                dx_prev += ds4;
                dk[2] += ds4 * dt;
                // k3 = f(x + dt/2 k2)
                let (_, j3) = field.eval(st[2]);
                field.accumulate(st[2], dk[2], &mut d_u, &mut d_offset, &mut d_w2, &mut d_b2);
                let ds3 = dk[2] * j3;
                dx_prev += ds3;
                dk[1] += ds3 * 0.5 * dt;
                // k2 = f(x + dt/2 k1)
                let (_, j2) = field.eval(st[1]);
                field.accumulate(st[1], dk[1], &mut d_u, &mut d_offset, &mut d_w2, &mut d_b2);
                let ds2 = dk[1] * j2;
                dx_prev += ds2;
                dk[0] += ds2 * 0.5 * dt;
                // k1 = f(x)
                let (_, j1) = field.eval(st[0]);
                field.accumulate(st[0], dk[0], &mut d_u, &mut d_offset, &mut d_w2, &mut d_b2);
                dx_prev += dk[0] * j1;
                dx = dx_prev;
            }
            // offset = W1[:, 1:] h + b1
            let [g_w1, g_b1, _, _] = grads.tensors_mut();
            for v in 0..width {
                g_b1[v] += d_offset[v];
                let grow = &mut g_w1[v * cols + 1..(v + 1) * cols];
                for (g, x) in grow.iter_mut().zip(&stalk) {
                    *g += d_offset[v] * x;
                }
                let wrow = &w1[v * cols + 1..(v + 1) * cols];
                for (k, w) in wrow.iter().enumerate() {
                    d_h[[i, k]] += d_offset[v] * w;
                }
            }
        }
        let [g_w1, _, g_w2, g_b2] = grads.tensors_mut();
        for v in 0..width {
            g_w1[v * cols] += d_u[v];
            g_w2[v] += d_w2[v];
        }
        g_b2[0] += d_b2;
        d_h
    }
}
