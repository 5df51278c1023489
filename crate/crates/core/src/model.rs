//! The full forecaster: stalk encoding, sheaf message passing and the
//! integrated vector field, with the composite loss and its exact gradient.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate_field, ForecastTrajectory, VectorFieldParams};
use crate::encoder::{encode_all_with_tape, raw_stalks, LstmParams};
use crate::error::{Error, Result};
use crate::graphs::{BrainGraph, PriorGraph};
use crate::sheaf::{AttentionMode, SheafParameters, SheafPass};

/// Which parts of the model are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Restriction maps frozen at a shared identity, attention fixed at 1.
    Graph,
    /// Stalks are the most recent raw context samples instead of LSTM states.
    NoLstm,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Graph => "graph",
            Ablation::NoLstm => "no_lstm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Stalk dimension `d`.
    pub hidden_dim: usize,
    /// Edge-space dimension `m`.
    pub map_dim: usize,
    /// Hidden width `V` of the vector field.
    pub mlp_width: usize,
    /// Message-passing rounds `L`.
    pub rounds: usize,
    pub normalize: bool,
    /// Drop the state from the field input, giving a constant slope per node.
    pub field_state_free: bool,
    /// RK4 step in units of the sampling interval; `1/dt` must be an integer.
    pub dt: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            map_dim: 32,
            mlp_width: 64,
            rounds: 2,
            normalize: false,
            field_state_free: false,
            dt: 1.0,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.map_dim == 0 || self.mlp_width == 0 {
            return Err(Error::InvalidParameter("model dimensions must be positive".into()));
        }
        let per = 1.0 / self.dt;
        if !(self.dt > 0.0 && self.dt <= 1.0) || (per - per.round()).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "dt must divide the sampling interval, got {}",
                self.dt
            )));
        }
        Ok(())
    }

    /// Edge-space dimension actually used (the graph ablation needs `m = d`).
    pub fn effective_map_dim(&self) -> usize {
        match self.ablation {
            Ablation::Graph => self.hidden_dim,
            _ => self.map_dim,
        }
    }
}

/// All parameter groups. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub lstm: LstmParams,
    pub sheaf: SheafParameters,
    pub field: VectorFieldParams,
}

impl ModelParams {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.lstm.tensors().into();
        out.extend(self.sheaf.tensors());
        out.extend(self.field.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.lstm.tensors_mut().into();
        out.extend(self.sheaf.tensors_mut());
        out.extend(self.field.tensors_mut());
        out
    }

    /// Names matching [`Self::tensors`].
    pub fn tensor_names() -> [&'static str; 10] {
        [
            "lstm.w_ih",
            "lstm.w_hh",
            "lstm.bias",
            "sheaf.rho_src",
            "sheaf.rho_dst",
            "sheaf.attention",
            "field.w1",
            "field.b1",
            "field.w2",
            "field.b2",
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Loss terms of one window (or their mean over a set).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mse: f64,
    pub sparse: f64,
    pub prior: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub prior: PriorGraph,
    pub params: ModelParams,
}

impl Model {
    /// Fresh parameters over the prior graph's edges, seeded.
    pub fn init(config: &ModelConfig, prior: &PriorGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let m = config.effective_map_dim();
        let e = prior.edges.len();
        let lstm = LstmParams::init(d, &mut rng);
        let sheaf = match config.ablation {
            Ablation::Graph => {
                let mut s = SheafParameters::identity(e, d, m, config.rounds, config.normalize);
                s.attention_mode = AttentionMode::Fixed(1.0);
                s
            }
            _ => SheafParameters::init(e, d, m, config.rounds, config.normalize, &mut rng),
        };
        let field = VectorFieldParams::init(d, config.mlp_width, &mut rng);
        Ok(Self {
            config: config.clone(),
            prior: prior.clone(),
            params: ModelParams { lstm, sheaf, field },
        })
    }

    /// The sheaf's working graph: the prior's edge set.
    pub fn graph(&self) -> Result<BrainGraph> {
        self.prior.to_graph()
    }

    /// Per-tensor flags: false for groups an ablation freezes.
    pub fn trainable_mask(&self) -> [bool; 10] {
        let lstm = self.config.ablation != Ablation::NoLstm;
        let sheaf = self.config.ablation != Ablation::Graph;
        [lstm, lstm, lstm, sheaf, sheaf, sheaf, true, true, true, true]
    }

    /// Forecast `t_hor` samples ahead of an `N x T_ctx` context.
    pub fn forecast(&self, context: ArrayView2<'_, f64>, t_hor: usize) -> Result<ForecastTrajectory> {
        let graph = self.graph()?;
        Ok(self.run(context, t_hor, &graph)?.field.trajectory)
    }

    fn run(&self, context: ArrayView2<'_, f64>, t_hor: usize, graph: &BrainGraph) -> Result<Forward> {
        let (n, t_ctx) = context.dim();
        if n != self.prior.n_nodes {
            return Err(Error::ShapeMismatch(format!(
                "context has {n} nodes, model was built for {}",
                self.prior.n_nodes
            )));
        }
        if t_ctx == 0 || t_hor == 0 {
            return Err(Error::ShapeMismatch("context and horizon must be non-empty".into()));
        }
        let (h0, tapes) = match self.config.ablation {
            Ablation::NoLstm => (raw_stalks(context, self.config.hidden_dim), Vec::new()),
            _ => encode_all_with_tape(context, &self.params.lstm)?,
        };
        let sheaf = SheafPass::forward(&h0, &self.params.sheaf, graph)?;
        let x0 = context.column(t_ctx - 1);
        let field = integrate_field(
            x0,
            &sheaf.output,
            &self.params.field,
            t_hor,
            self.config.dt,
            !self.config.field_state_free,
        )?;
        Ok(Forward { tapes, sheaf, field })
    }

    /// Loss terms for one window without gradients.
    pub fn loss(
        &self,
        context: ArrayView2<'_, f64>,
        target: ArrayView2<'_, f64>,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<LossParts> {
        let graph = self.graph()?;
        let fwd = self.run(context, target.ncols(), &graph)?;
        let deltas = self.delta_view(&fwd)?;
        loss_parts(&fwd, target, deltas.view(), &graph, &self.prior, lambda1, lambda2)
    }

    fn delta_view(&self, fwd: &Forward) -> Result<Array2<f64>> {
        let m = self.params.sheaf.map_dim;
        Array2::from_shape_vec((self.prior.edges.len(), m), fwd.sheaf.first_deltas().to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    /// Loss terms and the gradient of the total with respect to every
    /// parameter. Frozen groups still receive their gradient here; masking
    /// happens in the optimizer.
    pub fn loss_and_grad(
        &self,
        context: ArrayView2<'_, f64>,
        target: ArrayView2<'_, f64>,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<(LossParts, ModelParams)> {
        let graph = self.graph()?;
        let fwd = self.run(context, target.ncols(), &graph)?;
        let deltas = self.delta_view(&fwd)?;
        let parts = loss_parts(&fwd, target, deltas.view(), &graph, &self.prior, lambda1, lambda2)?;

        let mut grads = self.params.zeros_like();
        let pred = &fwd.field.trajectory.values;
        let scale = 2.0 / pred.len() as f64;
        let d_pred = (pred - &target) * scale;
        let d_h_l = fwd.field.backward(&self.params.field, &fwd.sheaf.output, &d_pred, &mut grads.field);
        let d_delta = crate::training::regularizer_grad(deltas.view(), &graph.edges, &self.prior, lambda1, lambda2);
        let d_h0 = fwd.sheaf.backward(
            &self.params.sheaf,
            &graph,
            &d_h_l,
            Some(d_delta.as_slice().expect("standard layout")),
            &mut grads.sheaf,
        );
        if !fwd.tapes.is_empty() {
            crate::encoder::backward(&fwd.tapes, &self.params.lstm, d_h0.view(), &mut grads.lstm);
        }
        Ok((parts, grads))
    }
}

struct Forward {
    tapes: Vec<crate::encoder::LstmTape>,
    sheaf: SheafPass,
    field: crate::dynamics::FieldRun,
}

fn loss_parts(
    fwd: &Forward,
    target: ArrayView2<'_, f64>,
    deltas: ArrayView2<'_, f64>,
    graph: &BrainGraph,
    prior: &PriorGraph,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossParts> {
    use crate::training::{loss_mse, loss_prior, loss_sparse};
    let mse = loss_mse(fwd.field.trajectory.values.view(), target)?;
    let sparse = loss_sparse(deltas);
    let prior_term = loss_prior(&graph.edges, deltas, prior)?;
    Ok(LossParts {
        mse,
        sparse,
        prior: prior_term,
        total: mse + lambda1 * sparse + lambda2 * prior_term,
    })
}
