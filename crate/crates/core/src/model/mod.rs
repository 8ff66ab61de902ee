//! The relational attentive inference network.
//!
//! A shared state MLP and GRU encode every agent's window. Same-time
//! multi-head attention between the hidden sequences of agents `i` and `j`
//! gives a directed pair embedding, from which a small network and a sigmoid
//! read an interaction strength `alpha_ij` in (0, 1). The decoder reuses the
//! GRU, aggregates value vectors of other agents weighted by `alpha`, and
//! predicts a diagonal Gaussian over the next state change.

mod config;
mod descriptor;
mod normalizer;

pub use config::{GraphVariant, ModelConfig, TargetMode};
pub use descriptor::{ModelDescriptor, DESCRIPTOR_SCHEMA};
pub use normalizer::Normalizer;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::nn::{GruCellParams, Linear, Mlp};
use crate::autodiff::{concat_last, stack, AutodiffError, Graph, PairDims, ParamStore, Real, Tensor, Var, MASK_VALUE};

/// Additive floor on predicted variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input does not fit the model: {0}")]
    Input(String),
}

/// `[batch, steps, agents, vars]` values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch<T> {
    pub batch: usize,
    pub steps: usize,
    pub agents: usize,
    pub vars: usize,
    pub data: Vec<T>,
}

impl<T: Real> SeqBatch<T> {
    pub fn new(batch: usize, steps: usize, agents: usize, vars: usize, data: Vec<T>) -> Result<Self, ModelError> {
        if data.len() != batch * steps * agents * vars {
            return Err(ModelError::Input(format!(
                "{} values for [{batch}, {steps}, {agents}, {vars}]",
                data.len()
            )));
        }
        Ok(Self {
            batch,
            steps,
            agents,
            vars,
            data,
        })
    }

    pub fn get(&self, b: usize, t: usize, a: usize, v: usize) -> T {
        self.data[((b * self.steps + t) * self.agents + a) * self.vars + v]
    }

    /// `[batch * agents, vars]` slice at step `t`.
    pub fn frame(&self, t: usize) -> Tensor<T> {
        let mut d = Vec::with_capacity(self.batch * self.agents * self.vars);
        let row = self.agents * self.vars;
        for b in 0..self.batch {
            let off = (b * self.steps + t) * row;
            d.extend_from_slice(&self.data[off..off + row]);
        }
        Tensor::from_vec(&[self.batch * self.agents, self.vars], d).expect("frame shape")
    }

    /// Steps `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let row = self.agents * self.vars;
        let mut d = Vec::with_capacity(self.batch * len * row);
        for b in 0..self.batch {
            let off = (b * self.steps + start) * row;
            d.extend_from_slice(&self.data[off..off + len * row]);
        }
        Self {
            steps: len,
            data: d,
            ..*self
        }
    }

    /// Reorders agents so that new agent `k` is old agent `perm[k]`.
    pub fn permute_agents(&self, perm: &[usize]) -> Self {
        let mut d = self.data.clone();
        for b in 0..self.batch {
            for t in 0..self.steps {
                for (k, &src) in perm.iter().enumerate() {
                    for v in 0..self.vars {
                        d[((b * self.steps + t) * self.agents + k) * self.vars + v] = self.get(b, t, src, v);
                    }
                }
            }
        }
        Self { data: d, ..*self }
    }
}

/// Encoder output: every hidden state of the window, `[batch * agents, hidden]` each.
pub struct Encoded<'g, T: Real> {
    pub hidden: Vec<Var<'g, T>>,
}

impl<'g, T: Real> Encoded<'g, T> {
    pub fn last(&self) -> Var<'g, T> {
        *self.hidden.last().expect("non-empty window")
    }
}

/// How the decoder chooses its next input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Feed back the model's own prediction; `sample` adds reparameterized noise.
    ClosedLoop { sample: bool },
    /// Feed back the ground truth.
    TeacherForced,
}

pub struct Rollout<'g, T: Real> {
    /// Predicted means per decoder step, `[batch * agents, vars]`.
    pub mean: Vec<Var<'g, T>>,
    pub var: Vec<Var<'g, T>>,
    /// State fed forward after each step (sampled, mean or ground truth).
    pub path: Vec<Var<'g, T>>,
}

pub struct PairAttention<'g, T: Real> {
    /// Softmax over time of the same-time scores, `[batch, agents, agents, heads, steps]`.
    pub weights: Var<'g, T>,
    /// `[steps, batch * agents, embed]`.
    pub values: Var<'g, T>,
    /// `e[b, i, j]`: values of `j` averaged with the weights seen from `i`,
    /// `[batch, agents, agents, embed]`.
    pub embedding: Var<'g, T>,
}

enum GraphHead {
    Mlp(Mlp),
    Gatv2 { w: Linear, a: Linear },
}

/// Parameter layout of the network; values live in a [`ParamStore`].
pub struct RainModel {
    pub config: ModelConfig,
    state_mlp: Mlp,
    init: Linear,
    gru: GruCellParams,
    /// Key, query and value maps; absent without pair attention.
    attention: Option<[Linear; 3]>,
    graph: GraphHead,
    value_dec: Linear,
    primary: Mlp,
    mean_head: Mlp,
    var_head: Mlp,
}

impl RainModel {
    /// Registers freshly initialized parameters in `store`.
    pub fn new<T: Real, R: Rng>(
        config: ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        let c = &config;
        let s = c.state_dim;
        let state_mlp = Mlp::new(store, rng, "enc.state_mlp", &[s, c.state_mlp_hidden, c.gru_input]);
        let init = Linear::new(store, rng, "enc.init", s, c.hidden_dim, true);
        let gru = GruCellParams::new(store, rng, "gru", c.gru_input, c.hidden_dim);
        let attention = c.use_pa.then(|| {
            ["key", "query", "value"]
                .map(|n| Linear::new(store, rng, &format!("pa.{n}"), c.hidden_dim, c.embed_dim, true))
        });
        let graph = match c.graph_variant {
            GraphVariant::MlpSigmoid => {
                let mut dims = vec![c.pair_dim()];
                dims.extend(&c.graph_mlp_hidden);
                dims.push(1);
                GraphHead::Mlp(Mlp::new(store, rng, "graph.mlp", &dims))
            }
            GraphVariant::Gatv2 => GraphHead::Gatv2 {
                w: Linear::new(store, rng, "graph.gatv2.w", c.pair_dim(), c.gatv2_hidden, true),
                a: Linear::new(store, rng, "graph.gatv2.a", c.gatv2_hidden, 1, false),
            },
        };
        let value_dec = Linear::new(store, rng, "dec.value", c.hidden_dim, c.embed_dim, true);
        let primary = Mlp::new(
            store,
            rng,
            "dec.primary",
            &[2 * c.embed_dim, c.decoder_hidden, c.decoder_hidden],
        );
        let mean_head = Mlp::new(store, rng, "dec.mean", &[c.decoder_hidden, c.decoder_hidden, s]);
        let var_head = Mlp::new(store, rng, "dec.var", &[c.decoder_hidden, c.decoder_hidden, s]);
        Ok(Self {
            config,
            state_mlp,
            init,
            gru,
            attention,
            graph,
            value_dec,
            primary,
            mean_head,
            var_head,
        })
    }

    fn check_input<T: Real>(&self, x: &SeqBatch<T>) -> Result<(), ModelError> {
        if x.agents != self.config.n_agents || x.vars != self.config.state_dim {
            return Err(ModelError::Input(format!(
                "{} agents x {} vars, model expects {} x {}",
                x.agents, x.vars, self.config.n_agents, self.config.state_dim
            )));
        }
        Ok(())
    }

    fn gru_step<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        h: Var<'g, T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>, ModelError> {
        let e = self.state_mlp.forward(g, store, x)?;
        Ok(self.gru.forward(g, store, h, e)?)
    }

    /// Runs the shared GRU over the first `t_enc` steps of `x`.
    pub fn encode<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: &SeqBatch<T>,
    ) -> Result<Encoded<'g, T>, ModelError> {
        self.check_input(x)?;
        let t_enc = self.config.t_enc;
        if x.steps < t_enc {
            return Err(ModelError::Input(format!(
                "window of {} steps, encoder needs {t_enc}",
                x.steps
            )));
        }
        let x0 = g.constant(x.frame(0));
        let mut h = self.init.forward(g, store, x0)?;
        let mut hidden = Vec::with_capacity(t_enc);
        for t in 0..t_enc {
            let xt = if t == 0 { x0 } else { g.constant(x.frame(t)) };
            h = self.gru_step(g, store, h, xt)?;
            hidden.push(h);
        }
        Ok(Encoded { hidden })
    }

    fn pair_dims(&self, batch: usize) -> PairDims {
        PairDims {
            steps: self.config.t_enc,
            batch,
            agents: self.config.n_agents,
            heads: self.config.heads,
            head_dim: self.config.head_dim(),
        }
    }

    /// Same-time pairwise attention over the encoder states.
    pub fn pair_attention<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        enc: &Encoded<'g, T>,
    ) -> Result<PairAttention<'g, T>, ModelError> {
        let rows = enc.last().shape()[0];
        let n = self.config.n_agents;
        let dims = self.pair_dims(rows / n);
        if enc.hidden.len() != dims.steps {
            return Err(ModelError::Input(format!(
                "{} encoder states, expected {}",
                enc.hidden.len(),
                dims.steps
            )));
        }
        let [key, query, value] = self
            .attention
            .as_ref()
            .ok_or_else(|| ModelError::Config("pair attention is disabled".into()))?;
        let hs = stack(&enc.hidden)?;
        let k = key.forward(g, store, hs)?;
        let q = query.forward(g, store, hs)?;
        let values = value.forward(g, store, hs)?;
        let scale = T::from_f64(1.0 / (dims.head_dim as f64).sqrt());
        let weights = k.same_time_scores(q, dims, scale)?.softmax_last();
        let embedding = weights.time_weighted_sum(values, dims)?;
        Ok(PairAttention {
            weights,
            values,
            embedding,
        })
    }

    /// Rows of `[batch * agents * agents]` pairs, reading `(b, i, j)` from `(b, i)` or `(b, j)`.
    fn pair_index(batch: usize, n: usize, first: bool) -> Vec<usize> {
        let mut idx = Vec::with_capacity(batch * n * n);
        for b in 0..batch {
            for i in 0..n {
                for j in 0..n {
                    idx.push(b * n + if first { i } else { j });
                }
            }
        }
        idx
    }

    fn transpose_index(batch: usize, n: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(batch * n * n);
        for b in 0..batch {
            for i in 0..n {
                for j in 0..n {
                    idx.push((b * n + j) * n + i);
                }
            }
        }
        idx
    }

    /// The per-pair input to the graph extractor, `[batch, agents, agents, pair_dim]`:
    /// `e_ij ++ e_ji` with attention, `h_i ++ h_j` of the final hidden states without.
    pub fn pair_features<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        enc: &Encoded<'g, T>,
    ) -> Result<Var<'g, T>, ModelError> {
        let n = self.config.n_agents;
        let batch = enc.last().shape()[0] / n;
        if self.config.use_pa {
            let e = self.pair_attention(g, store, enc)?.embedding;
            let w = self.config.embed_dim;
            let shape = [batch, n, n, w];
            let flat = e.reshape(&[batch * n * n, w])?;
            let et = flat.gather_rows(Self::transpose_index(batch, n), &shape)?;
            Ok(concat_last(&[e, et])?)
        } else {
            let h = enc.last();
            let w = self.config.hidden_dim;
            let shape = [batch, n, n, w];
            let hi = h.gather_rows(Self::pair_index(batch, n, true), &shape)?;
            let hj = h.gather_rows(Self::pair_index(batch, n, false), &shape)?;
            Ok(concat_last(&[hi, hj])?)
        }
    }

    /// `alpha = sigmoid(score + mask)` with the diagonal pushed to `MASK_VALUE`,
    /// `[batch, agents, agents]`.
    pub fn extract_graph<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        pairs: Var<'g, T>,
    ) -> Result<Var<'g, T>, ModelError> {
        let shape = pairs.shape();
        if shape.len() != 4 || shape[1] != shape[2] {
            return Err(ModelError::Input(format!("pair features of shape {shape:?}")));
        }
        let (batch, n) = (shape[0], shape[1]);
        let score = match &self.graph {
            GraphHead::Mlp(mlp) => mlp.forward(g, store, pairs)?,
            GraphHead::Gatv2 { w, a } => {
                let z = w.forward(g, store, pairs)?.leaky_relu(T::from_f64(LEAKY_SLOPE));
                a.forward(g, store, z)?
            }
        };
        let score = score.reshape(&[batch, n, n])?;
        let mut mask = vec![T::zero(); batch * n * n];
        for b in 0..batch {
            for i in 0..n {
                mask[(b * n + i) * n + i] = T::from_f64(MASK_VALUE);
            }
        }
        let mask = g.constant(Tensor::from_vec(&[batch, n, n], mask)?);
        Ok(score.add(mask)?.sigmoid())
    }

    /// Encoder, pair features and graph extraction in one call.
    pub fn infer_graph<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: &SeqBatch<T>,
    ) -> Result<(Encoded<'g, T>, Var<'g, T>), ModelError> {
        let enc = self.encode(g, store, x)?;
        let pairs = self.pair_features(g, store, &enc)?;
        let alpha = self.extract_graph(g, store, pairs)?;
        Ok((enc, alpha))
    }

    /// `message_i = sum_j alpha_ij v_j`, `[batch * agents, embed]`.
    pub fn message<'g, T: Real>(&self, alpha: Var<'g, T>, values: Var<'g, T>) -> Result<Var<'g, T>, ModelError> {
        let n = self.config.n_agents;
        let w = self.config.embed_dim;
        let rows = values.shape()[0];
        let v = values.reshape(&[rows / n, n, w])?;
        Ok(alpha.bmm(v)?.reshape(&[rows, w])?)
    }

    /// Gaussian prediction from hidden states `h` and the graph, each `[batch * agents, vars]`.
    pub fn predict<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        h: Var<'g, T>,
        alpha: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>), ModelError> {
        let v = self.value_dec.forward(g, store, h)?;
        let msg = self.message(alpha, v)?;
        let d = self.primary.forward(g, store, concat_last(&[msg, v])?)?.mish();
        let mean = self.mean_head.forward(g, store, d)?;
        let raw = self.var_head.forward(g, store, d)?;
        let floor = g.constant(Tensor::full(&raw.shape(), T::from_f64(VARIANCE_FLOOR)));
        let var = raw.softplus().add(floor)?;
        Ok((mean, var))
    }

    /// GRU update on input `x` followed by [`RainModel::predict`].
    pub fn decode_step<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        h_prev: Var<'g, T>,
        x: Var<'g, T>,
        alpha: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>), ModelError> {
        let h = self.gru_step(g, store, h_prev, x)?;
        let (mean, var) = self.predict(g, store, h, alpha)?;
        Ok((h, mean, var))
    }

    /// Decodes `t_dec` steps after the window. The first prediction comes
    /// from the encoder's final state (which has consumed the last window
    /// frame); each later step first feeds back the previous path state.
    ///
    /// `future` holds the ground-truth frames after the window and is required
    /// for teacher forcing.
    #[allow(clippy::too_many_arguments)]
    pub fn rollout<'g, T: Real, R: Rng>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        enc: &Encoded<'g, T>,
        alpha: Var<'g, T>,
        last_frame: Tensor<T>,
        t_dec: usize,
        mode: RolloutMode,
        future: Option<&SeqBatch<T>>,
        rng: &mut R,
    ) -> Result<Rollout<'g, T>, ModelError> {
        if mode == RolloutMode::TeacherForced {
            match future {
                Some(f) if f.steps >= t_dec => {}
                _ => {
                    return Err(ModelError::Input(
                        "teacher forcing needs the ground-truth future".into(),
                    ))
                }
            }
        }
        let mut h = enc.last();
        let mut cur = g.constant(last_frame);
        let mut out = Rollout {
            mean: Vec::with_capacity(t_dec),
            var: Vec::with_capacity(t_dec),
            path: Vec::with_capacity(t_dec),
        };
        for t in 0..t_dec {
            if t > 0 {
                h = self.gru_step(g, store, h, cur)?;
            }
            let (mean, var) = self.predict(g, store, h, alpha)?;
            let step = match mode {
                RolloutMode::ClosedLoop { sample: true } => {
                    let shape = mean.shape();
                    let n: usize = shape.iter().product();
                    let eps: Vec<T> = (0..n).map(|_| T::from_f64(rng.sample(StandardNormal))).collect();
                    let eps = g.constant(Tensor::from_vec(&shape, eps)?);
                    Some(mean.add(var.sqrt().mul(eps)?)?)
                }
                RolloutMode::ClosedLoop { sample: false } => Some(mean),
                RolloutMode::TeacherForced => None,
            };
            cur = match (step, self.config.target_mode) {
                (Some(s), TargetMode::Delta) => cur.add(s)?,
                (Some(s), TargetMode::Raw) => s,
                (None, _) => g.constant(future.expect("checked above").frame(t)),
            };
            out.mean.push(mean);
            out.var.push(var);
            out.path.push(cur);
        }
        Ok(out)
    }

    /// Per-step targets: state changes (delta mode) or next states (raw mode),
    /// given the last window frame and the future frames.
    pub fn targets<T: Real>(&self, last_frame: &Tensor<T>, future: &SeqBatch<T>, t_dec: usize) -> Vec<Tensor<T>> {
        let mut prev = last_frame.clone();
        (0..t_dec)
            .map(|t| {
                let next = future.frame(t);
                let target = match self.config.target_mode {
                    TargetMode::Delta => {
                        let d = next.data().iter().zip(prev.data()).map(|(&a, &b)| a - b).collect();
                        Tensor::from_vec(next.shape(), d).expect("same shape")
                    }
                    TargetMode::Raw => next.clone(),
                };
                prev = next;
                target
            })
            .collect()
    }

    /// Gaussian NLL of a rollout, averaged over decoder steps and samples.
    pub fn nll<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        rollout: &Rollout<'g, T>,
        targets: &[Tensor<T>],
        batch: usize,
    ) -> Result<Var<'g, T>, ModelError> {
        let steps = rollout.mean.len();
        if targets.len() < steps || steps == 0 {
            return Err(ModelError::Input(format!(
                "{} targets for {steps} steps",
                targets.len()
            )));
        }
        let mean = stack(&rollout.mean)?;
        let var = stack(&rollout.var)?;
        let mut y = Vec::with_capacity(mean.value().len());
        for t in &targets[..steps] {
            y.extend_from_slice(t.data());
        }
        let y = g.constant(Tensor::from_vec(&mean.shape(), y)?);
        let scale = T::from_f64(1.0 / (steps * batch) as f64);
        Ok(y.gaussian_nll(mean, var, scale)?)
    }

    /// Full training objective on a `[batch, t_enc + t_dec, agents, vars]` batch.
    pub fn loss<'g, T: Real, R: Rng>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: &SeqBatch<T>,
        mode: RolloutMode,
        rng: &mut R,
    ) -> Result<Var<'g, T>, ModelError> {
        let (t_enc, t_dec) = (self.config.t_enc, self.config.t_dec);
        if x.steps < t_enc + t_dec {
            return Err(ModelError::Input(format!("{} steps, need {}", x.steps, t_enc + t_dec)));
        }
        let (enc, alpha) = self.infer_graph(g, store, x)?;
        let last = x.frame(t_enc - 1);
        let future = x.window(t_enc, t_dec);
        let roll = self.rollout(g, store, &enc, alpha, last.clone(), t_dec, mode, Some(&future), rng)?;
        let targets = self.targets(&last, &future, t_dec);
        self.nll(g, &roll, &targets, x.batch)
    }
}
