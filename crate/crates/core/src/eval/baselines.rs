//! Reference predictors and correlation scores without relational structure.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::nn::{Linear, LstmCellParams};
use crate::autodiff::{stack, AdamConfig, AdamState, Graph, ParamStore, Real, Tensor, Var};
use crate::model::{ModelError, Normalizer, SeqBatch, VARIANCE_FLOOR};
use crate::sim::{sample_seed, TrajectoryBatch};

use super::metrics::{horizon_mse, pearson, HorizonMse, MetricError};
use super::EvalError;

/// Copies the last window frame forward: `[samples, t_dec, N, S]`.
pub fn static_paths(data: &TrajectoryBatch, t_enc: usize, t_dec: usize) -> Vec<f64> {
    let [samples, _, n, s] = data.dims;
    let row = n * s;
    let mut out = Vec::with_capacity(samples * t_dec * row);
    for i in 0..samples {
        let last = &data.sample(i)[(t_enc - 1) * row..t_enc * row];
        for _ in 0..t_dec {
            out.extend(last.iter().map(|&v| v as f64));
        }
    }
    out
}

/// Ground-truth future `[samples, t_dec, N, S]`.
pub fn future_of(data: &TrajectoryBatch, t_enc: usize, t_dec: usize) -> Vec<f64> {
    let [samples, _, n, s] = data.dims;
    let row = n * s;
    let mut out = Vec::with_capacity(samples * t_dec * row);
    for i in 0..samples {
        out.extend(
            data.sample(i)[t_enc * row..(t_enc + t_dec) * row]
                .iter()
                .map(|&v| v as f64),
        );
    }
    out
}

fn check_window(data: &TrajectoryBatch, t_enc: usize, t_dec: usize) -> Result<(), EvalError> {
    if t_enc == 0 || t_dec == 0 || data.n_steps() < t_enc + t_dec {
        return Err(EvalError::Data(format!(
            "{} steps cannot hold a {t_enc} + {t_dec} window",
            data.n_steps()
        )));
    }
    Ok(())
}

pub fn static_baseline(
    data: &TrajectoryBatch,
    t_enc: usize,
    t_dec: usize,
    horizons: &[usize],
) -> Result<HorizonMse, EvalError> {
    check_window(data, t_enc, t_dec)?;
    let pred = static_paths(data, t_enc, t_dec);
    Ok(horizon_mse(
        &pred,
        &future_of(data, t_enc, t_dec),
        data.n_samples(),
        t_dec,
        horizons,
    )?)
}

/// `|pearson|` between the rows of an `n x width` matrix of per-agent feature
/// vectors. Pairs involving a constant vector score 0 and are counted.
pub fn feature_correlation_scores(features: &[f64], n: usize, width: usize) -> (Vec<f64>, usize) {
    let mut out = vec![0.0; n * n];
    let mut skipped = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            match pearson(
                &features[i * width..(i + 1) * width],
                &features[j * width..(j + 1) * width],
            ) {
                Ok(r) => out[i * n + j] = r.abs(),
                Err(MetricError::Undefined) => skipped += 1,
                Err(_) => unreachable!("equal lengths"),
            }
        }
    }
    (out, skipped)
}

/// Correlation between agents' encode-window trajectories (all variables
/// concatenated over time), one `N x N` matrix per sample.
pub fn corr_path_scores(data: &TrajectoryBatch, t_enc: usize) -> (Vec<Vec<f64>>, usize) {
    let [samples, _, n, s] = data.dims;
    let width = t_enc * s;
    let mut skipped = 0;
    let mut all = Vec::with_capacity(samples);
    for i in 0..samples {
        let x = data.sample(i);
        let mut f = vec![0.0; n * width];
        for t in 0..t_enc {
            for a in 0..n {
                for v in 0..s {
                    f[a * width + t * s + v] = x[(t * n + a) * s + v] as f64;
                }
            }
        }
        let (m, k) = feature_correlation_scores(&f, n, width);
        skipped += k;
        all.push(m);
    }
    (all, skipped)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LstmMode {
    /// One shared recurrent predictor per agent, no communication.
    Single,
    /// One predictor over the concatenated states of all agents.
    Joint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmConfig {
    pub mode: LstmMode,
    pub n_agents: usize,
    pub state_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub t_enc: usize,
    pub t_dec: usize,
}

impl LstmConfig {
    pub fn new(mode: LstmMode, n_agents: usize, state_dim: usize) -> Self {
        Self {
            mode,
            n_agents,
            state_dim,
            hidden: 256,
            layers: 2,
            t_enc: 50,
            t_dec: 50,
        }
    }

    fn width(&self) -> usize {
        match self.mode {
            LstmMode::Single => self.state_dim,
            LstmMode::Joint => self.n_agents * self.state_dim,
        }
    }
}

type State<'g, T> = Vec<(Var<'g, T>, Var<'g, T>)>;

/// Stacked LSTM with Gaussian heads over state changes.
pub struct LstmBaseline {
    pub config: LstmConfig,
    cells: Vec<LstmCellParams>,
    mean: Linear,
    var: Linear,
}

impl LstmBaseline {
    pub fn new<T: Real, R: Rng>(config: LstmConfig, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let w = config.width();
        let cells = (0..config.layers)
            .map(|l| {
                let d_in = if l == 0 { w } else { config.hidden };
                LstmCellParams::new(store, rng, &format!("lstm.{l}"), d_in, config.hidden)
            })
            .collect();
        let mean = Linear::new(store, rng, "lstm.mean", config.hidden, w, true);
        let var = Linear::new(store, rng, "lstm.var", config.hidden, w, true);
        Self {
            config,
            cells,
            mean,
            var,
        }
    }

    /// `[rows, width]` frame at step `t`; rows are samples x agents (single) or samples (joint).
    fn frame<T: Real>(&self, x: &SeqBatch<T>, t: usize) -> Tensor<T> {
        let f = x.frame(t);
        match self.config.mode {
            LstmMode::Single => f,
            LstmMode::Joint => f.reshaped(&[x.batch, x.agents * x.vars]).expect("same size"),
        }
    }

    fn step<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        state: &mut State<'g, T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>, ModelError> {
        let mut inp = x;
        for (cell, s) in self.cells.iter().zip(state.iter_mut()) {
            *s = cell.forward(g, store, *s, inp)?;
            inp = s.0;
        }
        Ok(inp)
    }

    fn check<T: Real>(&self, x: &SeqBatch<T>) -> Result<(), ModelError> {
        let c = &self.config;
        if x.vars != c.state_dim || (c.mode == LstmMode::Joint && x.agents != c.n_agents) {
            return Err(ModelError::Config(format!(
                "{} agents x {} variables do not fit a {:?} predictor for {} x {}",
                x.agents, x.vars, c.mode, c.n_agents, c.state_dim
            )));
        }
        if x.steps < c.t_enc {
            return Err(ModelError::Input(format!("{} steps, need {}", x.steps, c.t_enc)));
        }
        Ok(())
    }

    /// Runs the encode window; returns the state and the top hidden state.
    pub fn encode<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: &SeqBatch<T>,
    ) -> Result<(State<'g, T>, Var<'g, T>), ModelError> {
        self.check(x)?;
        let rows = self.frame(x, 0).rows();
        let h = self.config.hidden;
        let mut state: State<'g, T> = (0..self.config.layers)
            .map(|_| {
                (
                    g.constant(Tensor::zeros(&[rows, h])),
                    g.constant(Tensor::zeros(&[rows, h])),
                )
            })
            .collect();
        let mut top = state[0].0;
        for t in 0..self.config.t_enc {
            top = self.step(g, store, &mut state, g.constant(self.frame(x, t)))?;
        }
        Ok((state, top))
    }

    /// Closed-loop rollout and its NLL against the future of `x` (which must
    /// hold `t_enc + t_dec` steps). Returns the loss and the path `[t_dec][rows, width]`.
    pub fn rollout<'g, T: Real, R: Rng>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: &SeqBatch<T>,
        sample: bool,
        rng: &mut R,
    ) -> Result<(Option<Var<'g, T>>, Vec<Var<'g, T>>), ModelError> {
        let c = &self.config;
        let (mut state, mut top) = self.encode(g, store, x)?;
        let mut cur = g.constant(self.frame(x, c.t_enc - 1));
        let has_future = x.steps >= c.t_enc + c.t_dec;
        let (mut means, mut vars, mut path) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..c.t_dec {
            if t > 0 {
                top = self.step(g, store, &mut state, cur)?;
            }
            let mean = self.mean.forward(g, store, top)?;
            let raw = self.var.forward(g, store, top)?;
            let floor = g.constant(Tensor::full(&raw.shape(), T::from_f64(VARIANCE_FLOOR)));
            let var = raw.softplus().add(floor)?;
            let delta = if sample {
                let shape = mean.shape();
                let eps: Vec<T> = (0..mean.value().len())
                    .map(|_| T::from_f64(rng.sample(StandardNormal)))
                    .collect();
                mean.add(var.sqrt().mul(g.constant(Tensor::from_vec(&shape, eps)?))?)?
            } else {
                mean
            };
            cur = cur.add(delta)?;
            means.push(mean);
            vars.push(var);
            path.push(cur);
        }
        if !has_future {
            return Ok((None, path));
        }
        let mut y = Vec::new();
        let mut prev = self.frame(x, c.t_enc - 1);
        for t in 0..c.t_dec {
            let next = self.frame(x, c.t_enc + t);
            y.extend(next.data().iter().zip(prev.data()).map(|(&a, &b)| a - b));
            prev = next;
        }
        let mean = stack(&means)?;
        let var = stack(&vars)?;
        let y = g.constant(Tensor::from_vec(&mean.shape(), y)?);
        let scale = T::from_f64(1.0 / (c.t_dec * x.batch) as f64);
        Ok((Some(y.gaussian_nll(mean, var, scale)?), path))
    }

    /// Mean-path predictions `[samples, t_dec, N, S]` in normalized units.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, x: &SeqBatch<T>) -> Result<Vec<f64>, ModelError> {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, path) = self.rollout(&g, store, x, false, &mut rng)?;
        let row = x.agents * x.vars;
        let t_dec = self.config.t_dec;
        let mut out = vec![0.0; x.batch * t_dec * row];
        for (t, p) in path.iter().enumerate() {
            let v = p.value();
            for b in 0..x.batch {
                for k in 0..row {
                    out[(b * t_dec + t) * row + k] = Real::to_f64(v.data()[b * row + k]);
                }
            }
        }
        Ok(out)
    }

    /// Top-layer hidden state after the window, `[samples, N, hidden]` (single mode).
    pub fn final_hidden<T: Real>(&self, store: &ParamStore<T>, x: &SeqBatch<T>) -> Result<Vec<f64>, ModelError> {
        if self.config.mode != LstmMode::Single {
            return Err(ModelError::Config(
                "per-agent hidden states need the single mode".into(),
            ));
        }
        let g = Graph::new();
        let (_, top) = self.encode(&g, store, x)?;
        let out = top.value().data().iter().map(|&v| Real::to_f64(v)).collect();
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct LstmTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for LstmTraining {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            learning_rate: 5e-4,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

/// Trains a recurrent baseline with the sampled closed-loop NLL.
pub fn train_lstm<T: Real>(
    config: LstmConfig,
    train: &TrajectoryBatch,
    norm: &Normalizer,
    opts: &LstmTraining,
) -> Result<(LstmBaseline, ParamStore<T>), EvalError> {
    check_window(train, config.t_enc, config.t_dec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::new();
    let model = LstmBaseline::new(config, &mut store, &mut rng);
    let mut adam = AdamState::new(
        &store,
        AdamConfig {
            learning_rate: opts.learning_rate,
            ..AdamConfig::default()
        },
    );
    let window = model.config.t_enc + model.config.t_dec;
    let mut order: Vec<usize> = (0..train.n_samples()).collect();
    let mut step = 0u64;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(opts.seed, epoch as u64)));
        for idx in order.chunks(opts.batch_size.max(1)) {
            let x = norm.batch::<T>(train, idx, window)?;
            let g = Graph::new();
            let mut noise = ChaCha8Rng::seed_from_u64(sample_seed(opts.seed ^ 1, step));
            step += 1;
            let (loss, _) = model.rollout(&g, &store, &x, true, &mut noise)?;
            let loss = loss.expect("window holds the future");
            if !Real::to_f64(loss.item()).is_finite() {
                continue;
            }
            let mut grads = g.backward(loss, store.len())?;
            if !grads.all_finite() {
                continue;
            }
            if opts.clip_norm > 0.0 {
                grads.clip_global_norm(T::from_f64(opts.clip_norm));
            }
            adam.step(&mut store, &grads);
        }
    }
    Ok((model, store))
}

/// Horizon errors of a recurrent baseline in original units.
pub fn lstm_horizon_mse<T: Real>(
    model: &LstmBaseline,
    store: &ParamStore<T>,
    norm: &Normalizer,
    data: &TrajectoryBatch,
    horizons: &[usize],
) -> Result<HorizonMse, EvalError> {
    let c = &model.config;
    check_window(data, c.t_enc, c.t_dec)?;
    let s = data.n_vars();
    let idx: Vec<usize> = (0..data.n_samples()).collect();
    let mut pred = Vec::new();
    for chunk in idx.chunks(64) {
        let x = norm.batch::<T>(data, chunk, c.t_enc)?;
        pred.extend(model.predict(store, &x)?);
    }
    for (k, v) in pred.iter_mut().enumerate() {
        *v = norm.inverse(k % s, *v);
    }
    Ok(horizon_mse(
        &pred,
        &future_of(data, c.t_enc, c.t_dec),
        data.n_samples(),
        c.t_dec,
        horizons,
    )?)
}

/// Correlation between per-agent final hidden states of a single-mode predictor.
pub fn corr_lstm_scores<T: Real>(
    model: &LstmBaseline,
    store: &ParamStore<T>,
    norm: &Normalizer,
    data: &TrajectoryBatch,
) -> Result<(Vec<Vec<f64>>, usize), EvalError> {
    let [samples, _, n, _] = data.dims;
    let h = model.config.hidden;
    let mut all = Vec::with_capacity(samples);
    let mut skipped = 0;
    for i in 0..samples {
        let x = norm.batch::<T>(data, &[i], model.config.t_enc)?;
        let hid = model.final_hidden(store, &x)?;
        let (m, k) = feature_correlation_scores(&hid, n, h);
        skipped += k;
        all.push(m);
    }
    Ok((all, skipped))
}
