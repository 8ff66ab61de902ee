use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Real, Tensor};
use crate::model::{Normalizer, RainModel, RolloutMode};
use crate::sim::{GraphSet, TrajectoryBatch};

use super::metrics::{correlation_report, horizon_mse, CorrelationReport, HorizonMse, STANDARD_HORIZONS};
use super::EvalError;

/// Which graph drives the decoder during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphSource {
    Inferred,
    /// Ground-truth strengths replace the inferred ones.
    True,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub threads: usize,
    pub graph: GraphSource,
    /// Sample the rollout instead of following the mean.
    pub sample: bool,
    pub seed: u64,
    pub horizons: Vec<usize>,
    pub keep_paths: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            threads: 1,
            graph: GraphSource::Inferred,
            sample: false,
            seed: 0,
            horizons: STANDARD_HORIZONS.to_vec(),
            keep_paths: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Mean NLL per sample (averaged over decoder steps); needs the future.
    pub nll: Option<f64>,
    /// Errors in original units; needs the future.
    pub mse: Option<HorizonMse>,
    /// Inferred strengths against the truth, when graphs are given.
    pub corr: Option<CorrelationReport>,
    /// Inferred `N x N` strengths per sample.
    pub alphas: Vec<Vec<f64>>,
    /// Predicted `[samples, t_dec, N, S]` states in original units.
    pub paths: Option<Vec<f64>>,
}

struct Chunk {
    nll_sum: f64,
    alphas: Vec<Vec<f64>>,
    paths: Vec<f64>,
}

/// Runs the encoder and a closed-loop rollout on every sample of `data`.
pub fn evaluate<T: Real>(
    model: &RainModel,
    store: &ParamStore<T>,
    norm: &Normalizer,
    data: &TrajectoryBatch,
    graphs: Option<&GraphSet>,
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    let cfg = &model.config;
    let [samples, steps, n, s] = data.dims;
    if n != cfg.n_agents || s != cfg.state_dim {
        return Err(EvalError::Data(format!(
            "data has {n} agents x {s} variables, model expects {} x {}",
            cfg.n_agents, cfg.state_dim
        )));
    }
    if steps < cfg.t_enc {
        return Err(EvalError::Data(format!(
            "{steps} steps, the encoder needs {}",
            cfg.t_enc
        )));
    }
    if samples == 0 {
        return Err(EvalError::Data("no samples".into()));
    }
    if let Some(g) = graphs {
        if g.n_samples != samples || g.n_agents != n {
            return Err(EvalError::Data(format!(
                "{} graphs of {} agents for {samples} samples of {n}",
                g.n_samples, g.n_agents
            )));
        }
    }
    if opts.graph == GraphSource::True && graphs.is_none() {
        return Err(EvalError::Data("true-graph rollout needs ground-truth graphs".into()));
    }
    let has_future = steps >= cfg.t_enc + cfg.t_dec;
    let window = if has_future { cfg.t_enc + cfg.t_dec } else { cfg.t_enc };
    let bs = opts.batch_size.max(1);
    let batches: Vec<(usize, usize)> = (0..samples).step_by(bs).map(|a| (a, (a + bs).min(samples))).collect();

    let run = |bi: usize| -> Result<Chunk, EvalError> {
        let (a, b) = batches[bi];
        let idx: Vec<usize> = (a..b).collect();
        let x = norm.batch::<T>(data, &idx, window)?;
        let g = Graph::new();
        let (enc, alpha) = model.infer_graph(&g, store, &x)?;
        let alphas: Vec<Vec<f64>> = alpha
            .value()
            .data()
            .chunks_exact(n * n)
            .map(|m| m.iter().map(|&v| Real::to_f64(v)).collect())
            .collect();
        let drive = match opts.graph {
            GraphSource::Inferred => alpha,
            GraphSource::True => {
                let gs = graphs.expect("checked above");
                let mut w = Vec::with_capacity(idx.len() * n * n);
                for &i in &idx {
                    w.extend(gs.graph(i).iter().map(|&v| T::from_f64(v as f64)));
                }
                g.constant(Tensor::from_vec(&[idx.len(), n, n], w)?)
            }
        };
        let last = x.frame(cfg.t_enc - 1);
        let future = has_future.then(|| x.window(cfg.t_enc, cfg.t_dec));
        let mut rng = ChaCha8Rng::seed_from_u64(crate::sim::sample_seed(opts.seed, bi as u64));
        let roll = model.rollout(
            &g,
            store,
            &enc,
            drive,
            last.clone(),
            cfg.t_dec,
            RolloutMode::ClosedLoop { sample: opts.sample },
            None,
            &mut rng,
        )?;
        let nll_sum = match &future {
            Some(f) => {
                let targets = model.targets(&last, f, cfg.t_dec);
                Real::to_f64(model.nll(&g, &roll, &targets, idx.len())?.item()) * idx.len() as f64
            }
            None => 0.0,
        };
        // [t_dec][B*N, S] -> [B, t_dec, N, S] in original units.
        let row = n * s;
        let mut paths = vec![0.0; idx.len() * cfg.t_dec * row];
        for (t, p) in roll.path.iter().enumerate() {
            let v = p.value();
            for bb in 0..idx.len() {
                for k in 0..row {
                    paths[(bb * cfg.t_dec + t) * row + k] = norm.inverse(k % s, Real::to_f64(v.data()[bb * row + k]));
                }
            }
        }
        Ok(Chunk { nll_sum, alphas, paths })
    };

    let chunks = parallel_map(batches.len(), opts.threads, run)?;

    let mut alphas = Vec::with_capacity(samples);
    let mut paths = Vec::with_capacity(samples * cfg.t_dec * n * s);
    let mut nll_sum = 0.0;
    for c in chunks {
        nll_sum += c.nll_sum;
        alphas.extend(c.alphas);
        paths.extend(c.paths);
    }
    let mse = if has_future {
        let mut truth = Vec::with_capacity(paths.len());
        for i in 0..samples {
            let x = data.sample(i);
            truth.extend(
                x[cfg.t_enc * n * s..(cfg.t_enc + cfg.t_dec) * n * s]
                    .iter()
                    .map(|&v| v as f64),
            );
        }
        let horizons: Vec<usize> = opts.horizons.iter().copied().filter(|&h| h <= cfg.t_dec).collect();
        Some(horizon_mse(&paths, &truth, samples, cfg.t_dec, &horizons)?)
    } else {
        None
    };
    let corr = match graphs {
        Some(gs) => {
            let truths: Vec<Vec<f64>> = (0..samples)
                .map(|i| gs.graph(i).iter().map(|&v| v as f64).collect())
                .collect();
            correlation_report(&alphas, &truths, n).ok()
        }
        None => None,
    };
    Ok(Evaluation {
        nll: has_future.then(|| nll_sum / samples as f64),
        mse,
        corr,
        alphas,
        paths: opts.keep_paths.then_some(paths),
    })
}

/// Applies `f` to `0..count` on up to `threads` scoped workers, keeping order.
pub fn parallel_map<R: Send, E: Send>(
    count: usize,
    threads: usize,
    f: impl Fn(usize) -> Result<R, E> + Sync,
) -> Result<Vec<R>, E> {
    let threads = threads.clamp(1, count.max(1));
    if threads == 1 {
        return (0..count).map(f).collect();
    }
    let per = count.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>, E>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                scope.spawn(move || {
                    (w * per..((w + 1) * per).min(count))
                        .map(f)
                        .collect::<Result<Vec<R>, E>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
