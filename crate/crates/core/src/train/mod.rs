//! Optimization loop: seeded shuffling, data-parallel gradients, Adam with
//! global-norm clipping, per-epoch validation and best-model retention.

mod config;
mod report;

pub use config::{Precision, TrainConfig, TRAIN_SCHEMA};
pub use report::{EpochRecord, RunReport};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::{self, CheckpointError};
use crate::autodiff::{AdamConfig, AdamState, AutodiffError, Gradients, Graph, ParamStore, Real};
use crate::eval::{evaluate, parallel_map, EvalError, EvalOptions, Evaluation};
use crate::model::{ModelDescriptor, ModelError, Normalizer, RainModel, Rollout, RolloutMode, SeqBatch};
use crate::sim::{sample_seed, GraphSet, TrajectoryBatch};

/// Consecutive non-finite batches tolerated before a run is aborted.
pub const MAX_NONFINITE_BATCHES: usize = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DESCRIPTOR_FILE: &str = "model.toml";

/// First non-finite prediction of a rollout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonFinite {
    pub step: usize,
    pub sample: usize,
    pub agent: usize,
    pub channel: usize,
}

impl std::fmt::Display for NonFinite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "decoder step {}, sample {}, agent {}, channel {}",
            self.step, self.sample, self.agent, self.channel
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("loss diverged at epoch {epoch}, batch {batch}{}", .at.as_ref().map(|a| format!(" ({a})")).unwrap_or_default())]
    Divergence {
        epoch: usize,
        batch: usize,
        at: Option<NonFinite>,
    },
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => TrainError::Model(m),
            other => TrainError::Data(other.to_string()),
        }
    }
}

pub struct TrainOutcome<T> {
    pub report: RunReport,
    pub model: RainModel,
    /// Parameters of the best validation epoch (the initialization when none ran).
    pub store: ParamStore<T>,
    pub descriptor: ModelDescriptor,
}

/// Scans a rollout for the first non-finite mean or variance.
pub fn locate_nonfinite<T: Real>(roll: &Rollout<'_, T>, agents: usize, vars: usize) -> Option<NonFinite> {
    for (t, (m, v)) in roll.mean.iter().zip(&roll.var).enumerate() {
        let (m, v) = (m.value(), v.value());
        if let Some(k) = m
            .data()
            .iter()
            .zip(v.data())
            .position(|(a, b)| !a.is_finite() || !b.is_finite())
        {
            let row = k / vars;
            return Some(NonFinite {
                step: t,
                sample: row / agents,
                agent: row % agents,
                channel: k % vars,
            });
        }
    }
    None
}

/// Loss and gradients of one (sub)batch. The loss is scaled by `weight` so
/// that chunk results add up to the full-batch mean.
pub fn batch_gradients<T: Real>(
    model: &RainModel,
    store: &ParamStore<T>,
    x: &SeqBatch<T>,
    mode: RolloutMode,
    weight: f64,
    seed: u64,
) -> Result<(f64, Gradients<T>, Option<NonFinite>), ModelError> {
    let cfg = &model.config;
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (enc, alpha) = model.infer_graph(&g, store, x)?;
    let last = x.frame(cfg.t_enc - 1);
    let future = x.window(cfg.t_enc, cfg.t_dec);
    let roll = model.rollout(
        &g,
        store,
        &enc,
        alpha,
        last.clone(),
        cfg.t_dec,
        mode,
        Some(&future),
        &mut rng,
    )?;
    let targets = model.targets(&last, &future, cfg.t_dec);
    let loss = match model.nll(&g, &roll, &targets, x.batch) {
        Ok(l) => l.scale(T::from_f64(weight)),
        // A non-finite predicted variance fails the NLL's domain check.
        Err(ModelError::Autodiff(AutodiffError::Domain(_))) => {
            let at = locate_nonfinite(&roll, cfg.n_agents, cfg.state_dim);
            return Ok((f64::NAN, Gradients::empty(store.len()), at));
        }
        Err(e) => return Err(e),
    };
    let value = Real::to_f64(loss.item());
    if !value.is_finite() {
        let at = locate_nonfinite(&roll, cfg.n_agents, cfg.state_dim);
        return Ok((value, Gradients::empty(store.len()), at));
    }
    let grads = g.backward(loss, store.len())?;
    Ok((value, grads, None))
}

fn check_data(cfg: &TrainConfig, data: &TrajectoryBatch, what: &str) -> Result<(), TrainError> {
    let m = &cfg.model;
    let [samples, steps, n, s] = data.dims;
    if n != m.n_agents || s != m.state_dim {
        return Err(TrainError::Config(format!(
            "{what} has {n} agents x {s} variables, model expects {} x {}",
            m.n_agents, m.state_dim
        )));
    }
    if steps < m.t_enc + m.t_dec {
        return Err(TrainError::Config(format!(
            "{what} has {steps} steps, fewer than t_enc + t_dec = {}",
            m.t_enc + m.t_dec
        )));
    }
    if samples == 0 {
        return Err(TrainError::Data(format!("{what} is empty")));
    }
    Ok(())
}

/// Trains from scratch (or from `init_checkpoint`) and keeps the epoch with
/// the lowest validation NLL. With `out_dir`, the best checkpoint, model
/// descriptor and reports are written there.
pub fn train_run<T: Real>(
    cfg: &TrainConfig,
    train: &TrajectoryBatch,
    val: &TrajectoryBatch,
    val_graphs: Option<&GraphSet>,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    check_data(cfg, train, "training data")?;
    check_data(cfg, val, "validation data")?;
    if train.layout != val.layout {
        return Err(TrainError::Config("training and validation layouts differ".into()));
    }
    let m = &cfg.model;
    let normalizer = if cfg.normalize {
        Normalizer::fit(train)
    } else {
        Normalizer::identity(m.state_dim)
    };
    let descriptor = ModelDescriptor::new(train.task, train.layout.clone(), m.clone(), normalizer.clone());
    let hash = descriptor.hash();

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<T>::new();
    let model = RainModel::new(m.clone(), &mut store, &mut init_rng)?;
    if let Some(path) = &cfg.init_checkpoint {
        let (_, loaded) = checkpoint::load::<T>(path, Some(&hash))?;
        checkpoint::restore_into(&mut store, &loaded)?;
    }
    let mut adam = AdamState::new(
        &store,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mode = RolloutMode::ClosedLoop {
        sample: cfg.sample_noise,
    };
    let eval_opts = EvalOptions {
        threads: cfg.threads,
        seed: cfg.seed,
        ..EvalOptions::default()
    };
    let window = m.t_enc + m.t_dec;

    let mut report = RunReport {
        config_hash: hash.clone(),
        ..RunReport::default()
    };
    let mut best_store = store.clone();
    let mut best_nll = f64::INFINITY;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.n_samples()).collect();
    let mut global_batch: u64 = 0;
    let mut consecutive_bad = 0;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut shuffle = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ 0x5348_5546, epoch as u64));
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut skipped = 0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let workers = cfg.threads.clamp(1, idx.len());
            let per = idx.len().div_ceil(workers);
            let parts: Vec<&[usize]> = idx.chunks(per).collect();
            let results = parallel_map(parts.len(), workers, |w| -> Result<_, TrainError> {
                let x = normalizer.batch::<T>(train, parts[w], window)?;
                let weight = parts[w].len() as f64 / idx.len() as f64;
                let seed = sample_seed(cfg.seed, global_batch * 64 + w as u64);
                Ok(batch_gradients(&model, &store, &x, mode, weight, seed)?)
            })?;
            global_batch += 1;
            let mut grads = Gradients::empty(store.len());
            let mut loss = 0.0;
            let mut at = None;
            for (l, g, a) in results {
                loss += l;
                grads.accumulate(&g);
                at = at.or(a);
            }
            if !loss.is_finite() || !grads.all_finite() {
                skipped += 1;
                consecutive_bad += 1;
                if consecutive_bad >= MAX_NONFINITE_BATCHES {
                    return Err(TrainError::Divergence { epoch, batch: bi, at });
                }
                continue;
            }
            consecutive_bad = 0;
            if cfg.clip_norm > 0.0 {
                grads.clip_global_norm(T::from_f64(cfg.clip_norm));
            }
            adam.step(&mut store, &grads);
            if !store.all_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: bi,
                    at: None,
                });
            }
            loss_sum += loss;
            loss_count += 1;
        }

        let ev = match evaluate(&model, &store, &normalizer, val, val_graphs, &eval_opts) {
            Ok(ev) => ev,
            Err(EvalError::Model(ModelError::Autodiff(AutodiffError::Domain(_)))) => {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: order.len().div_ceil(cfg.batch_size),
                    at: None,
                })
            }
            Err(e) => return Err(e.into()),
        };
        let record = epoch_record(epoch, loss_sum / loss_count.max(1) as f64, &ev, skipped, start);
        if record.val_nll < best_nll {
            best_nll = record.val_nll;
            best_store = store.clone();
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        on_epoch(&record);
        report.records.push(record);
        if cfg.patience > 0 && since_best >= cfg.patience {
            break;
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let step = report.best_epoch.map_or(0, |e| e as u64 + 1);
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &best_store, &hash, step)?;
        descriptor.save(&dir.join(DESCRIPTOR_FILE))?;
        std::fs::write(dir.join("train.toml"), cfg.to_toml())?;
        std::fs::write(dir.join("report.csv"), report.to_csv())?;
        std::fs::write(dir.join("report.txt"), report.summary())?;
    }
    Ok(TrainOutcome {
        report,
        model,
        store: best_store,
        descriptor,
    })
}

fn epoch_record(epoch: usize, train_nll: f64, ev: &Evaluation, skipped: usize, start: Instant) -> EpochRecord {
    let mse = |h: usize| ev.mse.as_ref().and_then(|m| m.at(h)).unwrap_or(f64::NAN);
    EpochRecord {
        epoch,
        train_nll,
        val_nll: ev.nll.unwrap_or(f64::NAN),
        val_mse: [mse(10), mse(30), mse(50)],
        rho_tot: ev.corr.as_ref().map_or(f64::NAN, |c| c.rho_tot),
        rho_sample: ev.corr.as_ref().map_or(f64::NAN, |c| c.rho_sample_mean),
        skipped_batches: skipped,
        wall_secs: start.elapsed().as_secs_f64(),
    }
}

/// Rebuilds a model and its parameters from a training output directory.
pub fn load_trained<T: Real>(dir: &Path) -> Result<(RainModel, ParamStore<T>, ModelDescriptor), TrainError> {
    let descriptor = ModelDescriptor::load(&dir.join(DESCRIPTOR_FILE))?;
    let (model, store) = load_checkpoint(&dir.join(CHECKPOINT_FILE), &descriptor)?;
    Ok((model, store, descriptor))
}

pub fn load_checkpoint<T: Real>(
    path: &Path,
    descriptor: &ModelDescriptor,
) -> Result<(RainModel, ParamStore<T>), TrainError> {
    let (_, loaded) = checkpoint::load::<T>(path, Some(&descriptor.hash()))?;
    let mut store = ParamStore::<T>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = RainModel::new(descriptor.model.clone(), &mut store, &mut rng)?;
    checkpoint::restore_into(&mut store, &loaded)?;
    Ok((model, store))
}
