//! Ground-truth interaction graphs, spring-ball and Kuramoto simulators, and
//! the dataset files they are written to.

pub mod dataset;
pub mod graph;
pub mod kuramoto;
pub mod spring;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{GraphSet, Task, TrajectoryBatch};
pub use graph::{build_multilayer_graph, sample_interaction_graph, weak_link_preset, InteractionGraph};
pub use kuramoto::{simulate_kuramoto, KURAMOTO_LAYOUT};
pub use spring::{simulate_springs, SPRING_LAYOUT};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("a graph needs at least 2 agents, got {0}")]
    InvalidSize(usize),
    #[error("invalid multilayer topology: {0}")]
    Topology(String),
    #[error("state became non-finite at raw step {step}")]
    Divergence { step: usize },
    #[error("inconsistent configuration: {0}")]
    Config(String),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    VelocityVerlet,
    Rk4,
}

/// Which way the Kuramoto coupling term points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingSign {
    /// `sin(phi_i - phi_j)`.
    Literal,
    /// `sin(phi_j - phi_i)`, the synchronizing convention.
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub n_steps_raw: usize,
    pub subsample_stride: usize,
    /// Spring task only.
    pub box_half_width: f64,
    pub strength_scale: f64,
    pub seed: u64,
    pub integrator: Integrator,
    pub coupling_sign: CouplingSign,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::spring()
    }
}

impl SimConfig {
    pub fn spring() -> Self {
        Self {
            dt: 0.005,
            n_steps_raw: 1000,
            subsample_stride: 10,
            box_half_width: 2.5,
            strength_scale: 0.05,
            seed: 0,
            integrator: Integrator::VelocityVerlet,
            coupling_sign: CouplingSign::Literal,
        }
    }

    pub fn kuramoto() -> Self {
        Self {
            dt: 0.01,
            strength_scale: 2.0,
            integrator: Integrator::Rk4,
            ..Self::spring()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Kuramoto => Self::kuramoto(),
            _ => Self::spring(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) {
            return Err(SimError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.subsample_stride == 0 || !self.n_steps_raw.is_multiple_of(self.subsample_stride) {
            return Err(SimError::Config(format!(
                "{} raw steps are not divisible by stride {}",
                self.n_steps_raw, self.subsample_stride
            )));
        }
        if !(self.box_half_width > 0.0) {
            return Err(SimError::Config(format!("box half width {}", self.box_half_width)));
        }
        if !(self.strength_scale >= 0.0) {
            return Err(SimError::Config(format!("strength scale {}", self.strength_scale)));
        }
        Ok(())
    }

    pub fn stored_steps(&self) -> usize {
        self.n_steps_raw / self.subsample_stride.max(1)
    }
}

/// How each sample's ground-truth graph is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphKind {
    Random {
        edge_prob: f64,
        symmetric: bool,
    },
    /// Two dense layers of five joined by one weak link.
    WeakLink,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub task: Task,
    pub n_samples: usize,
    pub n_agents: usize,
    pub graph: GraphKind,
    pub sim: SimConfig,
}

impl DatasetSpec {
    pub fn new(task: Task, n_samples: usize, n_agents: usize, edge_prob: f64, seed: u64) -> Self {
        let mut sim = SimConfig::for_task(task);
        sim.seed = seed;
        Self {
            task,
            n_samples,
            n_agents,
            graph: GraphKind::Random {
                edge_prob,
                symmetric: true,
            },
            sim,
        }
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` in a dataset generated from `seed`, independent of
/// generation order.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Graph and stored trajectory of one sample.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> Result<(InteractionGraph, Vec<f64>), SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.sim.seed, index as u64));
    let graph = match &spec.graph {
        GraphKind::Random { edge_prob, symmetric } => {
            sample_interaction_graph(spec.n_agents, *edge_prob, *symmetric, &mut rng)?
        }
        GraphKind::WeakLink => weak_link_preset(&mut rng),
    };
    let traj = match spec.task {
        Task::Spring => simulate_springs(&graph, &spec.sim, &mut rng)?,
        Task::Kuramoto => simulate_kuramoto(&graph, &spec.sim, &mut rng)?,
        Task::External => return Err(SimError::Config("external data cannot be simulated".into())),
    };
    Ok((graph, traj))
}

/// Simulates every sample (spread over `threads` workers) and assembles the
/// trajectory batch and the matching graphs in index order.
pub fn generate_dataset(spec: &DatasetSpec, threads: usize) -> Result<(TrajectoryBatch, GraphSet), SimError> {
    spec.sim.validate()?;
    let n = match spec.graph {
        GraphKind::WeakLink => 10,
        GraphKind::Random { .. } => spec.n_agents,
    };
    if n < 2 {
        return Err(SimError::InvalidSize(n));
    }
    let layout: Vec<String> = match spec.task {
        Task::Spring => SPRING_LAYOUT.iter().map(|s| s.to_string()).collect(),
        Task::Kuramoto => KURAMOTO_LAYOUT.iter().map(|s| s.to_string()).collect(),
        Task::External => return Err(SimError::Config("external data cannot be simulated".into())),
    };
    let steps = spec.sim.stored_steps();
    let threads = threads.clamp(1, spec.n_samples.max(1));
    let mut results: Vec<Option<Result<(InteractionGraph, Vec<f64>), SimError>>> =
        (0..spec.n_samples).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = spec.n_samples.div_ceil(threads).max(1);
        for (c, slots) in results.chunks_mut(chunk).enumerate() {
            scope.spawn(move || {
                for (k, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(generate_sample(spec, c * chunk + k));
                }
            });
        }
    });
    let s = layout.len();
    let mut data = Vec::with_capacity(spec.n_samples * steps * n * s);
    let mut weights = Vec::with_capacity(spec.n_samples * n * n);
    for r in results {
        let (g, traj) = r.expect("every slot is filled")?;
        data.extend(traj.iter().map(|&v| v as f32));
        weights.extend(g.weights().iter().map(|&w| w as f32));
    }
    let batch = TrajectoryBatch::new(spec.task, layout, [spec.n_samples, steps, n, s], data, spec.sim.seed)?;
    let graphs = GraphSet::new(spec.task, spec.n_samples, n, weights, spec.sim.seed)?;
    Ok((batch, graphs))
}
