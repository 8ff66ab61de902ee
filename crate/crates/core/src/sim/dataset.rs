//! Trajectory and graph files.
//!
//! Both share a text header terminated by `end`, followed by little-endian f32
//! values in row-major order:
//!
//! ```text
//! RAIN1
//! kind trajectories            kind graphs
//! task spring                  task spring
//! dims 2000 100 5 4            dims 2000 5 5
//! layout x y v_x v_y
//! seed 1                       seed 1
//! end                          end
//! ```

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::kuramoto::KURAMOTO_LAYOUT;
use super::spring::SPRING_LAYOUT;
use super::SimError;

const MAGIC: &str = "RAIN1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Spring,
    Kuramoto,
    External,
}

impl Task {
    pub fn tag(self) -> &'static str {
        match self {
            Task::Spring => "spring",
            Task::Kuramoto => "kuramoto",
            Task::External => "external",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Task {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spring" => Ok(Task::Spring),
            "kuramoto" => Ok(Task::Kuramoto),
            "external" => Ok(Task::External),
            other => Err(SimError::Format(format!("unknown task `{other}`"))),
        }
    }
}

/// `samples x T x N x S` trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub task: Task,
    pub layout: Vec<String>,
    /// `[samples, steps, agents, vars]`.
    pub dims: [usize; 4],
    pub data: Vec<f32>,
    pub seed: u64,
}

impl TrajectoryBatch {
    pub fn new(task: Task, layout: Vec<String>, dims: [usize; 4], data: Vec<f32>, seed: u64) -> Result<Self, SimError> {
        let expected: &[&str] = match task {
            Task::Spring => &SPRING_LAYOUT,
            Task::Kuramoto => &KURAMOTO_LAYOUT,
            Task::External => &[],
        };
        if !expected.is_empty() && layout.iter().map(String::as_str).ne(expected.iter().copied()) {
            return Err(SimError::Format(format!(
                "{task} layout must be {expected:?}, got {layout:?}"
            )));
        }
        if layout.len() != dims[3] {
            return Err(SimError::Format(format!(
                "{} layout names for {} variables",
                layout.len(),
                dims[3]
            )));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(SimError::Format(format!("{} values for dims {dims:?}", data.len())));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(SimError::Format(format!("non-finite value at flat index {k}")));
        }
        Ok(Self {
            task,
            layout,
            dims,
            data,
            seed,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.dims[0]
    }

    pub fn n_steps(&self) -> usize {
        self.dims[1]
    }

    pub fn n_agents(&self) -> usize {
        self.dims[2]
    }

    pub fn n_vars(&self) -> usize {
        self.dims[3]
    }

    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    /// `[T, N, S]` values of one sample.
    pub fn sample(&self, i: usize) -> &[f32] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn get(&self, sample: usize, t: usize, agent: usize, var: usize) -> f32 {
        let [_, steps, n, s] = self.dims;
        self.data[((sample * steps + t) * n + agent) * s + var]
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            task: self.task,
            layout: self.layout.clone(),
            dims: [indices.len(), self.dims[1], self.dims[2], self.dims[3]],
            data,
            seed: self.seed,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let [b, t, n, s] = self.dims;
        let header = format!(
            "{MAGIC}\nkind trajectories\ntask {}\ndims {b} {t} {n} {s}\nlayout {}\nseed {}\nend\n",
            self.task,
            self.layout.join(" "),
            self.seed
        );
        let mut out = header.into_bytes();
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SimError> {
        let (h, payload) = Header::parse(bytes, "trajectories")?;
        if h.dims.len() != 4 {
            return Err(SimError::Format("trajectory dims need 4 entries".into()));
        }
        let dims = [h.dims[0], h.dims[1], h.dims[2], h.dims[3]];
        let data = read_f32_block(payload, dims.iter().product())?;
        Self::new(h.task, h.layout.unwrap_or_default(), dims, data, h.seed)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::decode(&std::fs::read(path)?)
    }

    /// One sample as CSV rows `t,agent,<layout...>`.
    pub fn sample_csv(&self, i: usize) -> String {
        let mut out = format!("t,agent,{}\n", self.layout.join(","));
        for t in 0..self.n_steps() {
            for a in 0..self.n_agents() {
                let _ = write!(out, "{t},{a}");
                for v in 0..self.n_vars() {
                    let _ = write!(out, ",{}", self.get(i, t, a, v));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// One `N x N` ground-truth weight matrix per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSet {
    pub task: Task,
    pub n_samples: usize,
    pub n_agents: usize,
    pub weights: Vec<f32>,
    pub seed: u64,
}

impl GraphSet {
    pub fn new(task: Task, n_samples: usize, n_agents: usize, weights: Vec<f32>, seed: u64) -> Result<Self, SimError> {
        if weights.len() != n_samples * n_agents * n_agents {
            return Err(SimError::Format(format!(
                "{} weights for {n_samples} graphs of {n_agents}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(SimError::Format("graph weights must be finite and non-negative".into()));
        }
        Ok(Self {
            task,
            n_samples,
            n_agents,
            weights,
            seed,
        })
    }

    pub fn graph(&self, i: usize) -> &[f32] {
        let l = self.n_agents * self.n_agents;
        &self.weights[i * l..(i + 1) * l]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut weights = Vec::with_capacity(indices.len() * self.n_agents * self.n_agents);
        for &i in indices {
            weights.extend_from_slice(self.graph(i));
        }
        Self {
            n_samples: indices.len(),
            weights,
            ..self.clone()
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.n_agents;
        let header = format!(
            "{MAGIC}\nkind graphs\ntask {}\ndims {} {n} {n}\nseed {}\nend\n",
            self.task, self.n_samples, self.seed
        );
        let mut out = header.into_bytes();
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SimError> {
        let (h, payload) = Header::parse(bytes, "graphs")?;
        if h.dims.len() != 3 || h.dims[1] != h.dims[2] {
            return Err(SimError::Format(format!("graph dims {:?}", h.dims)));
        }
        let weights = read_f32_block(payload, h.dims.iter().product())?;
        Self::new(h.task, h.dims[0], h.dims[1], weights, h.seed)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Header {
    task: Task,
    dims: Vec<usize>,
    layout: Option<Vec<String>>,
    seed: u64,
}

impl Header {
    fn parse<'a>(bytes: &'a [u8], kind: &str) -> Result<(Self, &'a [u8]), SimError> {
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| SimError::Format("header is not terminated by `end`".into()))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| SimError::Format("header is not utf-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line.to_string());
        }
        if lines.first().map(String::as_str) != Some(MAGIC) {
            return Err(SimError::Format(format!("missing {MAGIC} magic")));
        }
        let (mut task, mut dims, mut layout, mut seed, mut found_kind) = (None, None, None, None, None);
        for line in &lines[1..] {
            let (key, value) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            match key {
                "kind" => found_kind = Some(value.to_string()),
                "task" => task = Some(value.parse::<Task>()?),
                "dims" => {
                    dims = Some(
                        value
                            .split_whitespace()
                            .map(str::parse)
                            .collect::<Result<Vec<usize>, _>>()
                            .map_err(|_| SimError::Format(format!("bad dims `{value}`")))?,
                    )
                }
                "layout" => layout = Some(value.split_whitespace().map(str::to_string).collect()),
                "seed" => {
                    seed = Some(
                        value
                            .parse()
                            .map_err(|_| SimError::Format(format!("bad seed `{value}`")))?,
                    )
                }
                other => return Err(SimError::Format(format!("unknown header field `{other}`"))),
            }
        }
        if found_kind.as_deref() != Some(kind) {
            return Err(SimError::Format(format!(
                "expected a {kind} file, found {found_kind:?}"
            )));
        }
        let missing = |f: &str| SimError::Format(format!("header lacks `{f}`"));
        Ok((
            Self {
                task: task.ok_or_else(|| missing("task"))?,
                dims: dims.ok_or_else(|| missing("dims"))?,
                layout,
                seed: seed.ok_or_else(|| missing("seed"))?,
            },
            &bytes[pos..],
        ))
    }
}

fn read_f32_block(payload: &[u8], count: usize) -> Result<Vec<f32>, SimError> {
    if payload.len() != count * 4 {
        return Err(SimError::Format(format!(
            "expected {} payload bytes, found {}",
            count * 4,
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SimError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}
