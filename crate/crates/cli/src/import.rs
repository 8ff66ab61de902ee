//! CSV trajectories: a header `t,agent,<var>...` (optionally led by a
//! `sample` column) and one row per (sample, step, agent) in any order.

use std::collections::BTreeMap;
use std::path::Path;

use rain::sim::{Task, TrajectoryBatch};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ImportError {
    #[error("line {line}: {msg}")]
    Line { line: u64, msg: String },
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    Io(String),
}

fn at(line: u64, msg: impl Into<String>) -> ImportError {
    ImportError::Line { line, msg: msg.into() }
}

/// Parses CSV text into a batch with task `external`.
pub fn parse_csv(text: &str) -> Result<TrajectoryBatch, ImportError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| at(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let has_sample = header.first().map(String::as_str) == Some("sample");
    let base = has_sample as usize;
    if header.len() < base + 3 || header[base] != "t" || header[base + 1] != "agent" {
        return Err(at(
            1,
            "header must be `[sample,]t,agent,<var>...` with at least one variable",
        ));
    }
    let layout: Vec<String> = header[base + 2..].to_vec();
    let s = layout.len();

    let mut rows: BTreeMap<(usize, usize, usize), Vec<f32>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            at(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let index = |k: usize, what: &str| -> Result<usize, ImportError> {
            rec[k]
                .parse::<usize>()
                .map_err(|_| at(line, format!("{what} `{}` is not a non-negative integer", &rec[k])))
        };
        let sample = if has_sample { index(0, "sample")? } else { 0 };
        let t = index(base, "t")?;
        let agent = index(base + 1, "agent")?;
        let mut values = Vec::with_capacity(s);
        for (k, name) in layout.iter().enumerate() {
            let raw = &rec[base + 2 + k];
            let v: f32 = raw
                .parse()
                .map_err(|_| at(line, format!("{name} `{raw}` is not a number")))?;
            if !v.is_finite() {
                return Err(at(line, format!("{name} is not finite")));
            }
            values.push(v);
        }
        if rows.insert((sample, t, agent), values).is_some() {
            return Err(at(
                line,
                format!("duplicate row for sample {sample}, t {t}, agent {agent}"),
            ));
        }
    }
    if rows.is_empty() {
        return Err(ImportError::Shape("no data rows".into()));
    }
    let max = |f: fn(&(usize, usize, usize)) -> usize| rows.keys().map(f).max().unwrap_or(0) + 1;
    let (b, t, n) = (max(|k| k.0), max(|k| k.1), max(|k| k.2));
    if rows.len() != b * t * n {
        let missing = (0..b)
            .flat_map(|i| (0..t).flat_map(move |tt| (0..n).map(move |a| (i, tt, a))))
            .find(|k| !rows.contains_key(k))
            .expect("some key is missing");
        return Err(ImportError::Shape(format!(
            "data is not rectangular: no row for sample {}, t {}, agent {}",
            missing.0, missing.1, missing.2
        )));
    }
    let data: Vec<f32> = rows.into_values().flatten().collect();
    TrajectoryBatch::new(Task::External, layout, [b, t, n, s], data, 0).map_err(|e| ImportError::Shape(e.to_string()))
}

/// Loads a `.csv` file or a binary trajectory file.
pub fn load_trajectories(path: &Path) -> Result<TrajectoryBatch, ImportError> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let text = std::fs::read_to_string(path).map_err(|e| ImportError::Io(format!("{}: {e}", path.display())))?;
        parse_csv(&text)
    } else {
        TrajectoryBatch::load(path).map_err(|e| ImportError::Io(format!("{}: {e}", path.display())))
    }
}

/// Writes a batch as CSV with a `sample` column.
pub fn to_csv(batch: &TrajectoryBatch) -> String {
    let [b, t, n, s] = batch.dims;
    let mut out = format!("sample,t,agent,{}\n", batch.layout.join(","));
    for i in 0..b {
        for tt in 0..t {
            for a in 0..n {
                out.push_str(&format!("{i},{tt},{a}"));
                for v in 0..s {
                    out.push_str(&format!(",{}", batch.get(i, tt, a, v)));
                }
                out.push('\n');
            }
        }
    }
    out
}
