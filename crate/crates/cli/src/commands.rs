use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use rain::autodiff::{ParamStore, Real};
use rain::eval::report::{heatmap_svg, histogram_csv, matrix_csv, metrics_csv, write};
use rain::eval::{evaluate, EvalOptions, Evaluation, GraphSource};
use rain::model::{ModelDescriptor, RainModel};
use rain::sim::{generate_dataset, GraphSet, Task, TrajectoryBatch};
use rain::train::{load_checkpoint, train_run, Precision, TrainConfig, CHECKPOINT_FILE, DESCRIPTOR_FILE};

use crate::config::{parse_variant, ExperimentConfig};
use crate::import::load_trajectories;
use crate::CliError;

pub const EXPERIMENT_FILE: &str = "experiment.toml";
pub const TRAIN_DATA: &str = "train.traj";
pub const TRAIN_GRAPHS: &str = "train.graph";
pub const VAL_DATA: &str = "val.traj";
pub const VAL_GRAPHS: &str = "val.graph";

#[derive(Parser, Debug)]
#[command(name = "rain", version, about = "Relational inference on multi-agent trajectories")]
pub struct Cli {
    #[command(flatten)]
    pub globals: Globals,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Globals {
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 gives bit-reproducible runs).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Arithmetic precision: f32 or f64.
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
    /// Directory that receives every output.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate training and validation datasets.
    Generate(GenerateArgs),
    /// Train a model on the datasets of an experiment.
    Train(TrainArgs),
    /// Evaluate a trained model on a dataset.
    Eval(EvalArgs),
    /// Predict and infer interactions for imported trajectories.
    Infer(InferArgs),
    /// Summarize a run directory.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
pub struct GenerateArgs {
    /// Experiment config to start from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// spring or kuramoto.
    #[arg(long)]
    pub task: Option<Task>,
    /// Number of agents.
    #[arg(long)]
    pub n: Option<usize>,
    /// Training samples.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Validation samples (a quarter of the training count by default).
    #[arg(long)]
    pub val_samples: Option<usize>,
    /// Probability that a pair is connected.
    #[arg(long)]
    pub edge_prob: Option<f64>,
    /// random or weak_link.
    #[arg(long)]
    pub preset: Option<String>,
    /// Reduced model widths and epoch count for a single machine.
    #[arg(long)]
    pub desk: bool,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Experiment config (defaults to the one in the output directory).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Disable pairwise attention.
    #[arg(long)]
    pub no_pa: bool,
    /// Graph extractor: mlp or gatv2.
    #[arg(long)]
    pub graph: Option<String>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Samples per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Start from the checkpoint already in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    /// Training output directory (defaults to the output directory).
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Trajectories to evaluate (validation set of the run by default).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Ground-truth graphs for `--data`.
    #[arg(long)]
    pub graphs: Option<PathBuf>,
    /// Also roll out with the ground-truth graph in place of the inferred one.
    #[arg(long)]
    pub true_graph: bool,
    /// Number of per-sample heatmaps to write.
    #[arg(long, default_value_t = 8)]
    pub heatmaps: usize,
}

#[derive(Args, Debug, Default)]
pub struct InferArgs {
    /// Training output directory (defaults to the output directory).
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Trajectories as CSV or a binary trajectory file.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Args, Debug, Default)]
pub struct ReportArgs {
    /// Run directory (defaults to the output directory).
    #[arg(long)]
    pub run: Option<PathBuf>,
}

/// Runs one command and returns the text printed on success.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let g = &cli.globals;
    match cli.command {
        Command::Generate(a) => generate(g, &a),
        Command::Train(a) => train(g, &a),
        Command::Eval(a) => eval(g, &a),
        Command::Infer(a) => infer(g, &a),
        Command::Report(a) => report(g, &a),
    }
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn load_traj(path: &Path) -> Result<TrajectoryBatch, CliError> {
    TrajectoryBatch::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_graphs(path: &Path) -> Result<GraphSet, CliError> {
    GraphSet::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn experiment_from(path: Option<&Path>, out: &Path) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => {
            let p = out.join(EXPERIMENT_FILE);
            if p.exists() {
                ExperimentConfig::load(&p)
            } else {
                Err(CliError::Config(format!(
                    "no experiment config: pass --config or run `generate` into {}",
                    out.display()
                )))
            }
        }
    }
}

pub fn generate(g: &Globals, a: &GenerateArgs) -> Result<String, CliError> {
    let task = a.task.unwrap_or(Task::Spring);
    if task == Task::External {
        return Err(CliError::Config(
            "external trajectories are imported, not generated".into(),
        ));
    }
    let mut exp = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if a.desk => ExperimentConfig::desk(task),
        None => ExperimentConfig {
            task,
            ..ExperimentConfig::default()
        },
    };
    if a.config.is_some() {
        if let Some(t) = a.task {
            exp.task = t;
        }
    }
    let d = &mut exp.dataset;
    if let Some(p) = &a.preset {
        d.preset = p.clone();
        if p == "weak_link" {
            d.n_agents = 10;
        }
    }
    if let Some(n) = a.n {
        d.n_agents = n;
    }
    if let Some(s) = a.samples {
        d.n_train = s;
        d.n_val = a.val_samples.unwrap_or((s / 4).max(1));
    }
    if let Some(v) = a.val_samples {
        d.n_val = v;
    }
    if let Some(p) = a.edge_prob {
        d.edge_prob = p;
    }
    if let Some(s) = g.seed {
        d.seed = s;
        exp.train.seed = s;
    }
    exp.train.model.n_agents = exp.dataset.n_agents;
    exp.train.model.state_dim = match exp.task {
        Task::Kuramoto => 3,
        _ => 4,
    };
    exp.output_dir = g.out.clone();
    exp.validate()?;

    let threads = g.threads.unwrap_or(1);
    std::fs::create_dir_all(&g.out)?;
    let mut digest = String::new();
    for (val, data_file, graph_file) in [(false, TRAIN_DATA, TRAIN_GRAPHS), (true, VAL_DATA, VAL_GRAPHS)] {
        let spec = exp.dataset_spec(val)?;
        let (batch, graphs) = generate_dataset(&spec, threads)?;
        let (dp, gp) = (g.out.join(data_file), g.out.join(graph_file));
        batch.save(&dp)?;
        graphs.save(&gp)?;
        let [b, t, n, s] = batch.dims;
        let _ = writeln!(
            digest,
            "{data_file} sha256={} dims={b}x{t}x{n}x{s} layout={}",
            sha256_file(&dp)?,
            batch.layout.join(",")
        );
        let _ = writeln!(digest, "{graph_file} sha256={} dims={b}x{n}x{n}", sha256_file(&gp)?);
    }
    write(&g.out.join(EXPERIMENT_FILE), &exp.to_toml())?;
    Ok(digest)
}

fn train_config(g: &Globals, a: &TrainArgs, exp: &ExperimentConfig) -> Result<TrainConfig, CliError> {
    // A resumed run continues from the configuration it was trained with.
    let saved = g.out.join("train.toml");
    let mut cfg = if a.resume && saved.exists() {
        TrainConfig::from_toml(&std::fs::read_to_string(&saved)?).map_err(CliError::Config)?
    } else {
        exp.train.clone()
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    if let Some(p) = g.precision {
        cfg.precision = p;
    }
    if a.no_pa {
        cfg.model.use_pa = false;
    }
    if let Some(v) = &a.graph {
        cfg.model.graph_variant = parse_variant(v)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    let base = &g.out;
    let resolve = |explicit: &Option<PathBuf>, name: &str| explicit.clone().unwrap_or_else(|| base.join(name));
    cfg.train_data = Some(resolve(&cfg.train_data, TRAIN_DATA));
    cfg.train_graphs = Some(resolve(&cfg.train_graphs, TRAIN_GRAPHS));
    cfg.val_data = Some(resolve(&cfg.val_data, VAL_DATA));
    cfg.val_graphs = Some(resolve(&cfg.val_graphs, VAL_GRAPHS));
    if a.resume {
        let ckpt = base.join(CHECKPOINT_FILE);
        if !ckpt.exists() {
            return Err(CliError::Config(format!(
                "nothing to resume: {} is missing",
                ckpt.display()
            )));
        }
        cfg.init_checkpoint = Some(ckpt);
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

pub fn train(g: &Globals, a: &TrainArgs) -> Result<String, CliError> {
    let exp = experiment_from(a.config.as_deref(), &g.out)?;
    let cfg = train_config(g, a, &exp)?;
    for p in [&cfg.train_data, &cfg.val_data].into_iter().flatten() {
        if !p.exists() {
            return Err(CliError::Config(format!(
                "{} does not exist; run `generate` first",
                p.display()
            )));
        }
    }
    let train = load_traj(cfg.train_data.as_ref().expect("resolved"))?;
    let val = load_traj(cfg.val_data.as_ref().expect("resolved"))?;
    let val_graphs = match &cfg.val_graphs {
        Some(p) if p.exists() => Some(load_graphs(p)?),
        _ => None,
    };
    let quiet = a.quiet;
    let progress = |r: &rain::train::EpochRecord| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train {:.4}  val {:.4}  mse@10 {:.4}  rho_tot {:.4}  {:.0}s",
                r.epoch, r.train_nll, r.val_nll, r.val_mse[0], r.rho_tot, r.wall_secs
            );
        }
    };
    std::fs::create_dir_all(&g.out)?;
    let report = match cfg.precision {
        Precision::F32 => train_run::<f32>(&cfg, &train, &val, val_graphs.as_ref(), Some(&g.out), progress)?.report,
        Precision::F64 => train_run::<f64>(&cfg, &train, &val, val_graphs.as_ref(), Some(&g.out), progress)?.report,
    };
    Ok(report.summary())
}

fn run_precision(run: &Path, g: &Globals) -> Precision {
    g.precision.unwrap_or_else(|| {
        std::fs::read_to_string(run.join("train.toml"))
            .ok()
            .and_then(|t| TrainConfig::from_toml(&t).ok())
            .map_or(Precision::F64, |c| c.precision)
    })
}

fn load_model<T: Real>(run: &Path) -> Result<(RainModel, ParamStore<T>, ModelDescriptor), CliError> {
    let dp = run.join(DESCRIPTOR_FILE);
    if !dp.exists() {
        return Err(CliError::Config(format!(
            "{} is missing; train a model first",
            dp.display()
        )));
    }
    let descriptor = ModelDescriptor::load(&dp)?;
    let (model, store) = load_checkpoint::<T>(&run.join(CHECKPOINT_FILE), &descriptor)?;
    Ok((model, store, descriptor))
}

fn check_fit(descriptor: &ModelDescriptor, data: &TrajectoryBatch) -> Result<(), CliError> {
    let m = &descriptor.model;
    let [_, steps, n, s] = data.dims;
    if s != m.state_dim {
        return Err(CliError::Data(format!(
            "input has {s} variables per agent, the checkpoint expects {}",
            m.state_dim
        )));
    }
    if n != m.n_agents {
        return Err(CliError::Data(format!(
            "input has {n} agents, the checkpoint expects {}",
            m.n_agents
        )));
    }
    if steps < m.t_enc {
        return Err(CliError::Data(format!(
            "input has {steps} steps, the encoder needs {}",
            m.t_enc
        )));
    }
    Ok(())
}

fn paths_csv(paths: &[f64], layout: &[String], samples: usize, steps: usize, n: usize, t0: usize) -> String {
    let s = layout.len();
    let mut out = format!("sample,t,agent,{}\n", layout.join(","));
    for i in 0..samples {
        for t in 0..steps {
            for a in 0..n {
                let _ = write!(out, "{i},{},{a}", t0 + t);
                let off = ((i * steps + t) * n + a) * s;
                for v in &paths[off..off + s] {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
    }
    out
}

fn alphas_csv(alphas: &[Vec<f64>], n: usize) -> String {
    let mut out = String::from("sample,i,j,alpha\n");
    for (k, m) in alphas.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                let _ = writeln!(out, "{k},{i},{j},{}", m[i * n + j]);
            }
        }
    }
    out
}

fn evaluate_at<T: Real>(
    run: &Path,
    data: &TrajectoryBatch,
    graphs: Option<&GraphSet>,
    opts: &[EvalOptions],
) -> Result<(ModelDescriptor, Vec<Evaluation>), CliError> {
    let (model, store, descriptor) = load_model::<T>(run)?;
    check_fit(&descriptor, data)?;
    let norm = &descriptor.normalizer;
    let evs = opts
        .iter()
        .map(|o| evaluate(&model, &store, norm, data, graphs, o))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((descriptor, evs))
}

fn eval_with(
    run: &Path,
    g: &Globals,
    data: &TrajectoryBatch,
    graphs: Option<&GraphSet>,
    opts: &[EvalOptions],
) -> Result<(ModelDescriptor, Vec<Evaluation>), CliError> {
    match run_precision(run, g) {
        Precision::F32 => evaluate_at::<f32>(run, data, graphs, opts),
        Precision::F64 => evaluate_at::<f64>(run, data, graphs, opts),
    }
}

pub fn eval(g: &Globals, a: &EvalArgs) -> Result<String, CliError> {
    let run = a.run.clone().unwrap_or_else(|| g.out.clone());
    let data_path = a.data.clone().unwrap_or_else(|| run.join(VAL_DATA));
    let data = load_trajectories(&data_path)?;
    let graph_path = a.graphs.clone().or_else(|| {
        let p = run.join(VAL_GRAPHS);
        (a.data.is_none() && p.exists()).then_some(p)
    });
    let graphs = graph_path.as_deref().map(load_graphs).transpose()?;
    if a.true_graph && graphs.is_none() {
        return Err(CliError::Config(
            "--true-graph needs ground-truth graphs (--graphs)".into(),
        ));
    }
    let base = EvalOptions {
        threads: g.threads.unwrap_or(1),
        seed: g.seed.unwrap_or(0),
        keep_paths: true,
        ..EvalOptions::default()
    };
    let mut opts = vec![base.clone()];
    if a.true_graph {
        opts.push(EvalOptions {
            graph: GraphSource::True,
            keep_paths: false,
            ..base
        });
    }
    let (descriptor, evs) = eval_with(&run, g, &data, graphs.as_ref(), &opts)?;
    let inferred = &evs[0];
    let m = &descriptor.model;
    let n = m.n_agents;
    let dir = g.out.join("eval");

    let mut mse = Vec::new();
    if let Some(h) = &inferred.mse {
        mse.push(("inferred", h));
    }
    if let Some(h) = evs.get(1).and_then(|e| e.mse.as_ref()) {
        mse.push(("true_graph", h));
    }
    let corr: Vec<_> = inferred.corr.iter().map(|c| ("alpha", c)).collect();
    write(&dir.join("metrics.csv"), &metrics_csv(&mse, &corr))?;
    if let Some(c) = &inferred.corr {
        write(&dir.join("rho_sample_hist.csv"), &histogram_csv(c))?;
    }
    write(&dir.join("alpha.csv"), &alphas_csv(&inferred.alphas, n))?;
    let paths = inferred.paths.as_ref().expect("paths requested");
    write(
        &dir.join("predictions.csv"),
        &paths_csv(paths, &data.layout, data.n_samples(), m.t_dec, n, m.t_enc),
    )?;
    for i in 0..a.heatmaps.min(data.n_samples()) {
        let est = &inferred.alphas[i];
        write(&dir.join(format!("alpha_{i}.csv")), &matrix_csv(est, n))?;
        let svg = match &graphs {
            Some(gs) => {
                let truth: Vec<f64> = gs.graph(i).iter().map(|&v| v as f64).collect();
                heatmap_svg(&[("truth", &truth), ("estimate", est)], n)
            }
            None => heatmap_svg(&[("estimate", est)], n),
        };
        write(&dir.join(format!("heatmap_{i}.svg")), &svg)?;
    }

    let mut summary = String::new();
    let _ = writeln!(summary, "config_hash = \"{}\"", descriptor.hash());
    let _ = writeln!(summary, "data = \"{}\"", data_path.display());
    let _ = writeln!(summary, "samples = {}", data.n_samples());
    if let Some(nll) = inferred.nll {
        let _ = writeln!(summary, "nll = {nll}");
    }
    for (label, h) in &mse {
        for (hz, v) in h.horizons.iter().zip(&h.mse) {
            let _ = writeln!(summary, "{label}_mse_{hz} = {v}");
        }
    }
    if let Some(c) = &inferred.corr {
        let _ = writeln!(summary, "rho_tot = {}", c.rho_tot);
        let _ = writeln!(summary, "rho_sample = {}", c.rho_sample_mean);
        let _ = writeln!(summary, "undefined_samples = {}", c.n_undefined);
    }
    write(&dir.join("eval.txt"), &summary)?;
    Ok(summary)
}

pub fn infer(g: &Globals, a: &InferArgs) -> Result<String, CliError> {
    let run = a.run.clone().unwrap_or_else(|| g.out.clone());
    let data = load_trajectories(&a.input)?;
    let opts = EvalOptions {
        threads: g.threads.unwrap_or(1),
        seed: g.seed.unwrap_or(0),
        keep_paths: true,
        ..EvalOptions::default()
    };
    let (descriptor, evs) = eval_with(&run, g, &data, None, &[opts])?;
    let ev = &evs[0];
    let m = &descriptor.model;
    let n = m.n_agents;
    let dir = g.out.join("infer");
    let paths = ev.paths.as_ref().expect("paths requested");
    write(
        &dir.join("predictions.csv"),
        &paths_csv(paths, &data.layout, data.n_samples(), m.t_dec, n, m.t_enc),
    )?;
    write(&dir.join("alpha.csv"), &alphas_csv(&ev.alphas, n))?;
    let titles: Vec<String> = (0..ev.alphas.len().min(8)).map(|i| format!("sample {i}")).collect();
    let panels: Vec<(&str, &[f64])> = titles
        .iter()
        .zip(&ev.alphas)
        .map(|(t, m)| (t.as_str(), m.as_slice()))
        .collect();
    write(&dir.join("alpha.svg"), &heatmap_svg(&panels, n))?;

    let mut summary = String::new();
    let _ = writeln!(summary, "config_hash = \"{}\"", descriptor.hash());
    let _ = writeln!(summary, "input = \"{}\"", a.input.display());
    let _ = writeln!(summary, "samples = {}", data.n_samples());
    let _ = writeln!(summary, "predicted_steps = {}", m.t_dec);
    if let Some(h) = &ev.mse {
        for (hz, v) in h.horizons.iter().zip(&h.mse) {
            let _ = writeln!(summary, "mse_{hz} = {v}");
        }
    }
    write(&dir.join("infer.txt"), &summary)?;
    Ok(summary)
}

pub fn report(g: &Globals, a: &ReportArgs) -> Result<String, CliError> {
    let run = a.run.clone().unwrap_or_else(|| g.out.clone());
    let mut out = String::new();
    let mut found = false;
    for (title, file) in [
        ("training", "report.txt"),
        ("evaluation", "eval/eval.txt"),
        ("inference", "infer/infer.txt"),
    ] {
        let p = run.join(file);
        if let Ok(text) = std::fs::read_to_string(&p) {
            found = true;
            let _ = writeln!(out, "[{title}]\n{text}");
        }
    }
    if !found {
        return Err(CliError::Data(format!(
            "{} holds no training, evaluation or inference output",
            run.display()
        )));
    }
    write(&g.out.join("summary.txt"), &out)?;
    Ok(out)
}
