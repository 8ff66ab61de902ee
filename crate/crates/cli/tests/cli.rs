use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rain::model::TargetMode;
use rain::sim::{GraphSet, TrajectoryBatch};
use rain_cli::import::{parse_csv, to_csv, ImportError};
use rain_cli::ExperimentConfig;

fn rain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rain"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rain(args);
    assert!(
        out.status.success(),
        "rain {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small widths so a full generate/train/eval cycle takes well under a second.
fn tiny_config(dir: &Path, n: usize, samples: usize) -> PathBuf {
    let mut c = ExperimentConfig::default();
    c.dataset.n_agents = n;
    c.dataset.n_train = samples;
    c.dataset.n_val = 3;
    c.train.batch_size = 4;
    c.train.epochs = 1;
    let m = &mut c.train.model;
    m.n_agents = n;
    m.state_mlp_hidden = 8;
    m.gru_input = 8;
    m.hidden_dim = 12;
    m.embed_dim = 8;
    m.heads = 2;
    m.decoder_hidden = 12;
    m.graph_mlp_hidden = vec![6, 4];
    m.gatv2_hidden = 6;
    m.t_enc = 10;
    m.t_dec = 12;
    let p = dir.join("tiny.toml");
    std::fs::write(&p, c.to_toml()).unwrap();
    p
}

fn trained_run(dir: &Path) -> PathBuf {
    let cfg = tiny_config(dir, 3, 6);
    let out = dir.join("run");
    ok(&["--out", s(&out), "--seed", "3", "generate", "--config", s(&cfg)]);
    ok(&["--out", s(&out), "train", "--quiet"]);
    out
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |o: &Path| {
        vec![
            "--out".to_string(),
            s(o).to_string(),
            "generate".into(),
            "--task".into(),
            "spring".into(),
            "--n".into(),
            "5".into(),
            "--samples".into(),
            "20".into(),
            "--seed".into(),
            "1".into(),
        ]
    };
    let run = |o: &Path| ok(&args(o).iter().map(String::as_str).collect::<Vec<_>>());
    let (da, db) = (run(&a), run(&b));
    assert_eq!(da, db);
    assert!(da.contains("dims=20x100x5x4"), "{da}");
    assert!(da.lines().all(|l| l.contains("sha256=")));
}

#[test]
fn kuramoto_layout_has_three_channels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k");
    let digest = ok(&[
        "--out",
        s(&out),
        "generate",
        "--task",
        "kuramoto",
        "--n",
        "4",
        "--samples",
        "2",
    ]);
    assert!(digest.contains("x4x3 layout="), "{digest}");
    let batch = TrajectoryBatch::load(&out.join("train.traj")).unwrap();
    assert_eq!(batch.n_vars(), 3);
    assert_eq!(batch.layout.len(), 3);
}

#[test]
fn weak_link_preset_topology() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w");
    ok(&["--out", s(&out), "generate", "--preset", "weak_link", "--samples", "2"]);
    let graphs = GraphSet::load(&out.join("train.graph")).unwrap();
    assert_eq!(graphs.n_agents, 10);
    for i in 0..graphs.n_samples {
        let w = graphs.graph(i);
        assert_eq!(w[3 * 10 + 8], 0.3);
        assert_eq!(w[8 * 10 + 3], 0.3);
        for a in 0..10 {
            for b in 0..10 {
                let cross = (a < 5) != (b < 5);
                if cross && (a, b) != (3, 8) && (a, b) != (8, 3) {
                    assert_eq!(w[a * 10 + b], 0.0);
                }
            }
        }
    }
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3, 4);
    let out = dir.path().join("z");
    ok(&["--out", s(&out), "generate", "--config", s(&cfg)]);
    let summary = ok(&["--out", s(&out), "train", "--epochs", "0", "--no-pa"]);
    assert!(summary.contains("epochs = 0"), "{summary}");
    assert!(out.join("checkpoint.bin").exists());
    let model = std::fs::read_to_string(out.join("model.toml")).unwrap();
    assert!(model.contains("use_pa = false"), "{model}");
}

#[test]
fn gatv2_flag_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3, 4);
    let out = dir.path().join("g");
    ok(&["--out", s(&out), "generate", "--config", s(&cfg)]);
    ok(&["--out", s(&out), "train", "--epochs", "0", "--graph", "gatv2"]);
    let model = std::fs::read_to_string(out.join("model.toml")).unwrap();
    assert!(model.contains("graph_variant = \"gatv2\""), "{model}");
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3, 4);
    let out = dir.path().join("e");
    // Training before generating is a configuration error.
    assert_eq!(rain(&["--out", s(&out), "train"]).status.code(), Some(2));
    ok(&["--out", s(&out), "generate", "--config", s(&cfg)]);
    assert_eq!(
        rain(&["--out", s(&out), "train", "--graph", "nope"]).status.code(),
        Some(2)
    );

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "t,agent,x\n0,0,1.0\n0,1,oops\n").unwrap();
    ok(&["--out", s(&out), "train", "--epochs", "0"]);
    let r = rain(&["--out", s(&out), "infer", "--input", s(&bad)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 3"));

    // A learning rate this large blows the loss up within a few batches.
    let r = rain(&["--out", s(&out), "train", "--epochs", "3", "--lr", "1e300", "--quiet"]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn incompatible_dims_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3, 4);
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("n_agents = 3\nstate_mlp", "n_agents = 4\nstate_mlp");
    std::fs::write(&cfg, text).unwrap();
    let r = rain(&["--out", s(&dir.path().join("m")), "generate", "--config", s(&cfg)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn eval_writes_reports_and_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained_run(dir.path());
    let summary = ok(&["--out", s(&run), "eval", "--true-graph"]);
    let report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    let hash_line = report.lines().next().unwrap();
    assert!(summary.contains(hash_line), "{summary}");
    assert!(summary.contains("true_graph_mse_10"));

    let metrics = std::fs::read_to_string(run.join("eval/metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,horizon,value"));
    assert!(metrics.contains("inferred_mse,10,"));
    assert!(metrics.contains("true_graph_mse,10,"));

    let svg = std::fs::read_to_string(run.join("eval/heatmap_0.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let panels: Vec<_> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("panel"))
        .collect();
    assert_eq!(panels.len(), 2);
    for p in panels {
        let cells = p.children().filter(|c| c.attribute("class") == Some("cell")).count();
        assert_eq!(cells, 9);
    }
}

#[test]
fn eval_on_training_data_matches_the_loop() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained_run(dir.path());
    let train = run.join("train.traj");
    let graphs = run.join("train.graph");
    let a = ok(&["--out", s(&run), "eval", "--data", s(&train), "--graphs", s(&graphs)]);
    let b = ok(&["--out", s(&run), "eval", "--data", s(&train), "--graphs", s(&graphs)]);
    assert_eq!(
        a.lines().skip(1).collect::<Vec<_>>(),
        b.lines().skip(1).collect::<Vec<_>>()
    );
    // The validation evaluation reproduces the in-loop record of the best epoch.
    let v = ok(&["--out", s(&run), "eval"]);
    let report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    let nll = |t: &str, key: &str| -> f64 {
        t.lines()
            .find_map(|l| l.strip_prefix(key))
            .unwrap()
            .trim()
            .parse()
            .unwrap()
    };
    assert_eq!(nll(&v, "nll = "), nll(&report, "best_val_nll = "));
}

#[test]
fn infer_on_exported_sample_matches_eval() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained_run(dir.path());
    ok(&["--out", s(&run), "eval"]);
    let val = TrajectoryBatch::load(&run.join("val.traj")).unwrap();
    let one = dir.path().join("one.traj");
    val.select(&[1]).save(&one).unwrap();
    let out = dir.path().join("inf");
    ok(&["--out", s(&out), "infer", "--run", s(&run), "--input", s(&one)]);

    let eval_rows: Vec<String> = std::fs::read_to_string(run.join("eval/predictions.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .filter_map(|l| l.strip_prefix("1,").map(str::to_string))
        .collect();
    let infer_rows: Vec<String> = std::fs::read_to_string(out.join("infer/predictions.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.strip_prefix("0,").unwrap().to_string())
        .collect();
    assert!(!infer_rows.is_empty());
    assert_eq!(eval_rows, infer_rows);

    // The same sample through CSV gives the same output, however rows are ordered.
    let csv = to_csv(&val.select(&[1]));
    let mut lines: Vec<&str> = csv.lines().collect();
    let header = lines.remove(0);
    lines.reverse();
    let shuffled = format!("{header}\n{}\n", lines.join("\n"));
    let path = dir.path().join("one.csv");
    std::fs::write(&path, shuffled).unwrap();
    let out2 = dir.path().join("inf2");
    ok(&["--out", s(&out2), "infer", "--run", s(&run), "--input", s(&path)]);
    assert_eq!(
        std::fs::read_to_string(out.join("infer/predictions.csv")).unwrap(),
        std::fs::read_to_string(out2.join("infer/predictions.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read_to_string(out.join("infer/alpha.csv")).unwrap(),
        std::fs::read_to_string(out2.join("infer/alpha.csv")).unwrap()
    );
    let svg = std::fs::read_to_string(out.join("infer/alpha.svg")).unwrap();
    roxmltree::Document::parse(&svg).unwrap();
}

#[test]
fn infer_rejects_a_variable_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained_run(dir.path());
    let mut rows = String::from("t,agent,x,y,z\n");
    for t in 0..12 {
        for a in 0..3 {
            rows.push_str(&format!("{t},{a},0.1,0.2,0.3\n"));
        }
    }
    let path = dir.path().join("three.csv");
    std::fs::write(&path, rows).unwrap();
    let r = rain(&[
        "--out",
        s(&dir.path().join("x")),
        "infer",
        "--run",
        s(&run),
        "--input",
        s(&path),
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("3 variables"));
}

#[test]
fn raw_target_mode_runs_through_infer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3, 4);
    let mut exp = ExperimentConfig::load(&cfg).unwrap();
    exp.train.model.target_mode = TargetMode::Raw;
    std::fs::write(&cfg, exp.to_toml()).unwrap();
    let run = dir.path().join("raw");
    ok(&["--out", s(&run), "generate", "--config", s(&cfg)]);
    ok(&["--out", s(&run), "train", "--quiet"]);
    let summary = ok(&["--out", s(&run), "infer", "--input", s(&run.join("val.traj"))]);
    assert!(summary.contains("predicted_steps = 12"));
}

#[test]
fn report_collects_run_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained_run(dir.path());
    ok(&["--out", s(&run), "eval"]);
    let text = ok(&["--out", s(&run), "report"]);
    assert!(text.contains("[training]") && text.contains("[evaluation]"));
    assert!(run.join("summary.txt").exists());
    let empty = dir.path().join("nothing");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(rain(&["--out", s(&empty), "report"]).status.code(), Some(3));
}

#[test]
fn experiment_config_round_trips() {
    let mut c = ExperimentConfig::desk(rain::sim::Task::Kuramoto);
    c.dataset.n_train = 17;
    c.eval.true_graph = true;
    let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_toml(), c.to_toml());
    let wrong = c
        .to_toml()
        .replace("schema_version = 1\ntask", "schema_version = 9\ntask");
    assert!(ExperimentConfig::from_toml(&wrong).is_err());
    assert!(ExperimentConfig::from_toml("bogus_key = 1").is_err());
}

#[test]
fn missing_referenced_files_are_config_errors() {
    let mut c = ExperimentConfig::default();
    c.train.train_data = Some(PathBuf::from("/nonexistent/train.traj"));
    assert!(ExperimentConfig::from_toml(&c.to_toml()).is_err());
}

#[test]
fn csv_import_normalizes_order() {
    let a = "sample,t,agent,x\n0,0,0,1\n0,0,1,2\n0,1,0,3\n0,1,1,4\n";
    let b = "sample,t,agent,x\n0,1,1,4\n0,0,1,2\n0,1,0,3\n0,0,0,1\n";
    let (pa, pb) = (parse_csv(a).unwrap(), parse_csv(b).unwrap());
    assert_eq!(pa, pb);
    assert_eq!(pa.dims, [1, 2, 2, 1]);
    assert_eq!(pa.data, vec![1.0, 2.0, 3.0, 4.0]);
    let no_sample = parse_csv("t,agent,x\n1,1,4\n0,1,2\n1,0,3\n0,0,1\n").unwrap();
    assert_eq!(no_sample.data, pa.data);
}

#[test]
fn csv_errors_carry_line_numbers() {
    let err = parse_csv("t,agent,x,y\n0,0,1,2\n0,1,1,zz\n").unwrap_err();
    assert!(matches!(err, ImportError::Line { line: 3, .. }), "{err}");
    let err = parse_csv("t,agent,x\n0,0,1\n0,0,2\n").unwrap_err();
    assert!(matches!(err, ImportError::Line { line: 3, .. }), "{err}");
    let err = parse_csv("t,agent,x\n0,0,1\n0,1\n").unwrap_err();
    assert!(matches!(err, ImportError::Line { line: 3, .. }), "{err}");
    let err = parse_csv("time,agent,x\n0,0,1\n").unwrap_err();
    assert!(matches!(err, ImportError::Line { line: 1, .. }), "{err}");
    assert!(matches!(
        parse_csv("t,agent,x\n0,0,1\n1,1,1\n"),
        Err(ImportError::Shape(_))
    ));
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    ok(&["--out", s(&out), "generate", "--n", "3", "--samples", "2"]);
    let batch = TrajectoryBatch::load(&out.join("train.traj")).unwrap();
    let back = parse_csv(&to_csv(&batch)).unwrap();
    assert_eq!(back.dims, batch.dims);
    assert_eq!(back.layout, batch.layout);
    assert_eq!(back.data, batch.data);
}
