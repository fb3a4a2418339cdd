use std::path::Path;

use serde_json::Value;
use songdisc::cli::run;

fn sd(args: &[&str]) -> i32 {
    let mut argv = vec!["songdisc"];
    argv.extend_from_slice(args);
    run(argv)
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{"total_steps": 3, "batch_size": 4, "checkpoint_every": 3, "validation_limit": 4,
  "model": {"hidden": 8, "heads": 1, "global_dim": 2, "local_dim": 4}}"#;

const GRID: &str = r#"{"reduce_dim": [2], "min_cluster_size": [3], "min_samples": [1, 2],
  "cluster_selection_epsilon": [0.0]}"#;

#[test]
fn usage_errors_and_help() {
    assert_eq!(sd(&[]), 1);
    assert_eq!(sd(&["train"]), 1);
    assert_eq!(sd(&["--help"]), 0);
    assert_eq!(sd(&["--version"]), 0);
    assert_eq!(sd(&["probe", "--help"]), 0);
}

#[test]
fn bad_config_is_validation_error_and_missing_input_is_not() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("c.sdc");
    assert_eq!(sd(&["--seed", "1", "synth", "--instances", "2", "--out", s(&corpus)]), 0);
    let cfg = d.path().join("bad.json");
    std::fs::write(&cfg, r#"{"optimizer": {"learning_rte": 0.1}}"#).unwrap();
    let out = d.path().join("run");
    assert_eq!(sd(&["train", "--config", s(&cfg), "--data", s(&corpus), "--out", s(&out)]), 1);
    std::fs::write(&cfg, r#"{"batch_size": 0}"#).unwrap();
    assert_eq!(sd(&["train", "--config", s(&cfg), "--data", s(&corpus), "--out", s(&out)]), 1);
    let missing = d.path().join("nope.sdc");
    assert_eq!(sd(&["train", "--data", s(&missing), "--out", s(&out)]), 2);
    assert_eq!(sd(&["probe", "--checkpoint", s(&missing), "--data", s(&corpus), "--mode", "traverse", "--out", "x.png"]), 2);
}

#[test]
fn end_to_end_commands() {
    let d = tempfile::tempdir().unwrap();
    let p = |n: &str| d.path().join(n);
    let corpus = p("corpus.sdc");
    assert_eq!(sd(&["--seed", "3", "synth", "--instances", "5", "--out", s(&corpus)]), 0);
    assert!(p("corpus.sdc.manifest.json").exists());

    let cfg = p("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let run_dir = p("dual");
    assert_eq!(sd(&["--seed", "3", "train", "--config", s(&cfg), "--data", s(&corpus), "--out", s(&run_dir)]), 0);
    let manifest = json(&run_dir.join("manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seeds"]["training"], 3);
    assert_eq!(manifest["config"]["training"]["batch_size"], 4);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 1);
    let ckpt = run_dir.join("last.ckpt");
    assert!(ckpt.exists());

    let base_dir = p("baseline");
    assert_eq!(sd(&["train-baseline", "--config", s(&cfg), "--data", s(&corpus), "--out", s(&base_dir)]), 0);

    let emb = p("emb.jsonl");
    assert_eq!(sd(&["embed", "--checkpoint", s(&ckpt), "--data", s(&corpus), "--out", s(&emb)]), 0);
    let lines = std::fs::read_to_string(&emb).unwrap();
    assert_eq!(lines.lines().count(), 40);
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["vector"].as_array().unwrap().len(), 4);
    let emb_base = p("emb_base.jsonl");
    let base_ckpt = base_dir.join("last.ckpt");
    assert_eq!(sd(&["embed", "--checkpoint", s(&base_ckpt), "--data", s(&corpus), "--out", s(&emb_base)]), 0);

    let units = p("units.json");
    assert_eq!(sd(&["analyze-units", "--checkpoint", s(&ckpt), "--data", s(&corpus), "--out", s(&units)]), 0);
    let report = json(&units);
    assert_eq!(report["mean_kl"].as_array().unwrap().len(), 4);
    assert!(p("unit_scatter.png").exists() && p("unit_kl.png").exists());

    let probe = p("probe.png");
    assert_eq!(sd(&["probe", "--checkpoint", s(&ckpt), "--data", s(&corpus), "--mode", "zero-local", "--out", s(&probe)]), 0);
    assert!(probe.exists());
    assert_eq!(sd(&["probe", "--checkpoint", s(&ckpt), "--data", s(&corpus), "--mode", "traverse", "--out", s(&probe)]), 1);
    assert_eq!(
        sd(&["probe", "--checkpoint", s(&ckpt), "--data", s(&corpus), "--mode", "traverse", "--unit", "9", "--out", s(&probe)]),
        1
    );
    assert_eq!(
        sd(&["probe", "--checkpoint", s(&ckpt), "--data", s(&corpus), "--mode", "traverse", "--unit", "1", "--out", s(&probe)]),
        0
    );

    let clustered = p("clusters.json");
    let args = ["cluster", "--embeddings", s(&emb), "--reduce-dim", "2", "--min-cluster-size", "3", "--out", s(&clustered)];
    assert_eq!(sd(&args), 0);
    let c = json(&clustered);
    assert_eq!(c["assignments"].as_array().unwrap().len(), 40);
    assert_eq!(c["params"]["reduce_dim"], 2);
    let nmi = c["nmi"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&nmi));

    let grid = p("grid.json");
    std::fs::write(&grid, GRID).unwrap();
    let evaluated = p("eval.json");
    let args = ["eval", "--embeddings", s(&emb), "--grid", s(&grid), "--report", s(&emb), "--out", s(&evaluated)];
    assert_eq!(sd(&args), 0);
    let e = json(&evaluated);
    assert_eq!(e["search"]["evaluated"].as_array().unwrap().len(), 2);
    assert_eq!(e["params"], e["search"]["best"]["params"]);

    let labels = p("labels.jsonl");
    let rows: Vec<String> = lines
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            serde_json::json!({"song_id": v["song_id"], "label": v["individual_id"]}).to_string()
        })
        .collect();
    std::fs::write(&labels, rows.join("\n")).unwrap();
    let args = ["eval", "--embeddings", s(&emb), "--labels", s(&labels), "--grid", s(&grid), "--out", s(&evaluated)];
    assert_eq!(sd(&args), 0);
    std::fs::write(&labels, &rows[0]).unwrap();
    assert_eq!(sd(&args), 1);

    let plot = p("proj.png");
    assert_eq!(sd(&["plot", "--embeddings", s(&emb_base), "--out", s(&plot)]), 0);
    assert!(plot.exists());
}

#[test]
fn pipeline_writes_report_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("p.json");
    let text = format!(r#"{{"corpus": {{"instances_per_type": 8}}, "training": {TINY}, "grid": {GRID}, "probe_songs": 2}}"#);
    std::fs::write(&cfg, text).unwrap();
    let out = d.path().join("run");
    assert_eq!(sd(&["--seed", "5", "pipeline", "--config", s(&cfg), "--out", s(&out)]), 0);
    let r = json(&out.join("results.json"));
    assert_eq!(r["seed"], 5);
    assert_eq!(r["held_out_types"].as_array().unwrap().len(), 2);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["command"], "pipeline");
    let artifacts: Vec<String> = m["artifacts"].as_array().unwrap().iter().map(|a| a.as_str().unwrap().to_string()).collect();
    for f in ["results.json", "embeddings.jsonl", "projection.png", "probe.png"] {
        assert!(artifacts.iter().any(|a| a.ends_with(f)), "{f} missing from {artifacts:?}");
    }
}
