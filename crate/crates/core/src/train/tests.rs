use super::*;
use crate::data::{desk_corpus_spec, generate_synthetic_corpus};

fn tiny_config() -> TrainingConfig {
    TrainingConfig {
        model: ModelConfig { hidden: 8, heads: 2, global_dim: 2, local_dim: 3, ..ModelConfig::desk() },
        batch_size: 4,
        total_steps: 6,
        checkpoint_every: 3,
        validation_limit: 4,
        objective: Objective {
            global_capacity: CapacitySchedule { c_max: 0.4, ramp_steps: 4 },
            local_capacity: CapacitySchedule { c_max: 2.0, ramp_steps: 4 },
            ..Objective::default()
        },
        ..TrainingConfig::desk()
    }
}

fn corpus() -> Vec<MelSpectrogram> {
    generate_synthetic_corpus(&desk_corpus_spec(2, 0.05), 3).unwrap()
}

fn params(store: &ParamStore) -> Vec<Vec<f32>> {
    store.named_tensors().iter().map(|(_, t)| t.flatten_all().unwrap().to_vec1::<f32>().unwrap()).collect()
}

#[test]
fn presets_validate() {
    TrainingConfig::paper().validate().unwrap();
    TrainingConfig::desk().validate().unwrap();
    let p = TrainingConfig::paper();
    assert_eq!((p.batch_size, p.total_steps, p.optimizer.learning_rate), (64, 200_000, 1e-4));
    let d = TrainingConfig::desk();
    assert_eq!((d.model.global_dim, d.model.local_dim, d.total_steps, d.batch_size), (16, 16, 800, 16));
    let w = d.objective.weights;
    assert_eq!((w.gamma_global, w.gamma_local), (10.0, 0.1));
    assert_eq!(p.objective.weights.gamma_global, 100.0);
}

#[test]
fn config_rejects_unknown_keys() {
    let mut v = serde_json::to_value(TrainingConfig::desk()).unwrap();
    v["gamma"] = serde_json::json!(3);
    let err = serde_json::from_value::<TrainingConfig>(v).unwrap_err().to_string();
    assert!(err.contains("gamma"), "{err}");
}

#[test]
fn zero_steps_leave_params_unchanged() {
    let songs = corpus();
    let refs: Vec<&MelSpectrogram> = songs.iter().collect();
    let cfg = TrainingConfig { total_steps: 0, ..tiny_config() };
    let fresh = DualVae::new(cfg.model, DType::F32, cfg.seed).unwrap();
    let run = train(&cfg, &refs, &refs, &RunOptions::default()).unwrap();
    assert_eq!(params(&fresh.store), params(&run.model.store));
    assert!(run.metrics.is_empty());
}

#[test]
fn empty_split_is_rejected() {
    let err = train(&tiny_config(), &[], &[], &RunOptions::default()).unwrap_err();
    assert!(err.is_validation());
}

#[test]
fn identical_seeds_give_identical_logs() {
    let songs = corpus();
    let refs: Vec<&MelSpectrogram> = songs.iter().collect();
    let cfg = tiny_config();
    let a = train(&cfg, &refs, &refs, &RunOptions::default()).unwrap();
    let b = train(&cfg, &refs, &refs, &RunOptions::default()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    let c = train_vanilla_baseline(&cfg, &refs, &refs, &RunOptions::default()).unwrap();
    let d = train_vanilla_baseline(&cfg, &refs, &refs, &RunOptions::default()).unwrap();
    assert_eq!(c.metrics, d.metrics);
    assert!(c.metrics.iter().all(|m| m.kl_global == 0.0 && m.c_g_active == 0.0));
}

#[test]
fn capacities_follow_schedule_in_log() {
    let songs = corpus();
    let refs: Vec<&MelSpectrogram> = songs.iter().collect();
    let run = train(&tiny_config(), &refs, &refs, &RunOptions::default()).unwrap();
    let c: Vec<f64> = run.metrics.iter().map(|m| m.c_l_active).collect();
    assert_eq!(c, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.0]);
    for m in &run.metrics {
        let want = m.recon_nll + 100.0 * (m.kl_global - m.c_g_active).abs() + 10.0 * (m.kl_local - m.c_l_active).abs();
        assert!((m.total - want).abs() <= 1e-9 * want.abs().max(1.0));
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let songs = corpus();
    let refs: Vec<&MelSpectrogram> = songs.iter().collect();
    let cfg = tiny_config();
    let dir_a = tempfile::tempdir().unwrap();
    let full = train(&cfg, &refs, &refs, &RunOptions { out_dir: Some(dir_a.path().into()), ..Default::default() }).unwrap();

    let dir_b = tempfile::tempdir().unwrap();
    let opts = RunOptions { out_dir: Some(dir_b.path().into()), stop_at: Some(3), ..Default::default() };
    let half = train(&cfg, &refs, &refs, &opts).unwrap();
    assert_eq!(half.step, 3);
    // a stale line past the checkpoint must be dropped on resume
    let mut f = OpenOptions::new().append(true).open(dir_b.path().join(files::METRICS)).unwrap();
    writeln!(f, "{{\"step\":3,\"recon_nll\":0,\"kl_global\":0,\"kl_local\":0,\"c_g_active\":0,\"c_l_active\":0,\"total\":0}}").unwrap();
    drop(f);
    let opts = RunOptions {
        out_dir: Some(dir_b.path().into()),
        resume: Some(dir_b.path().join(files::LAST)),
        ..Default::default()
    };
    let resumed = train(&cfg, &refs, &refs, &opts).unwrap();
    assert_eq!(resumed.step, 6);
    assert_eq!(params(&full.model.store), params(&resumed.model.store));
    let a = std::fs::read(dir_a.path().join(files::METRICS)).unwrap();
    let b = std::fs::read(dir_b.path().join(files::METRICS)).unwrap();
    assert_eq!(a, b);
    assert_eq!(read_metrics(&dir_a.path().join(files::METRICS)).unwrap(), full.metrics);
}

#[test]
fn resume_rejects_other_architecture() {
    let songs = corpus();
    let refs: Vec<&MelSpectrogram> = songs.iter().collect();
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &refs, &refs, &RunOptions { out_dir: Some(dir.path().into()), ..Default::default() }).unwrap();
    let other = TrainingConfig { model: ModelConfig { local_dim: 4, ..cfg.model }, ..cfg.clone() };
    let opts = RunOptions { resume: Some(dir.path().join(files::LAST)), ..Default::default() };
    assert!(train(&other, &refs, &refs, &opts).unwrap_err().is_validation());
    assert!(train_vanilla_baseline(&cfg, &refs, &refs, &opts).unwrap_err().is_validation());
}

#[test]
fn saved_model_reloads() {
    let songs = corpus();
    let refs: Vec<&MelSpectrogram> = songs.iter().collect();
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let run = train(&cfg, &refs, &refs, &RunOptions { out_dir: Some(dir.path().into()), ..Default::default() }).unwrap();
    let loaded = load_dual(&dir.path().join(files::LAST)).unwrap();
    assert_eq!(params(&loaded.store), params(&run.model.store));
    assert!(load_baseline(&dir.path().join(files::LAST)).unwrap_err().is_validation());
}
