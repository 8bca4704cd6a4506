mod common;

use std::time::Instant;

use iwm_core::checkpoint::{load_checkpoint, save_checkpoint};
use iwm_core::data::{synth_colorworld, SynthSpec};
use iwm_core::pretrain::{bundle, make_views, run_pretraining, train_step, Model, TrainState};
use iwm_core::vit::Conditioning;
use iwm_core::Error;

#[test]
fn same_seed_same_run() {
    let cfg = common::tiny_config(Conditioning::Feature);
    let a = run_pretraining(&cfg, None).unwrap();
    let b = run_pretraining(&cfg, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.state, b.state);
    assert!(a.metrics.iter().all(|m| m.loss.is_finite()));
    let other = run_pretraining(&iwm_core::pretrain::PretrainConfig { seed: 9, ..cfg }, None).unwrap();
    assert_ne!(a.state.student, other.state.student);
}

#[test]
fn teacher_follows_student_by_ema() {
    let cfg = common::tiny_config(Conditioning::Sequence);
    let ds = synth_colorworld(&SynthSpec::new(2, 8, 16, 3)).unwrap();
    let mut state = TrainState::init(&cfg);
    let sched = cfg.schedules(4);
    let views = make_views(&ds.images, &[0, 1, 2, 3], &cfg, 0);
    let before = state.teacher.clone();
    let m = train_step(&mut state, &cfg, &sched, &views).unwrap();
    assert_eq!(state.step, 1);
    let mom = m.ema_momentum as f32;
    for ((t, t0), s) in state.teacher.tensors().iter().zip(before.tensors()).zip(state.student.tensors()) {
        for ((&t, &t0), &s) in t.data().iter().zip(t0.data()).zip(s.data()) {
            assert!((t - (mom * t0 + (1.0 - mom) * s)).abs() < 1e-6);
        }
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = common::tiny_config(Conditioning::Feature);
    let dir = tempfile::tempdir().unwrap();
    let out = run_pretraining(&cfg, Some(dir.path())).unwrap();
    let loaded = load_checkpoint(&dir.path().join("final")).unwrap();
    let model = Model::from_bundle(&loaded).unwrap();
    assert_eq!(model.student, out.state.student);
    assert_eq!(model.teacher, out.state.teacher);
    assert_eq!(model.predictor, out.state.predictor);
    assert_eq!(model.predictor_cfg, cfg.predictor);
    assert!(dir.path().join("metrics.jsonl").exists());
    assert!(dir.path().join("config.resolved").exists());

    let second = dir.path().join("again");
    save_checkpoint(&bundle(&out.state, &cfg, serde_json::json!({})), &second).unwrap();
    let archive = second.join("student.iwmt");
    let mut bytes = std::fs::read(&archive).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&archive, bytes).unwrap();
    assert!(matches!(load_checkpoint(&second), Err(Error::Corrupt(_))));
}

#[test]
fn synthetic_data_is_fast_and_deterministic() {
    let spec = SynthSpec::new(4, 250, 64, 11);
    let t = Instant::now();
    let a = synth_colorworld(&spec).unwrap();
    let took = t.elapsed().as_secs_f64();
    assert_eq!(a.len(), 1000);
    assert!(took < 30.0, "{took}s for 1000 images");
    assert_eq!(a.num_classes(), 4);
    assert!(a.images.iter().all(|i| i.height() == 64 && i.width() == 64));
    let again = synth_colorworld(&spec).unwrap();
    assert_eq!(a.images, again.images);
    assert_eq!(a.labels, again.labels);
}
