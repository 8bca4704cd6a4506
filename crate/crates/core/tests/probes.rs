mod common;

use iwm_core::data::{synth_colorworld, SynthSpec, SynthTask};
use iwm_core::probes::{
    fit_head, linear_probe, multitask_finetune, predictor_finetune, FinetuneConfig, PredictionTaskConfig, ProbeAug,
    ProbeConfig, ProbeKind, TaskSpec,
};
use iwm_core::vit::Conditioning;
use iwm_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 6;
const D: usize = 8;

fn tokens(rng: &mut ChaCha8Rng, count: usize, f: impl Fn(&mut ChaCha8Rng, usize, &mut [f32])) -> (Vec<Tensor<f32>>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..count {
        let y = rng.random_range(0..2);
        let mut t = Tensor::<f32>::randn(&[N, D], 1.0, rng);
        f(rng, y, t.data_mut());
        xs.push(t);
        ys.push(y);
    }
    (xs, ys)
}

fn fit(kind: ProbeKind, train: &(Vec<Tensor<f32>>, Vec<usize>), val: &(Vec<Tensor<f32>>, Vec<usize>)) -> f64 {
    let cfg = ProbeConfig {
        kind,
        epochs: 30,
        lr: 1e-2,
        ..Default::default()
    };
    let (_, acc, losses) = fit_head(&cfg, 2, |_| Ok(train.0.clone()), &train.1, &val.0, &val.1).unwrap();
    assert_eq!(losses.len(), 30);
    acc
}

#[test]
fn separable_tokens_are_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shift = |_: &mut ChaCha8Rng, y: usize, d: &mut [f32]| {
        for row in d.chunks_mut(D) {
            row[0] += if y == 1 { 3.0 } else { -3.0 };
        }
    };
    let train = tokens(&mut rng, 300, shift);
    let val = tokens(&mut rng, 200, shift);
    for kind in [ProbeKind::Linear, ProbeKind::Attentive] {
        let acc = fit(kind, &train, &val);
        assert!(acc >= 0.99, "{kind:?}: {acc}");
    }
}

#[test]
fn random_labels_stay_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let train = tokens(&mut rng, 300, |_, _, _| {});
    let val = tokens(&mut rng, 400, |_, _, _| {});
    let acc = fit(ProbeKind::Linear, &train, &val);
    assert!((acc - 0.5).abs() < 0.1, "{acc}");
}

/// One marked token carries the label; the others carry sign noise on the
/// same feature, which mean pooling cannot separate from the signal.
#[test]
fn attentive_head_finds_the_marked_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let plant = |rng: &mut ChaCha8Rng, y: usize, d: &mut [f32]| {
        let marked = rng.random_range(0..N);
        for (i, row) in d.chunks_mut(D).enumerate() {
            if i == marked {
                row[1] = 6.0;
                row[0] = if y == 1 { 4.0 } else { -4.0 };
            } else {
                row[1] = -2.0;
                row[0] = if rng.random::<bool>() { 4.0 } else { -4.0 };
            }
        }
    };
    let train = tokens(&mut rng, 400, plant);
    let val = tokens(&mut rng, 300, plant);
    let linear = fit(ProbeKind::Linear, &train, &val);
    let attentive = fit(ProbeKind::Attentive, &train, &val);
    assert!(attentive >= 0.95, "attentive {attentive}");
    assert!(attentive > linear + 0.1, "attentive {attentive} vs linear {linear}");
}

fn small_dataset(task: SynthTask, seed: u64) -> iwm_core::data::Dataset {
    let spec = SynthSpec {
        task,
        ..SynthSpec::new(2, 12, 16, seed)
    };
    synth_colorworld(&spec).unwrap()
}

#[test]
fn probe_is_deterministic_and_leaves_encoder_alone() {
    let model = common::tiny_model(Conditioning::Feature, 4);
    let ds = small_dataset(SynthTask::Shape, 5);
    let cfg = ProbeConfig {
        epochs: 2,
        batch_size: 8,
        aug: ProbeAug::Full,
        ..Default::default()
    };
    let a = linear_probe(&model, &ds, &cfg).unwrap();
    let b = linear_probe(&model, &ds, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.kind, ProbeKind::Linear);
    assert_eq!(a.train_size + a.val_size, ds.len());
    assert_eq!(a.frozen_hash, iwm_core::checkpoint::store_hash(&model.teacher));
}

#[test]
fn prediction_task_token_counts() {
    let model = common::tiny_model(Conditioning::Feature, 5);
    let ds = small_dataset(SynthTask::Shape, 6);
    let g = model.encoder_cfg.num_patches();
    let cfg = FinetuneConfig {
        iterations: Some(2),
        batch_size: 4,
        ..Default::default()
    };
    let full = predictor_finetune(&model, &ds, &PredictionTaskConfig::default(), &cfg).unwrap();
    assert_eq!(full.seq_len, 2 * g);
    let single = PredictionTaskConfig {
        single_token: true,
        ..Default::default()
    };
    let one = predictor_finetune(&model, &ds, &single, &cfg).unwrap();
    assert_eq!(one.seq_len, g + 1);
    assert_eq!(one.iterations, 2);
    assert_eq!(one.losses.len(), 2);
    assert_eq!(one.frozen_hash, iwm_core::checkpoint::store_hash(&model.teacher));

    let seq = common::tiny_model(Conditioning::Sequence, 5);
    let r = predictor_finetune(&seq, &ds, &PredictionTaskConfig::default(), &cfg).unwrap();
    assert_eq!(r.seq_len, 2 * g + 2);
}

#[test]
fn multitask_shares_the_batch() {
    let model = common::tiny_model(Conditioning::Feature, 6);
    let tasks = vec![
        TaskSpec::new("shape", small_dataset(SynthTask::Shape, 7)),
        TaskSpec::new("quadrant", small_dataset(SynthTask::Quadrant, 8)),
    ];
    let cfg = FinetuneConfig {
        iterations: Some(3),
        batch_size: 5,
        ..Default::default()
    };
    let task = PredictionTaskConfig::default();
    let r = multitask_finetune(&model, &tasks, &task, &cfg, true).unwrap();
    assert_eq!(r.iterations, 3);
    assert_eq!(r.multitask.tasks.len(), 2);
    assert_eq!(r.single.len(), 2);
    let seen: Vec<usize> = r.multitask.tasks.iter().map(|t| t.samples_seen).collect();
    assert_eq!(seen, vec![9, 6]);
    // Each sample carries the token of its own task.
    assert_eq!(r.multitask.seq_len, task.expected_seq_len(&model, 1));
    for (s, id) in r.single.iter().zip(["shape", "quadrant"]) {
        assert_eq!(s.tasks[0].id, id);
        assert_eq!(s.tasks[0].samples_seen, 15);
        assert_eq!(s.iterations, 3);
    }
    let csv = r.to_csv();
    assert!(csv.starts_with("task,multitask,single_task,delta\n"));
    assert_eq!(csv.lines().count(), 4);

    let dup = vec![TaskSpec::new("a", small_dataset(SynthTask::Shape, 7)), TaskSpec::new("a", small_dataset(SynthTask::Shape, 8))];
    assert!(multitask_finetune(&model, &dup, &task, &cfg, false).is_err());
}
