//! Loss, ranking and retrieval against brute-force references.

mod common;

use common::oracles::{double_loop_loss, harmonic_mean_rank, sort_rank};
use iwm_core::augment::{ActionVector, AugPreset};
use iwm_core::eval::{
    cosine_matrix, marginalize_invariant, mrr_from_ranks, predict_full, pooled_distances, rank_of, retrieve_nn,
    similarity_matrix, encode_one,
};
use iwm_core::pretrain::{collapse_metric, iwm_loss, iwm_loss_batch, iwm_loss_graph};
use iwm_core::vit::Conditioning;
use iwm_core::ImageTensor;
use iwm_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, rng)
}

#[test]
fn loss_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.random_range(1..20);
        let d = rng.random_range(1..40);
        let p = randn(&mut rng, &[n, d]);
        let t = randn(&mut rng, &[n, d]);
        let want = double_loop_loss(p.data(), t.data(), n, d);
        let got = iwm_loss(&p, &t).unwrap();
        assert!((got - want).abs() <= 1e-6 * want.max(1.0), "{got} vs {want}");

        let mut g = Graph::new();
        let pv = g.constant(p.clone()).unwrap();
        let tv = g.constant(t.clone()).unwrap();
        let l = iwm_loss_graph(&mut g, pv, tv).unwrap();
        let gl = g.value(l).item() as f64;
        assert!((gl - want).abs() <= 1e-5 * want.max(1.0), "{gl} vs {want}");
    }
}

#[test]
fn batch_loss_is_mean_of_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let preds: Vec<_> = (0..5).map(|_| randn(&mut rng, &[3, 4])).collect();
    let targets: Vec<_> = (0..5).map(|_| randn(&mut rng, &[3, 4])).collect();
    let each: f64 = preds.iter().zip(&targets).map(|(p, t)| iwm_loss(p, t).unwrap()).sum();
    assert!((iwm_loss_batch(&preds, &targets).unwrap() - each / 5.0).abs() < 1e-12);
    assert!(iwm_loss(&preds[0], &randn(&mut rng, &[4, 3])).is_err());
}

#[test]
fn mrr_matches_full_sort_on_random_banks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.random_range(2..64);
        let d = rng.random_range(1..8);
        let bank: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut ours = Vec::new();
        let mut oracle = Vec::new();
        for t in 0..n {
            // A noisy prediction of entry t, on a coarse grid so ties occur.
            let pred: Vec<f32> = bank[t]
                .iter()
                .map(|&v| ((v + rng.random_range(-0.5..0.5)) * 4.0).round() / 4.0)
                .collect();
            let dist = pooled_distances(&pred, &bank);
            ours.push(rank_of(&dist, t));
            oracle.push(sort_rank(&dist, t));
            let nn = retrieve_nn(&dist, n);
            assert_eq!(1 + nn.iter().position(|&i| i == t).unwrap(), rank_of(&dist, t));
        }
        assert_eq!(ours, oracle);
        let direct: f64 = oracle.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64;
        assert_eq!(mrr_from_ranks(&[ours]), direct);
    }
}

#[test]
fn random_predictions_sit_at_harmonic_baseline() {
    let n = 256;
    let trials = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ranks = Vec::with_capacity(trials);
    for _ in 0..trials {
        let dist: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        ranks.push(rank_of(&dist, rng.random_range(0..n)));
    }
    let harmonic = harmonic_mean_rank(n);
    assert!((harmonic - 0.0239).abs() < 5e-4);
    let got = mrr_from_ranks(&[ranks]);
    assert!((got - harmonic).abs() < 0.005, "{got} vs {harmonic}");
}

#[test]
fn exact_prediction_scores_one() {
    let bank = vec![vec![0.0f32, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]];
    for (t, e) in bank.iter().enumerate() {
        assert_eq!(rank_of(&pooled_distances(e, &bank), t), 1);
    }
    // Two entries, prediction nearer the wrong one.
    let two = vec![vec![0.0f32], vec![1.0]];
    assert_eq!(rank_of(&pooled_distances(&[0.9], &two), 0), 2);
}

#[test]
fn collapse_metric_of_unit_gaussians() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e: Vec<Vec<f32>> = (0..1024).map(|_| randn(&mut rng, &[32]).into_data()).collect();
    let m = collapse_metric(&e);
    assert!((m - 1.0).abs() < 0.05, "{m}");
    let same = vec![vec![0.3f32; 8]; 16];
    assert_eq!(collapse_metric(&same), 0.0);
}

fn image(seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(16, 16, |_, _, _| rng.random())
}

#[test]
fn marginalizing_one_action_is_that_prediction() {
    let model = common::tiny_model(Conditioning::Feature, 1);
    let ctx = encode_one(&model.student, &model.encoder_cfg, &image(1)).unwrap();
    let a = ActionVector([0.1, -0.2, 0.05, 0.03, 0.0, 1.0, 0.4, 0.0]);
    let single = predict_full(&model, &ctx, &a).unwrap();
    assert_eq!(marginalize_invariant(&model, &ctx, &[a]).unwrap(), single);
    let twice = marginalize_invariant(&model, &ctx, &[a, a]).unwrap();
    assert!(twice.max_abs_diff(&single) < 1e-6);
    let b = ActionVector([0.0, 0.3, 0.0, -0.1, 1.0, 0.0, 0.0, 1.0]);
    let pb = predict_full(&model, &ctx, &b).unwrap();
    let both = marginalize_invariant(&model, &ctx, &[a, b]).unwrap();
    for ((&m, &x), &y) in both.data().iter().zip(single.data()).zip(pb.data()) {
        assert!((m - 0.5 * (x + y)).abs() < 1e-6);
    }
}

#[test]
fn similarity_matrix_is_symmetric_with_unit_diagonal() {
    let model = common::tiny_model(Conditioning::Feature, 2);
    let imgs: Vec<_> = (0..3).map(image).collect();
    let m = similarity_matrix(&model.teacher, &model.encoder_cfg, &imgs, 4, &AugPreset::default_preset(), 9).unwrap();
    assert_eq!(m.len(), 12);
    for i in 0..12 {
        assert!((m[i][i] - 1.0).abs() < 1e-6);
        for j in 0..12 {
            assert!((m[i][j] - m[j][i]).abs() < 1e-6);
        }
    }
    let blocks = cosine_matrix(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![2.0, 4.0]]);
    assert!(blocks.iter().flatten().all(|&v| (v - 1.0).abs() < 1e-9));
}

proptest! {
    #[test]
    fn mrr_lies_in_unit_interval(ranks in prop::collection::vec(prop::collection::vec(1usize..300, 1..20), 1..5)) {
        let m = mrr_from_ranks(&ranks);
        prop_assert!(m > 0.0 && m <= 1.0);
    }

    #[test]
    fn rank_is_consistent_with_retrieval(dist in prop::collection::vec(0.0f64..4.0, 2..50), pick in 0usize..50) {
        let t = pick % dist.len();
        let nn = retrieve_nn(&dist, dist.len());
        prop_assert_eq!(rank_of(&dist, t), 1 + nn.iter().position(|&i| i == t).unwrap());
        let mut sorted = nn.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..dist.len()).collect::<Vec<_>>());
    }
}
