//! Encoder and predictor structure: symmetry, conditioning and gradients.

mod common;

use iwm_core::vit::{
    action_constant, encode_tokens, init_encoder, init_predictor, predict, Conditioning, PredictorInput,
};
use iwm_tensor::{Binder, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let cfg = common::tiny_encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let store: ParamStore<f64> = init_encoder(&cfg, &mut rng);
    let n = 7;
    let x = Tensor::<f64>::randn(&[n, cfg.dim], 1.0, &mut rng);
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let mut xp = Tensor::zeros(&[n, cfg.dim]);
    for (r, &src) in perm.iter().enumerate() {
        xp.data_mut()[r * cfg.dim..(r + 1) * cfg.dim].copy_from_slice(x.row(src));
    }
    let run = |t: Tensor<f64>| {
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let v = g.constant(t).unwrap();
        let out = encode_tokens(&mut g, &mut b, &cfg, v, None).unwrap();
        g.value(out).clone()
    };
    let y = run(x);
    let yp = run(xp);
    for (r, &src) in perm.iter().enumerate() {
        for (a, b) in yp.row(r).iter().zip(y.row(src)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

fn run_predictor(
    store: &ParamStore<f64>,
    cond: Conditioning,
    ctx: &Tensor<f64>,
    action: &[f64],
) -> (Tensor<f64>, usize) {
    let enc = common::tiny_encoder();
    let pred = common::tiny_predictor(cond);
    let mut g = Graph::new();
    let mut b = Binder::new(store, false);
    let c = g.constant(ctx.clone()).unwrap();
    let a = action_constant(&mut g, action).unwrap();
    let out = predict(
        &mut g,
        &mut b,
        &pred,
        &enc,
        PredictorInput {
            context: c,
            context_pos: &[0, 1, 2, 5, 9],
            target_pos: &[3, 4, 15],
            action: Some(a),
            extra: None,
        },
    )
    .unwrap();
    (g.value(out.predictions.unwrap()).clone(), out.seq_len)
}

#[test]
fn conditioning_modes_differ_in_action_use() {
    let enc = common::tiny_encoder();
    let a0 = [0.0; 8];
    let a1 = [0.3, -0.2, 0.1, 0.05, 1.0, 0.0, 1.0, 0.0];
    for cond in [Conditioning::None, Conditioning::Sequence, Conditioning::Feature] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store: ParamStore<f64> = init_predictor(&common::tiny_predictor(cond), &enc, &mut rng);
        let ctx = Tensor::randn(&[5, enc.dim], 1.0, &mut rng);
        let (p0, len) = run_predictor(&store, cond, &ctx, &a0);
        let (p1, _) = run_predictor(&store, cond, &ctx, &a1);
        assert_eq!(p0.shape(), &[3, enc.dim]);
        let extra = if cond == Conditioning::Sequence { 2 } else { 0 };
        assert_eq!(len, 5 + 3 + extra, "{cond:?}");
        let diff = p0.max_abs_diff(&p1);
        match cond {
            Conditioning::None => assert_eq!(diff, 0.0),
            _ => assert!(diff > 1e-6, "{cond:?} ignores the action"),
        }
    }
}

#[test]
fn conditioning_gradient_matches_finite_difference() {
    let enc = common::tiny_encoder();
    let cfg = common::tiny_predictor(Conditioning::Feature);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store: ParamStore<f64> = init_predictor(&cfg, &enc, &mut rng);
    let ctx = Tensor::randn(&[5, enc.dim], 1.0, &mut rng);
    let target = Tensor::randn(&[3, enc.dim], 1.0, &mut rng);
    let action = [0.3, -0.2, 0.1, 0.05, 1.0, 0.0, 1.0, 0.0];
    let loss_of = |s: &ParamStore<f64>| {
        let (p, _) = run_predictor(s, Conditioning::Feature, &ctx, &action);
        p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };

    let mut g = Graph::new();
    let mut b = Binder::new(&store, true);
    let c = g.constant(ctx.clone()).unwrap();
    let a = action_constant(&mut g, &action).unwrap();
    let out = predict(
        &mut g,
        &mut b,
        &cfg,
        &enc,
        PredictorInput {
            context: c,
            context_pos: &[0, 1, 2, 5, 9],
            target_pos: &[3, 4, 15],
            action: Some(a),
            extra: None,
        },
    )
    .unwrap();
    let t = g.constant(target.clone()).unwrap();
    let d = g.sub(out.predictions.unwrap(), t).unwrap();
    let sq = g.mul(d, d).unwrap();
    let loss = g.sum_all(sq).unwrap();
    let grads = b.collect(&g.backward(loss).unwrap());

    // The action columns of the first conditioning layer sit after the
    // token columns; probe both kinds of entry.
    let name = "cond.fc1.w";
    let idx = store.index_of(name).unwrap();
    let shape = store.get(name).unwrap().shape().to_vec();
    let (rows, cols) = (shape[0], shape[1]);
    let h = 1e-6;
    for &(r, c) in &[(0, 0), (cfg.dim + 2, 1), (rows - 1, cols - 1)] {
        let k = r * cols + c;
        let mut plus = store.clone();
        plus.get_mut(name).unwrap().data_mut()[k] += h;
        let mut minus = store.clone();
        minus.get_mut(name).unwrap().data_mut()[k] -= h;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        let an = grads[idx].data()[k];
        assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1.0), "({r},{c}): {fd} vs {an}");
    }
    assert_eq!(rows, cfg.dim + cfg.action_dim);
}

#[test]
fn teacher_is_never_a_trainable_leaf() {
    let model = common::tiny_model(Conditioning::Feature, 3);
    assert_eq!(model.student, model.teacher);
    let mut g = Graph::<f32>::new();
    let mut b = Binder::new(&model.teacher, false);
    let v = b.get(&mut g, "patch.w").unwrap();
    assert!(!g.requires_grad(v));
}
