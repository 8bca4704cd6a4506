use iwm_tensor::gradcheck::{check_case, mixed_case, random_case, run_suite};
use iwm_tensor::{Graph, OpKind, Tensor};

#[test]
fn every_op_kind_matches_finite_differences() {
    let reports = run_suite(0..20u64).unwrap();
    assert_eq!(reports.len(), OpKind::ALL.len() * 20);
    for r in &reports {
        assert!(
            r.max_rel_error < 1e-5,
            "{:?} seed {} shapes {:?}: {}",
            r.kind,
            r.seed,
            r.shapes,
            r.max_rel_error
        );
    }
}

#[test]
fn mixed_graph_matches_finite_differences() {
    for seed in 0..5 {
        let err = check_case(&mixed_case(seed), seed).unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn cases_are_reproducible() {
    let a = random_case(OpKind::LayerNorm, 7);
    let b = random_case(OpKind::LayerNorm, 7);
    assert_eq!(a.inputs, b.inputs);
}

#[test]
fn f32_graph_runs() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let y = g.matmul(x, x).unwrap();
    let s = g.sum_all(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().shape(), &[2, 2]);
}
