//! Central finite-difference checks of every backward rule, in f64.
//!
//! Each case projects the op output onto fixed random weights so the scalar
//! loss exercises every output element, then compares the analytic gradient
//! of each input element with `(L(x + h) - L(x - h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, OpKind, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub kind: OpKind,
    pub seed: u64,
    pub shapes: Vec<Vec<usize>>,
    pub max_rel_error: f64,
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
}

fn loss(case: &Case, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&mut g, &vars)?;
    let w = g.constant(proj.clone())?;
    let p = g.mul(out, w)?;
    let l = g.sum_all(p)?;
    Ok((g, vars, l))
}

/// Maximum relative error between analytic and numeric gradients of `case`.
pub fn check_case(case: &Case, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let out_shape = {
        let mut g = Graph::new();
        let vars = case
            .inputs
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = (case.build)(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let proj = Tensor::uniform(&out_shape, -1.0, 1.0, &mut rng);
    let (g, vars, l) = loss(case, &case.inputs, &proj)?;
    let grads = g.backward(l)?;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("trainable input");
        for j in 0..case.inputs[i].numel() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let (gp, _, lp) = loss(case, &plus, &proj)?;
            let (gm, _, lm) = loss(case, &minus, &proj)?;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=8)
}

fn small_dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(2..=5)
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.5, 1.5, rng)
}

fn positive_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

/// Values bounded away from zero, for the relu kink.
fn off_zero_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.5);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn shape3(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![dim(rng), dim(rng), dim(rng)]
}

/// Builds a random case exercising `kind`.
pub fn random_case(kind: OpKind, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    match kind {
        OpKind::Leaf => Case {
            inputs: vec![rand_t(&shape3(r), r)],
            build: Box::new(|_, v| Ok(v[0])),
        },
        OpKind::MatMul => {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            if r.random::<bool>() {
                let b = small_dim(r);
                Case {
                    inputs: vec![rand_t(&[b, m, k], r), rand_t(&[b, k, n], r)],
                    build: Box::new(|g, v| g.matmul(v[0], v[1])),
                }
            } else {
                let b = small_dim(r);
                Case {
                    inputs: vec![rand_t(&[b, m, k], r), rand_t(&[k, n], r)],
                    build: Box::new(|g, v| g.matmul(v[0], v[1])),
                }
            }
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (m, n) = (dim(r), dim(r));
            let variant = r.random_range(0..3);
            let (sa, sb) = match variant {
                0 => (vec![m, n], vec![m, n]),
                1 => (vec![m, n], vec![n]),
                _ => (vec![m, 1], vec![1, n]),
            };
            let a = rand_t(&sa, r);
            let b = if kind == OpKind::Div {
                positive_t(&sb, r)
            } else {
                rand_t(&sb, r)
            };
            let build: Builder = match kind {
                OpKind::Add => Box::new(|g, v| g.add(v[0], v[1])),
                OpKind::Sub => Box::new(|g, v| g.sub(v[0], v[1])),
                OpKind::Mul => Box::new(|g, v| g.mul(v[0], v[1])),
                _ => Box::new(|g, v| g.div(v[0], v[1])),
            };
            Case {
                inputs: vec![a, b],
                build,
            }
        }
        OpKind::Neg => Case {
            inputs: vec![rand_t(&shape3(r), r)],
            build: Box::new(|g, v| g.neg(v[0])),
        },
        OpKind::Exp => Case {
            inputs: vec![rand_t(&shape3(r), r)],
            build: Box::new(|g, v| g.exp(v[0])),
        },
        OpKind::Log => Case {
            inputs: vec![positive_t(&shape3(r), r)],
            build: Box::new(|g, v| g.log(v[0])),
        },
        OpKind::Sqrt => Case {
            inputs: vec![positive_t(&shape3(r), r)],
            build: Box::new(|g, v| g.sqrt(v[0])),
        },
        OpKind::Power => {
            let p: f64 = r.random_range(-2.0..3.0);
            Case {
                inputs: vec![positive_t(&shape3(r), r)],
                build: Box::new(move |g, v| g.powf(v[0], p)),
            }
        }
        OpKind::Sum | OpKind::Mean => {
            let shape = shape3(r);
            let axis: Option<usize> = if r.random_range(0..4) == 0 {
                None
            } else {
                Some(r.random_range(0..3))
            };
            let keep = r.random::<bool>();
            let mean = kind == OpKind::Mean;
            Case {
                inputs: vec![rand_t(&shape, r)],
                build: Box::new(move |g, v| match (axis, mean) {
                    (None, false) => g.sum_all(v[0]),
                    (None, true) => g.mean_all(v[0]),
                    (Some(a), false) => g.sum_axis(v[0], a, keep),
                    (Some(a), true) => g.mean_axis(v[0], a, keep),
                }),
            }
        }
        OpKind::Broadcast => {
            let (m, n) = (dim(r), dim(r));
            let (src, dst) = if r.random::<bool>() {
                (vec![1, n], vec![m, n])
            } else {
                (vec![m, 1], vec![m, n])
            };
            Case {
                inputs: vec![rand_t(&src, r)],
                build: Box::new(move |g, v| g.broadcast_to(v[0], &dst)),
            }
        }
        OpKind::Reshape => {
            let shape = shape3(r);
            let target = vec![shape[0] * shape[1], shape[2]];
            Case {
                inputs: vec![rand_t(&shape, r)],
                build: Box::new(move |g, v| g.reshape(v[0], &target)),
            }
        }
        OpKind::Transpose => {
            let shape = shape3(r);
            let a = r.random_range(0..3);
            let b = (a + r.random_range(1..3)) % 3;
            Case {
                inputs: vec![rand_t(&shape, r)],
                build: Box::new(move |g, v| g.transpose(v[0], a, b)),
            }
        }
        OpKind::Concat => {
            let mut shape = shape3(r);
            let axis = r.random_range(0..3);
            let a = rand_t(&shape, r);
            shape[axis] = dim(r);
            let b = rand_t(&shape, r);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, v| g.concat(&[v[0], v[1], v[0]], axis)),
            }
        }
        OpKind::Slice => {
            let mut shape = shape3(r);
            let axis = r.random_range(0..3);
            shape[axis] = shape[axis].max(2);
            let start = r.random_range(0..shape[axis] - 1);
            let end = r.random_range(start + 1..=shape[axis]);
            Case {
                inputs: vec![rand_t(&shape, r)],
                build: Box::new(move |g, v| g.slice(v[0], axis, start, end)),
            }
        }
        OpKind::GatherRows => {
            let shape = vec![dim(r), dim(r)];
            let count = r.random_range(1..=10);
            let idx: Vec<usize> = (0..count).map(|_| r.random_range(0..shape[0])).collect();
            Case {
                inputs: vec![rand_t(&shape, r)],
                build: Box::new(move |g, v| g.gather_rows(v[0], &idx)),
            }
        }
        OpKind::Gelu => Case {
            inputs: vec![rand_t(&shape3(r), r)],
            build: Box::new(|g, v| g.gelu(v[0])),
        },
        OpKind::Relu => Case {
            inputs: vec![off_zero_t(&shape3(r), r)],
            build: Box::new(|g, v| g.relu(v[0])),
        },
        OpKind::Softmax | OpKind::LogSoftmax => {
            let axis = r.random_range(0..3);
            let log = kind == OpKind::LogSoftmax;
            Case {
                inputs: vec![rand_t(&shape3(r), r)],
                build: Box::new(move |g, v| {
                    if log {
                        g.log_softmax(v[0], axis)
                    } else {
                        g.softmax(v[0], axis)
                    }
                }),
            }
        }
        OpKind::LayerNorm => {
            let mut shape = shape3(r);
            let axis = r.random_range(0..3);
            shape[axis] = shape[axis].max(2);
            Case {
                inputs: vec![rand_t(&shape, r)],
                build: Box::new(move |g, v| g.layer_norm(v[0], axis, 1e-6)),
            }
        }
    }
}

/// A small graph mixing several ops, as used in the transformer blocks.
pub fn mixed_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    Case {
        inputs: vec![rand_t(&[3, 4], r), rand_t(&[4, 4], r), rand_t(&[4], r)],
        build: Box::new(|g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add(h, v[2])?;
            let n = g.layer_norm(h, 1, 1e-6)?;
            let a = g.gelu(n)?;
            let t = g.transpose(a, 0, 1)?;
            let s = g.softmax(t, 1)?;
            let e = g.exp(v[0])?;
            let q = g.scale(s, 0.5)?;
            let m = g.matmul(q, e)?;
            g.mean_axis(m, 0, false)
        }),
    }
}

/// Runs every op kind across `seeds`.
pub fn run_suite(seeds: impl IntoIterator<Item = u64> + Clone) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for kind in OpKind::ALL {
        for seed in seeds.clone() {
            let case = random_case(kind, seed.wrapping_mul(31).wrapping_add(kind as u64));
            let shapes = case.inputs.iter().map(|t| t.shape().to_vec()).collect();
            let err = check_case(&case, seed)?;
            reports.push(GradCheckReport {
                kind,
                seed,
                shapes,
                max_rel_error: err,
            });
        }
    }
    Ok(reports)
}
