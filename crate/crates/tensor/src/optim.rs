//! AdamW with decoupled weight decay.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Per-parameter opt-out of weight decay (biases, norm gains).
    pub decay_mask: Vec<bool>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        AdamWState {
            config,
            step: 0,
            lr: 0.0,
            weight_decay: 0.0,
            m: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            decay_mask: params.tensors().iter().map(|t| t.ndim() >= 2).collect(),
        }
    }

    /// One update of every parameter. `grads` is in store order.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::TreeMismatch(format!(
                "{} grads for {} params",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(TensorError::NonFiniteInput(format!(
                    "gradient of {}",
                    params.names()[i]
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.config.beta1.powi(t);
        let bc2 = 1.0 - self.config.beta2.powi(t);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let wd = if self.decay_mask[i] { self.weight_decay } else { 0.0 };
            update(
                p.data_mut(),
                g.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                &self.config,
                self.lr,
                wd,
                bc1,
                bc2,
            );
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update<T: Scalar>(
    w: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    cfg: &AdamWConfig,
    lr: f64,
    wd: f64,
    bc1: f64,
    bc2: f64,
) {
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let eps = T::lit(cfg.eps);
    let lr_t = T::lit(lr);
    let decay = T::lit(lr * wd);
    let bc1 = T::lit(bc1);
    let bc2 = T::lit(bc2);
    for i in 0..w.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        w[i] = w[i] - lr_t * mh / (vh.sqrt() + eps) - decay * w[i];
    }
}

/// Single-tensor AdamW update; `state` holds this tensor's moments.
pub fn adamw_step<T: Scalar>(
    state: &mut AdamWState<T>,
    params: &mut Tensor<T>,
    grads: &Tensor<T>,
) -> Result<()> {
    if params.shape() != grads.shape() {
        return Err(TensorError::Invalid("param/grad shape mismatch".into()));
    }
    let mut store = ParamStore::new();
    store.insert("p", params.clone());
    if state.m.is_empty() {
        state.m.push(Tensor::zeros(params.shape()));
        state.v.push(Tensor::zeros(params.shape()));
        state.decay_mask.push(true);
    }
    state.step(&mut store, std::slice::from_ref(grads))?;
    *params = store.get("p").cloned().expect("inserted above");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(lr: f64, wd: f64) -> AdamWState<f64> {
        AdamWState {
            config: AdamWConfig::default(),
            step: 0,
            lr,
            weight_decay: wd,
            m: Vec::new(),
            v: Vec::new(),
            decay_mask: Vec::new(),
        }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut st = single(0.1, 0.5);
        let mut w = Tensor::new(vec![3], vec![1.0, -2.0, 4.0]).unwrap();
        adamw_step(&mut st, &mut w, &Tensor::zeros(&[3])).unwrap();
        let f = 1.0 - 0.1 * 0.5;
        assert_eq!(w.data(), &[1.0 * f, -2.0 * f, 4.0 * f]);
    }

    #[test]
    fn first_step_is_sign_like() {
        let mut st = single(0.01, 0.0);
        let g = [0.3, -2.0, 1e-3];
        let mut w = Tensor::zeros(&[3]);
        adamw_step(&mut st, &mut w, &Tensor::new(vec![3], g.to_vec()).unwrap()).unwrap();
        for (wi, gi) in w.data().iter().zip(g) {
            let expect = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((wi - expect).abs() < 1e-12, "{wi} vs {expect}");
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut st = single(0.1, 0.0);
        let w0 = Tensor::new(vec![2], vec![0.7, -0.2]).unwrap();
        let mut w = w0.clone();
        for _ in 0..5 {
            adamw_step(&mut st, &mut w, &Tensor::zeros(&[2])).unwrap();
        }
        assert_eq!(w, w0);
    }

    /// Scalar reference implementation of AdamW written out longhand.
    fn reference(steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn quadratic_descends_like_reference() {
        let expected = reference(5, 0.1);
        let mut st = single(0.1, 0.0);
        let mut w = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut prev = 1.0;
        for e in expected {
            let g = Tensor::new(vec![1], vec![2.0 * w.item()]).unwrap();
            adamw_step(&mut st, &mut w, &g).unwrap();
            assert!((w.item() - e).abs() < 1e-12);
            assert!(w.item() < prev && w.item() > 0.0);
            prev = w.item();
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut st = single(0.1, 0.0);
        let mut w = Tensor::zeros(&[1]);
        let g = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap();
        assert!(adamw_step(&mut st, &mut w, &g).is_err());
    }
}
