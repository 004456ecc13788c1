use latte::{LatteError, Result, Scalar, Tensor};

use crate::config::{DecaySchedule, ModelConfig};
use crate::params::ParameterStore;
use crate::tape::Gradients;

/// Learning rate at `step` (0-based) of a `total`-step run: linear warmup
/// to the peak, then linear decay to zero or constant.
pub fn learning_rate(cfg: &ModelConfig, step: usize, total: usize) -> f64 {
    let peak = cfg.learning_rate;
    let warm = cfg.warmup_steps;
    if step < warm {
        return peak * (step + 1) as f64 / warm as f64;
    }
    match cfg.decay_schedule {
        DecaySchedule::Constant => peak,
        DecaySchedule::Linear => {
            let span = total.saturating_sub(warm).max(1);
            let left = total.saturating_sub(step);
            peak * left as f64 / span as f64
        }
    }
}

/// Decoupled weight decay applies to matrices only; gains, biases and
/// decay vectors are left alone.
pub fn decays(t: &Tensor<impl Scalar>) -> bool {
    t.rank() >= 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub m: ParameterStore<T>,
    pub v: ParameterStore<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &ModelConfig, store: &ParameterStore<T>) -> Self {
        let zeros = || {
            let mut s = ParameterStore::new();
            for (name, t) in store.iter() {
                s.insert(name, Tensor::zeros(t.shape())).expect("zeros are finite");
            }
            s
        };
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with gradients already scaled by `grad_scale`
    /// (clipping). Parameters without a gradient get a zero gradient.
    pub fn step(&mut self, store: &mut ParameterStore<T>, grads: &Gradients<T>, lr: f64, grad_scale: f64) -> Result<()> {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps, gs) = (T::one(), T::of(self.eps), T::of(grad_scale));
        let (lr_t, bc1, bc2) = (T::of(lr), T::of(bc1), T::of(bc2));
        for (name, p) in store.iter_mut() {
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| LatteError::InvalidArgument(format!("no optimizer state for {name}")))?;
            let v = self.v.get_mut(name).expect("moments share names");
            let g = grads.get(name);
            if let Some(g) = g {
                g.expect_shape(p.shape())?;
            }
            let wd = if decays(p) { T::of(self.weight_decay) } else { T::zero() };
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(T::zero(), |g| g.data()[i] * gs);
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr_t * (mhat / (vhat.sqrt() + eps) + wd * pd[i]);
            }
        }
        Ok(())
    }
}

/// Scale factor bringing the global gradient norm down to `max_norm`;
/// one when already within or when clipping is disabled.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn cfg() -> ModelConfig {
        ModelConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let c = cfg();
        let lrs: Vec<f64> = (0..12).map(|s| learning_rate(&c, s, 12)).collect();
        assert_eq!(&lrs[..4], &[0.25, 0.5, 0.75, 1.0]);
        assert_eq!(lrs[4], 1.0);
        assert!(lrs[4..].windows(2).all(|w| w[1] < w[0]));
        assert_eq!(learning_rate(&c, 12, 12), 0.0);
        let flat = ModelConfig {
            decay_schedule: DecaySchedule::Constant,
            ..c
        };
        assert_eq!(learning_rate(&flat, 100, 12), 1.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_the_gradient_sign() {
        let c = ModelConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&c, &store);
        let grads = Gradients {
            by_name: BTreeMap::from([("w".to_string(), Tensor::new(vec![1, 3], vec![0.5, -2.0, 0.0]).unwrap())]),
        };
        opt.step(&mut store, &grads, 0.1, 1.0).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 2.1).abs() < 1e-6);
        assert_eq!(w[2], 3.0);
    }

    #[test]
    fn weight_decay_only_shrinks_matrices() {
        let c = ModelConfig {
            weight_decay: 0.5,
            ..cfg()
        };
        let mut store = ParameterStore::<f64>::new();
        store.insert("m", Tensor::full(&[2, 2], 1.0)).unwrap();
        store.insert("g", Tensor::full(&[2], 1.0)).unwrap();
        let mut opt = AdamW::new(&c, &store);
        let grads = Gradients { by_name: BTreeMap::new() };
        opt.step(&mut store, &grads, 0.1, 1.0).unwrap();
        assert!(store.get("m").unwrap().data().iter().all(|&x| (x - 0.95).abs() < 1e-12));
        assert!(store.get("g").unwrap().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("m", Tensor::full(&[2, 2], 0.3)).unwrap();
        let before = store.clone();
        let mut opt = AdamW::new(&cfg(), &store);
        let grads = Gradients {
            by_name: BTreeMap::from([("m".to_string(), Tensor::full(&[2, 2], 7.0))]),
        };
        opt.step(&mut store, &grads, 0.0, 1.0).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_scale(0.5, 1.0), 1.0);
        assert_eq!(clip_scale(4.0, 1.0), 0.25);
        assert_eq!(clip_scale(4.0, 0.0), 1.0);
    }
}
