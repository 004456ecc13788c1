use std::collections::BTreeMap;

use latte::macchiato::RGLRU_SHARPNESS;
use latte::{LatteError, Result, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MixerKind, ModelConfig};

/// Named model parameters, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        if !t.all_finite() {
            return Err(LatteError::NonFinite(format!("parameter {name}")));
        }
        if self.tensors.insert(name.to_string(), t).is_some() {
            return Err(LatteError::InvalidArgument(format!("duplicate parameter {name}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| LatteError::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

pub fn layer_prefix(layer: usize) -> String {
    format!("layers.{layer}")
}

struct Init<'a, T: Scalar> {
    store: ParameterStore<T>,
    rng: ChaCha8Rng,
    cfg: &'a ModelConfig,
}

impl<T: Scalar> Init<'_, T> {
    fn normal(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let t = Tensor::randn(shape, self.cfg.init_std, &mut self.rng);
        self.store.insert(name, t)
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, T::of(v)))
    }

    fn norm(&mut self, prefix: &str) -> Result<()> {
        let d = self.cfg.d_model;
        self.fill(&format!("{prefix}.gain"), &[d], 1.0)?;
        if !self.cfg.plusplus {
            self.fill(&format!("{prefix}.bias"), &[d], 0.0)?;
        }
        Ok(())
    }

    fn mixer(&mut self, p: &str) -> Result<()> {
        let cfg = self.cfg;
        let (d, l, h) = (cfg.d_model, cfg.n_latents, cfg.n_heads);
        match cfg.mixer_kind {
            MixerKind::Attention | MixerKind::Swa => {
                self.normal(&format!("{p}.w_q"), &[d, d])?;
                self.normal(&format!("{p}.w_k"), &[d, d])?;
            }
            MixerKind::Linear | MixerKind::Latte => {
                self.normal(&format!("{p}.w_q"), &[d, l])?;
                self.normal(&format!("{p}.w_k"), &[d, l])?;
            }
            MixerKind::MacchiatoConv | MixerKind::MacchiatoRglru => {
                self.normal(&format!("{p}.w_q"), &[d, l])?;
                self.normal(&format!("{p}.w_k"), &[d, l])?;
                self.normal(&format!("{p}.gate_local"), &[d, h])?;
                self.normal(&format!("{p}.local_q"), &[d, d])?;
                self.normal(&format!("{p}.local_k"), &[d, d])?;
            }
        }
        self.normal(&format!("{p}.w_v"), &[d, d])?;
        match cfg.mixer_kind {
            MixerKind::MacchiatoConv => {
                // identity on the current step plus noise
                let k = cfg.conv_kernel;
                let shape: Vec<usize> = if cfg.conv_depthwise { vec![k, d] } else { vec![k, d, d] };
                let mut w = Tensor::<T>::randn(&shape, cfg.init_std, &mut self.rng);
                for j in 0..d {
                    let at = if cfg.conv_depthwise { j } else { j * d + j };
                    w.data_mut()[at] += T::one();
                }
                self.store.insert(&format!("{p}.conv"), w)?;
            }
            MixerKind::MacchiatoRglru => {
                self.normal(&format!("{p}.rglru_in"), &[d, d])?;
                self.normal(&format!("{p}.rglru_rec"), &[d, d])?;
                let rng = &mut self.rng;
                let lam = Tensor::from_fn(&[d], |_| {
                    let target: f64 = rng.gen_range(0.9..0.999);
                    let a = target.powf(1.0 / RGLRU_SHARPNESS);
                    T::of((a / (1.0 - a)).ln())
                });
                self.store.insert(&format!("{p}.rglru_log_decay"), lam)?;
            }
            _ => {}
        }
        self.normal(&format!("{p}.w_o"), &[d, d])
    }
}

/// Deterministic initialization from `seed`: normal projections with
/// `init_std`, unit norm gains, zero norm biases.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    let mut init = Init {
        store: ParameterStore::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        cfg,
    };
    let (d, v, f) = (cfg.d_model, cfg.vocab_size, cfg.d_ff);
    init.normal("embed.tokens", &[v, d])?;
    if cfg.learned_positions {
        init.normal("embed.positions", &[cfg.seq_len, d])?;
    }
    for i in 0..cfg.n_layers {
        let p = layer_prefix(i);
        init.norm(&format!("{p}.norm1"))?;
        init.mixer(&format!("{p}.mixer"))?;
        init.norm(&format!("{p}.norm2"))?;
        if cfg.plusplus {
            init.normal(&format!("{p}.ffn.w_gate"), &[d, f])?;
            init.normal(&format!("{p}.ffn.w_up"), &[d, f])?;
            init.normal(&format!("{p}.ffn.w_down"), &[f, d])?;
        } else {
            init.normal(&format!("{p}.ffn.w_in"), &[d, f])?;
            init.normal(&format!("{p}.ffn.w_out"), &[f, d])?;
        }
    }
    init.norm("final_norm")?;
    init.normal("head.w", &[d, v])?;
    Ok(init.store)
}
