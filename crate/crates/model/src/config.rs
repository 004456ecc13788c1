use std::fmt;
use std::str::FromStr;

use latte::{LatteError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Temporal mixer used in every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Attention,
    Swa,
    Linear,
    Latte,
    MacchiatoConv,
    MacchiatoRglru,
}

impl MixerKind {
    pub const ALL: [MixerKind; 6] = [
        MixerKind::Attention,
        MixerKind::Swa,
        MixerKind::Linear,
        MixerKind::Latte,
        MixerKind::MacchiatoConv,
        MixerKind::MacchiatoRglru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Attention => "attention",
            MixerKind::Swa => "swa",
            MixerKind::Linear => "linear",
            MixerKind::Latte => "latte",
            MixerKind::MacchiatoConv => "macchiato_conv",
            MixerKind::MacchiatoRglru => "macchiato_rglru",
        }
    }

    /// Mixers whose query side is a distribution over latent slots.
    pub fn has_latents(self) -> bool {
        matches!(
            self,
            MixerKind::Latte | MixerKind::MacchiatoConv | MixerKind::MacchiatoRglru
        )
    }

    pub fn is_mixture(self) -> bool {
        matches!(self, MixerKind::MacchiatoConv | MixerKind::MacchiatoRglru)
    }

    /// Mixers with a softmax-attention component.
    pub fn uses_attention(self) -> bool {
        matches!(self, MixerKind::Attention | MixerKind::Swa) || self.is_mixture()
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixerKind {
    type Err = LatteError;

    fn from_str(s: &str) -> Result<Self> {
        MixerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LatteError::InvalidConfig(format!("unknown mixer kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecaySchedule {
    /// Linear warmup, then linear decay to zero at the last step.
    Linear,
    /// Linear warmup, then constant.
    Constant,
}

impl FromStr for DecaySchedule {
    type Err = LatteError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "constant" => Ok(Self::Constant),
            _ => Err(LatteError::InvalidConfig(format!("unknown decay schedule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_latents: usize,
    pub window: usize,
    pub conv_kernel: usize,
    pub conv_depthwise: bool,
    pub dropout: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub decay_schedule: DecaySchedule,
    pub weight_decay: f64,
    pub seq_len: usize,
    pub batch_size: usize,
    pub unroll: usize,
    pub mixer_kind: MixerKind,
    /// RMSNorm + gated FFN when set, LayerNorm + GELU MLP otherwise.
    pub plusplus: bool,
    pub vocab_size: usize,
    pub seed: u64,
    /// Rotary encoding on the softmax-attention queries and keys.
    pub rope: bool,
    /// Learned absolute position table with `seq_len` rows.
    pub learned_positions: bool,
    pub init_std: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; zero disables.
    pub grad_clip: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            n_heads: 8,
            d_model: 512,
            d_ff: 2048,
            n_latents: 256,
            window: 128,
            conv_kernel: 3,
            conv_depthwise: true,
            dropout: 0.1,
            learning_rate: 5e-4,
            warmup_steps: 4000,
            decay_schedule: DecaySchedule::Linear,
            weight_decay: 0.01,
            seq_len: 512,
            batch_size: 64,
            unroll: 32,
            mixer_kind: MixerKind::Latte,
            plusplus: true,
            vocab_size: 256,
            seed: 0,
            rope: true,
            learned_positions: false,
            init_std: 0.02,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn slots_per_head(&self) -> usize {
        self.n_latents / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LatteError::InvalidConfig(m));
        let positive = [
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("seq_len", self.seq_len),
            ("batch_size", self.batch_size),
            ("unroll", self.unroll),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "n_heads = {} does not divide d_model = {}",
                self.n_heads, self.d_model
            ));
        }
        let k = self.mixer_kind;
        if k.has_latents() || k == MixerKind::Linear {
            if self.n_latents == 0 && !k.is_mixture() {
                return bad("n_latents must be positive".into());
            }
            if self.n_latents % self.n_heads != 0 {
                return bad(format!(
                    "n_heads = {} does not divide n_latents = {}",
                    self.n_heads, self.n_latents
                ));
            }
        }
        if matches!(k, MixerKind::Swa) || k.is_mixture() {
            if self.window == 0 {
                return bad("window must be positive".into());
            }
        }
        if k == MixerKind::MacchiatoConv && self.conv_kernel == 0 {
            return bad("conv_kernel must be positive".into());
        }
        if k.uses_attention() && self.rope && self.d_head() % 2 != 0 {
            return bad("rotary encoding needs an even head width".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be non-negative".into());
        }
        if !(self.init_std > 0.0) || !(self.norm_eps > 0.0) || !(self.adam_eps > 0.0) {
            return bad("init_std, norm_eps and adam_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_published_hyperparameters() {
        let c = ModelConfig::default();
        assert_eq!((c.n_layers, c.n_heads, c.d_model, c.d_ff), (8, 8, 512, 2048));
        assert_eq!((c.n_latents, c.window, c.conv_kernel), (256, 128, 3));
        assert_eq!((c.dropout, c.learning_rate, c.warmup_steps), (0.1, 5e-4, 4000));
        assert_eq!(c.decay_schedule, DecaySchedule::Linear);
        assert_eq!((c.weight_decay, c.seq_len, c.batch_size, c.unroll), (0.01, 512, 64, 32));
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = ModelConfig {
            mixer_kind: MixerKind::MacchiatoRglru,
            ..Default::default()
        };
        let back: ModelConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"n_layer": 2}"#).is_err());
        let partial: ModelConfig = serde_json::from_str(r#"{"n_layers": 2}"#).unwrap();
        assert_eq!(partial.n_layers, 2);
        assert_ne!(partial.digest(), c.digest());
    }

    #[test]
    fn mixer_names_round_trip() {
        for k in MixerKind::ALL {
            assert_eq!(k.name().parse::<MixerKind>().unwrap(), k);
        }
        assert!("transformer".parse::<MixerKind>().is_err());
    }

    #[test]
    fn validation() {
        let bad_heads = ModelConfig {
            n_heads: 3,
            ..Default::default()
        };
        assert!(bad_heads.validate().is_err());
        let no_latents = ModelConfig {
            n_latents: 0,
            mixer_kind: MixerKind::MacchiatoConv,
            ..Default::default()
        };
        no_latents.validate().unwrap();
        let latte_without = ModelConfig {
            n_latents: 0,
            ..Default::default()
        };
        assert!(latte_without.validate().is_err());
    }
}
