//! Model variants and their design defaults.

use serde::{Deserialize, Serialize};

use crate::attention::PeConfig;
use crate::data::EMBED_DIM;
use crate::error::{Error, Result};
use crate::mvae::MvaeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    B,
    M,
    L,
    Custom,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "B" => Ok(Variant::B),
            "M" => Ok(Variant::M),
            "L" => Ok(Variant::L),
            "CUSTOM" => Ok(Variant::Custom),
            _ => Err(Error::invalid(format!(
                "unknown variant {s:?}; expected B, M, L or custom"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub window: usize,
    pub stride: usize,
    pub w_blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Per-channel latent width; tokens entering stage 2 are `2D` wide.
    pub latent: usize,
    /// Behaviors per standardized sequence.
    pub seq_len: usize,
    pub stages: [StageConfig; 2],
    pub n_heads: usize,
    pub pe: PeConfig,
    pub dropout: f64,
    pub embed_dim: usize,
    pub mvae_hidden: usize,
}

impl ModelConfig {
    pub fn variant(v: Variant, seq_len: usize) -> Result<Self> {
        let (d, w, s, b) = match v {
            Variant::B => (16, (64, 64), (32, 4), (3, 3)),
            Variant::M => (16, (128, 64), (32, 4), (3, 11)),
            Variant::L => (64, (128, 64), (32, 4), (7, 17)),
            Variant::Custom => return Err(Error::invalid("custom configs are built with ModelConfig::custom")),
        };
        let cfg = ModelConfig {
            variant: v,
            latent: d,
            seq_len,
            stages: [
                StageConfig {
                    window: w.0,
                    stride: s.0,
                    w_blocks: b.0,
                },
                StageConfig {
                    window: w.1,
                    stride: s.1,
                    w_blocks: b.1,
                },
            ],
            n_heads: 8,
            pe: PeConfig::default(),
            dropout: 0.2,
            embed_dim: EMBED_DIM,
            mvae_hidden: 256,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `(window, stride, w_blocks)` per stage; other fields take defaults.
    pub fn custom(latent: usize, seq_len: usize, stages: [(usize, usize, usize); 2]) -> Result<Self> {
        let stage = |(window, stride, w_blocks)| StageConfig {
            window,
            stride,
            w_blocks,
        };
        let cfg = ModelConfig {
            variant: Variant::Custom,
            latent,
            seq_len,
            stages: [stage(stages[0]), stage(stages[1])],
            n_heads: 8,
            pe: PeConfig::default(),
            dropout: 0.2,
            embed_dim: EMBED_DIM,
            mvae_hidden: 256,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.latent == 0 || self.seq_len == 0 || self.embed_dim == 0 || self.mvae_hidden == 0 {
            return bad(format!("zero-sized dimension in {self:?}"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.window == 0 || s.stride == 0 || s.stride > s.window {
                return bad(format!("stage {} needs 1 ≤ stride ≤ window, got {s:?}", i + 2));
            }
        }
        for eta in [2, 4, 8].map(|m| m * self.latent) {
            if self.n_heads == 0 || eta % self.n_heads != 0 {
                return bad(format!("width {eta} not divisible by {} heads", self.n_heads));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn mvae(&self) -> MvaeConfig {
        MvaeConfig {
            embed_dim: self.embed_dim,
            hidden: self.mvae_hidden,
            latent: self.latent,
            dropout: self.dropout,
        }
    }

    /// Token rows in, `l + 1` with the CLS token.
    pub fn tokens(&self) -> usize {
        self.seq_len + 1
    }

    /// Rows after stage 2 and stage 3.
    pub fn stage_rows(&self) -> [usize; 2] {
        let r2 = self.tokens().div_ceil(self.stages[0].stride);
        [r2, r2.div_ceil(self.stages[1].stride)]
    }

    pub fn cls_width(&self) -> usize {
        8 * self.latent
    }

    /// Canonical JSON: struct field order, no whitespace.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(s).map_err(|e| Error::invalid(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
