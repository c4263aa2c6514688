use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Standard,
    Disentangled,
}

impl AttentionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(AttentionMode::Standard),
            "disentangled" => Ok(AttentionMode::Disentangled),
            other => Err(Error::config(
                "attention",
                format!("unknown mode {other:?}, expected standard or disentangled"),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Standard => "standard",
            AttentionMode::Disentangled => "disentangled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_inner: usize,
    pub max_rel_distance: usize,
    pub attention_mode: AttentionMode,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.n_heads == 0 {
            return Err(Error::config("hidden/n_heads", "must be positive"));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::config(
                "hidden",
                format!("{} not divisible by n_heads {}", self.hidden, self.n_heads),
            ));
        }
        if self.ffn_inner < self.hidden {
            return Err(Error::config(
                "ffn_inner",
                format!("{} is below hidden {}", self.ffn_inner, self.hidden),
            ));
        }
        if self.max_rel_distance == 0 {
            return Err(Error::config("max_rel_distance", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Relative distances are clamped to the table range, so the outermost
    /// rows absorb everything at or beyond the horizon.
    pub fn rel_rows(&self) -> usize {
        2 * self.max_rel_distance - 1
    }
}

/// Generator depth convention: half the discriminator's depth, rounded up,
/// at the same width.
pub fn expected_generator_depth(disc_layers: usize) -> usize {
    disc_layers.div_ceil(2)
}
