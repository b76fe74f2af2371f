use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub d_ff: usize,
    pub d_v: usize,
    pub n_layers_text: usize,
    pub n_layers_cross: usize,
    pub n_heads: usize,
    pub max_len: usize,
    /// Maximum number of images per example.
    pub k_max: usize,
    /// Regions per image.
    pub n_regions: usize,
    pub mask_rate: f64,
    pub p_norm: f64,
    pub l1_coeff: f64,
    pub freeze_text: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Small CPU-trainable defaults.
    pub fn desk(vocab_size: usize, d_v: usize) -> Self {
        ModelConfig {
            vocab_size,
            d: 128,
            d_ff: 512,
            d_v,
            n_layers_text: 2,
            n_layers_cross: 2,
            n_heads: 4,
            max_len: 64,
            k_max: 16,
            n_regions: 1,
            mask_rate: 0.15,
            p_norm: 2.0,
            l1_coeff: 1e-6,
            freeze_text: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("model config: {m}")));
        if self.vocab_size <= super::vocab::N_RESERVED {
            return fail(format!("vocab_size {} leaves no room beyond the reserved tokens", self.vocab_size));
        }
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return fail(format!("d = {} must be a positive multiple of n_heads = {}", self.d, self.n_heads));
        }
        if self.d_ff == 0 || self.d_v == 0 {
            return fail("d_ff and d_v must be positive".into());
        }
        if self.max_len < 2 {
            return fail(format!("max_len = {} must be at least 2", self.max_len));
        }
        if self.k_max == 0 || self.n_regions == 0 {
            return fail("k_max and n_regions must be positive".into());
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return fail(format!("mask_rate = {} must lie in (0, 1)", self.mask_rate));
        }
        if !self.p_norm.is_finite() || self.p_norm < 1.0 {
            return fail(format!("p_norm = {} must be >= 1", self.p_norm));
        }
        if self.l1_coeff.is_nan() || self.l1_coeff < 0.0 {
            return fail(format!("l1_coeff = {} must be non-negative", self.l1_coeff));
        }
        Ok(())
    }

    pub fn max_slots(&self) -> usize {
        self.k_max * self.n_regions
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let ok = ModelConfig::desk(100, 8);
        ok.validate().unwrap();
        for bad in [
            ModelConfig { n_heads: 3, ..ok.clone() },
            ModelConfig { max_len: 1, ..ok.clone() },
            ModelConfig { mask_rate: 1.0, ..ok.clone() },
            ModelConfig { mask_rate: 0.0, ..ok.clone() },
            ModelConfig { vocab_size: 5, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
