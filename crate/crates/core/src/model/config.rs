use serde::{Deserialize, Serialize};

use crate::config::{parse_bool, parse_value, Configurable};
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    /// Number of scales `S`.
    pub scales: usize,
    /// Token-merging factor between consecutive scales.
    pub gamma: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks_per_scale: usize,
    pub alpha: f64,
    pub beta: f64,
    pub num_classes: usize,
    pub encoder_causal: bool,
    pub dropout: f64,
    /// Add the space-time positional encoding to encoder tokens.
    pub use_stp: bool,
    /// Scale temporal attention scores by the time-distance matrix.
    pub use_time_scaling: bool,
    pub ff_mult: usize,
    /// Standardize every image channel to zero mean and unit variance
    /// before patch embedding.
    pub standardize_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            channels: 3,
            scales: 3,
            gamma: 2,
            patch_size: 8,
            d_model: 96,
            heads: 4,
            blocks_per_scale: 1,
            alpha: 0.5,
            beta: 0.5,
            num_classes: 2,
            encoder_causal: false,
            dropout: 0.0,
            use_stp: true,
            use_time_scaling: true,
            ff_mult: 4,
            standardize_input: true,
        }
    }
}

/// Single-component removals used in the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Ablation {
    Full,
    NoStp,
    NoTimeScaling,
    /// One scale with three blocks.
    NoMultiScale,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoStp,
        Ablation::NoTimeScaling,
        Ablation::NoMultiScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoStp => "no-stp",
            Ablation::NoTimeScaling => "no-tta",
            Ablation::NoMultiScale => "no-ms",
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    /// Token grid `(h, w)` at 1-based scale `s`.
    pub fn grid_at(&self, s: usize) -> (usize, usize) {
        let f = self.gamma.pow(s as u32 - 1);
        let (h, w) = self.grid();
        (h / f, w / f)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.image_height == 0 || self.image_width == 0 || self.channels == 0 {
            return fail("image dimensions must be positive".into());
        }
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return fail(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.scales == 0 || self.blocks_per_scale == 0 {
            return fail("scales and blocks_per_scale must be positive".into());
        }
        if self.gamma == 0 {
            return fail("gamma must be positive".into());
        }
        let factor = self
            .gamma
            .checked_pow(self.scales as u32 - 1)
            .ok_or_else(|| Error::config("gamma^(scales-1) overflows"))?;
        let (h, w) = self.grid();
        if h % factor != 0 || w % factor != 0 {
            return fail(format!(
                "token grid {h}x{w} is not divisible by gamma^(S-1) = {factor}"
            ));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!("d_model must be even, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if !(self.alpha >= 0.0) || !self.beta.is_finite() {
            return fail("alpha must be >= 0 and beta finite".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.ff_mult == 0 {
            return fail("ff_mult must be positive".into());
        }
        Ok(())
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        let mut cfg = self.clone();
        match ablation {
            Ablation::Full => {}
            Ablation::NoStp => cfg.use_stp = false,
            Ablation::NoTimeScaling => cfg.use_time_scaling = false,
            Ablation::NoMultiScale => {
                cfg.scales = 1;
                cfg.blocks_per_scale = 3;
            }
        }
        cfg
    }
}

impl Configurable for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_height" | "H" => self.image_height = parse_value(key, value)?,
            "image_width" | "W" => self.image_width = parse_value(key, value)?,
            "image_size" => {
                self.image_height = parse_value(key, value)?;
                self.image_width = self.image_height;
            }
            "channels" | "C" => self.channels = parse_value(key, value)?,
            "scales" | "S" => self.scales = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "patch_size" | "p" => self.patch_size = parse_value(key, value)?,
            "d_model" | "d_m" => self.d_model = parse_value(key, value)?,
            "heads" | "Z" => self.heads = parse_value(key, value)?,
            "blocks_per_scale" => self.blocks_per_scale = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "num_classes" | "k" => self.num_classes = parse_value(key, value)?,
            "encoder_causal" => self.encoder_causal = parse_bool(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "use_stp" => self.use_stp = parse_bool(key, value)?,
            "use_time_scaling" | "use_tta" => self.use_time_scaling = parse_bool(key, value)?,
            "ff_mult" => self.ff_mult = parse_value(key, value)?,
            "standardize_input" => self.standardize_input = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid_at(1), (8, 8));
        assert_eq!(cfg.grid_at(2), (4, 4));
        assert_eq!(cfg.grid_at(3), (2, 2));
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        };
        bad(|c| c.heads = 5);
        bad(|c| c.d_model = 95);
        bad(|c| c.patch_size = 7);
        bad(|c| c.scales = 5);
        bad(|c| c.dropout = 1.0);
        bad(|c| c.alpha = -0.1);
    }

    #[test]
    fn ablations_are_config_only() {
        let base = ModelConfig::default();
        assert!(!base.with_ablation(Ablation::NoStp).use_stp);
        assert!(!base.with_ablation(Ablation::NoTimeScaling).use_time_scaling);
        let ms = base.with_ablation(Ablation::NoMultiScale);
        assert_eq!((ms.scales, ms.blocks_per_scale), (1, 3));
        for a in Ablation::ALL {
            base.with_ablation(a).validate().unwrap();
        }
    }
}
