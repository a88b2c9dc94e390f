use crate::error::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub channels: usize,
    /// Space-to-depth stride of the latent codec.
    pub latent_factor: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// Spatial (and temporal) patch factor.
    pub patch: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    /// Number of training timesteps.
    pub t_max: usize,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal timestep features fed to every AdaLN branch.
    pub time_dim: usize,
    /// Hidden width of each AdaLN branch MLP.
    pub adaln_hidden: usize,
    pub ln_eps: f64,
    pub rope_base: f64,
    /// Whether MaskC also blocks a condition token attending to itself.
    pub mask_c_blocks_diagonal: bool,
    /// LoRA scale numerator; the scale applied is `lora_alpha / r`.
    pub lora_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            latent_factor: 2,
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            patch: 2,
            vocab_size: crate::model::vocab::Vocabulary::shipped().len(),
            text_len: 6,
            t_max: 1000,
            mlp_ratio: 4,
            time_dim: 32,
            adaln_hidden: 64,
            ln_eps: 1e-5,
            rope_base: 10_000.0,
            mask_c_blocks_diagonal: true,
            lora_alpha: 4.0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for finite-difference checks.
    pub fn miniature() -> Self {
        Self {
            image_size: 16,
            d_model: 32,
            n_heads: 2,
            n_blocks: 2,
            time_dim: 16,
            adaln_hidden: 32,
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("latent_factor", self.latent_factor),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("patch", self.patch),
            ("vocab_size", self.vocab_size),
            ("text_len", self.text_len),
            ("t_max", self.t_max),
            ("mlp_ratio", self.mlp_ratio),
            ("time_dim", self.time_dim),
            ("adaln_hidden", self.adaln_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.image_size % (self.latent_factor * self.patch) != 0 {
            return bad(format!(
                "image_size {} not divisible by latent_factor*patch = {}",
                self.image_size,
                self.latent_factor * self.patch
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        // 2:3:3 split of the head into (t, y, x) groups, each made of pairs.
        if self.head_dim() % 16 != 0 {
            return bad(format!(
                "head_dim {} must be a multiple of 16 for the 2:3:3 rotary split",
                self.head_dim()
            ));
        }
        if self.time_dim % 2 != 0 {
            return bad("time_dim must be even".into());
        }
        if !(self.ln_eps > 0.0 && self.rope_base > 1.0) {
            return bad("ln_eps or rope_base out of range".into());
        }
        if !self.lora_alpha.is_finite() {
            return bad("lora_alpha must be finite".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Latent grid side (pixels / stride).
    pub fn latent_size(&self) -> usize {
        self.image_size / self.latent_factor
    }

    pub fn latent_channels(&self) -> usize {
        self.channels * self.latent_factor * self.latent_factor
    }

    /// Patch grid side.
    pub fn grid(&self) -> usize {
        self.latent_size() / self.patch
    }

    pub fn frame_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Width of one patchified token: `p` temporal copies of a `p × p` patch.
    pub fn token_width(&self) -> usize {
        self.patch * self.patch * self.patch * self.latent_channels()
    }

    pub fn seq_len(&self) -> usize {
        self.text_len + 2 * self.frame_tokens()
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let h = self.latent_size();
        [h, h, self.latent_channels()]
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.d_model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_miniature_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.frame_tokens(), 64);
        assert_eq!(c.token_width(), 96);
        let m = ModelConfig::miniature();
        m.validate().unwrap();
        assert_eq!(m.latent_size(), 8);
        assert_eq!(m.head_dim(), 16);
    }

    #[test]
    fn rejects_bad_divisibility() {
        let c = ModelConfig { image_size: 30, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig { n_heads: 8, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
