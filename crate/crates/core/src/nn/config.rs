use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Person detector and keypoint detector trained separately; the keypoint
    /// stage sees resampled RGB patches.
    TwoStage,
    /// Keypoint stage reads bilinear crops of the shared backbone's features,
    /// so box coordinates receive gradients.
    EndToEnd,
}

/// Placement of the `w` crop samples between the box edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GridConvention {
    /// `x_i = ((w-i)/w)·x_left + (i/w)·x_right`, `i = 0..w`; never reaches `x_right`.
    #[default]
    HalfOpen,
    /// Denominator `w-1`, so both edges are sampled.
    AlignCorners,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ffn_dim: usize,
    pub n_person_queries: usize,
    pub n_keypoint_queries: usize,
    pub n_joints: usize,
    /// Output channels of the stem and the stride-4, -8 and -16 stages.
    pub backbone_channels: [usize; 4],
    pub crop_width: usize,
    pub crop_height: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Two-stage patch size (height, width); height:width fixes the crop aspect.
    pub patch_height: usize,
    pub patch_width: usize,
    pub enlarge_factor: f64,
    pub exclude_background_at_readout: bool,
    pub variant: Variant,
    /// Query `j` always stands for joint `j` (requires `Q == J`).
    #[serde(default)]
    pub class_specific_queries: bool,
    #[serde(default)]
    pub grid_convention: GridConvention,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub String);

impl ModelConfig {
    /// Small profile that trains in minutes on one core.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            ffn_dim: 64,
            n_person_queries: 6,
            n_keypoint_queries: 12,
            n_joints: 5,
            backbone_channels: [8, 16, 24, 32],
            crop_width: 8,
            crop_height: 8,
            image_height: 64,
            image_width: 64,
            patch_height: 64,
            patch_width: 48,
            enlarge_factor: 0.25,
            exclude_background_at_readout: true,
            variant: Variant::EndToEnd,
            class_specific_queries: false,
            grid_convention: GridConvention::HalfOpen,
        }
    }

    /// Layer and query counts of the full-size setup.
    pub fn full() -> ModelConfig {
        ModelConfig {
            d_model: 256,
            n_heads: 8,
            n_encoder_layers: 6,
            n_decoder_layers: 6,
            ffn_dim: 2048,
            n_person_queries: 100,
            n_keypoint_queries: 100,
            n_joints: 17,
            backbone_channels: [64, 256, 512, 1024],
            crop_width: 24,
            crop_height: 32,
            image_height: 384,
            image_width: 384,
            patch_height: 384,
            patch_width: 288,
            enlarge_factor: 0.25,
            exclude_background_at_readout: true,
            variant: Variant::TwoStage,
            class_specific_queries: false,
            grid_convention: GridConvention::HalfOpen,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Channels of the concatenated stride-4/8/16 maps.
    pub fn multiscale_channels(&self) -> usize {
        self.backbone_channels[1..].iter().sum()
    }

    pub fn patch_aspect(&self) -> f64 {
        self.patch_height as f64 / self.patch_width as f64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError(m.to_string()));
        let extents = [
            self.d_model,
            self.n_heads,
            self.ffn_dim,
            self.n_person_queries,
            self.n_keypoint_queries,
            self.n_joints,
            self.crop_width,
            self.crop_height,
            self.image_height,
            self.image_width,
            self.patch_height,
            self.patch_width,
        ];
        if extents.contains(&0) || self.backbone_channels.contains(&0) {
            return fail("all extents must be at least 1");
        }
        if self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if self.d_model % 4 != 0 {
            return fail("d_model must be divisible by 4 for the 2-D sine encoding");
        }
        if self.n_keypoint_queries < self.n_joints {
            return fail("need at least as many keypoint queries as joints");
        }
        if self.class_specific_queries && self.n_keypoint_queries != self.n_joints {
            return fail("class-specific queries need exactly one query per joint");
        }
        if !(self.enlarge_factor >= 0.0 && self.enlarge_factor.is_finite()) {
            return fail("enlarge_factor must be a finite value >= 0");
        }
        for (name, v) in [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch_height", self.patch_height),
            ("patch_width", self.patch_width),
        ] {
            if v % 16 != 0 {
                return Err(ConfigError(format!("{name} = {v} is not divisible by 16")));
            }
        }
        if self.grid_convention == GridConvention::AlignCorners
            && (self.crop_width < 2 || self.crop_height < 2)
        {
            return fail("align-corners grids need at least 2 samples per axis");
        }
        Ok(())
    }
}
