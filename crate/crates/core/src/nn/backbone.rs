//! Small strided CNN producing feature maps at strides 4, 8 and 16.

use super::params::{Ctx, ParamGroup, ParamStore};
use crate::tensor::{Conv2dSpec, Result, Tensor, TensorError};
use rand::Rng;

const STRIDE2: Conv2dSpec = Conv2dSpec {
    stride: 2,
    padding: 1,
};

#[derive(Debug, Clone)]
struct Conv {
    weight: String,
    bias: String,
}

impl Conv {
    fn new(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Conv {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        // He-uniform for ReLU
        let fan_in = c_in * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..c_out * c_in * 9)
            .map(|_| rng.gen_range(-bound..bound) as f32 as f64)
            .collect();
        store.insert(&weight, &[c_out, c_in, 3, 3], data, ParamGroup::Backbone);
        store.constant(&bias, &[c_out], 0.0, ParamGroup::Backbone);
        Conv { weight, bias }
    }

    fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&ctx.p(&self.weight)?, &ctx.p(&self.bias)?, STRIDE2)?
            .relu()
    }
}

/// Stem (stride 2) followed by three stride-2 stages, each a 3×3 conv + ReLU.
#[derive(Debug, Clone)]
pub struct Backbone {
    convs: Vec<Conv>,
    channels: [usize; 4],
}

impl Backbone {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: [usize; 4], rng: &mut impl Rng) -> Backbone {
        let mut convs = Vec::with_capacity(4);
        let mut c_in = 3;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv::new(store, &format!("{prefix}.conv{i}"), c_in, c, rng));
            c_in = c;
        }
        Backbone { convs, channels }
    }

    /// Channel counts of the stride-4, -8 and -16 maps.
    pub fn out_channels(&self) -> [usize; 3] {
        [self.channels[1], self.channels[2], self.channels[3]]
    }

    /// `image`: `[3×H×W]` with `H`, `W` divisible by 16.
    pub fn forward(&self, ctx: &Ctx, image: &Tensor) -> Result<[Tensor; 3]> {
        let &[3, h, w] = image.shape() else {
            return Err(TensorError::Contract(format!(
                "backbone expects a [3×H×W] image, got {:?}",
                image.shape()
            )));
        };
        if h % 16 != 0 || w % 16 != 0 {
            return Err(TensorError::Contract(format!(
                "image size {h}×{w} is not divisible by 16"
            )));
        }
        let x1 = self.convs[0].forward(ctx, image)?;
        let s4 = self.convs[1].forward(ctx, &x1)?;
        let s8 = self.convs[2].forward(ctx, &s4)?;
        let s16 = self.convs[3].forward(ctx, &s8)?;
        Ok([s4, s8, s16])
    }
}
