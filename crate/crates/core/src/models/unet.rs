use burn::module::Module;
use burn::nn::BatchNorm;
use burn::tensor::activation::relu;
use burn::tensor::backend::Backend;
use burn::tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{max_pool2x2, Conv, ParamInit, UpConv2x2};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channels at full resolution; doubled at every level.
    pub base_width: usize,
    /// Number of max-pool downsamplings.
    pub depth: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 64,
            depth: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.depth == 0 {
            return Err(Error::Validation(format!("invalid U-Net config {self:?}")));
        }
        Ok(())
    }

    /// Input sides must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << self.depth
    }
}

/// conv3×3 → BN → ReLU, twice.
#[derive(Module, Debug)]
pub struct DoubleConv<B: Backend> {
    conv1: Conv<B>,
    bn1: BatchNorm<B, 2>,
    conv2: Conv<B>,
    bn2: BatchNorm<B, 2>,
}

impl<B: Backend> DoubleConv<B> {
    fn new(init: &mut ParamInit<'_, B>, in_channels: usize, out_channels: usize) -> Self {
        Self {
            conv1: init.conv(in_channels, out_channels, [3, 3], 1, false),
            bn1: init.batch_norm(out_channels),
            conv2: init.conv(out_channels, out_channels, [3, 3], 1, false),
            bn2: init.batch_norm(out_channels),
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let x = relu(self.bn1.forward(self.conv1.forward(x)));
        relu(self.bn2.forward(self.conv2.forward(x)))
    }
}

#[derive(Module, Debug)]
pub struct UNet<B: Backend> {
    encoders: Vec<DoubleConv<B>>,
    bottleneck: DoubleConv<B>,
    ups: Vec<UpConv2x2<B>>,
    decoders: Vec<DoubleConv<B>>,
    head: Conv<B>,
}

impl<B: Backend> UNet<B> {
    pub(crate) fn new(config: &UNetConfig, init: &mut ParamInit<'_, B>) -> Self {
        let widths: Vec<usize> = (0..=config.depth)
            .map(|level| config.base_width << level)
            .collect();
        let mut encoders = Vec::with_capacity(config.depth);
        let mut in_channels = config.in_channels;
        for &w in &widths[..config.depth] {
            encoders.push(DoubleConv::new(init, in_channels, w));
            in_channels = w;
        }
        let bottleneck = DoubleConv::new(init, in_channels, widths[config.depth]);
        let mut ups = Vec::with_capacity(config.depth);
        let mut decoders = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            ups.push(init.up2x2(widths[level + 1], widths[level]));
            decoders.push(DoubleConv::new(init, 2 * widths[level], widths[level]));
        }
        let head = init.conv(widths[0], 1, [1, 1], 1, true);
        Self {
            encoders,
            bottleneck,
            ups,
            decoders,
            head,
        }
    }

    /// Single-channel logits at input resolution.
    pub fn forward_logits(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut x = x;
        for enc in &self.encoders {
            let features = enc.forward(x);
            x = max_pool2x2(features.clone());
            skips.push(features);
        }
        x = self.bottleneck.forward(x);
        for (up, dec) in self.ups.iter().zip(&self.decoders) {
            let skip = skips.pop().expect("one skip per level");
            x = dec.forward(Tensor::cat(vec![up.forward(x), skip], 1));
        }
        self.head.forward(x)
    }
}
