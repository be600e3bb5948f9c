//! SegNeXt-S style network: a four-stage convolutional-attention encoder and a
//! fusion decoder that projects every stage to a common width, resamples to
//! 1/4 input resolution, concatenates, and refines with two conv stages.

use burn::module::Module;
use burn::nn::BatchNorm;
use burn::tensor::activation::relu;
use burn::tensor::backend::Backend;
use burn::tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{bilinear_resize, gelu, Conv, DepthwiseConv, ParamInit};
use crate::error::{Error, Result};

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegNeXtConfig {
    pub in_channels: usize,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub mlp_ratios: Vec<usize>,
    pub decoder_width: usize,
    /// Lengths of the paired strip convolutions, one branch per entry.
    pub strip_kernels: Vec<usize>,
}

impl Default for SegNeXtConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            depths: vec![2, 2, 4, 2],
            widths: vec![64, 128, 320, 512],
            mlp_ratios: vec![8, 8, 4, 4],
            decoder_width: 256,
            strip_kernels: vec![7, 11, 21],
        }
    }
}

impl SegNeXtConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, len) in [
            ("depths", self.depths.len()),
            ("widths", self.widths.len()),
            ("mlp_ratios", self.mlp_ratios.len()),
        ] {
            if len != NUM_STAGES {
                return Err(Error::Validation(format!(
                    "SegNeXt needs {NUM_STAGES} stages, {name} has {len}"
                )));
            }
        }
        if self.widths.iter().any(|&w| w < 2)
            || self.depths.iter().any(|&d| d == 0)
            || self.mlp_ratios.iter().any(|&r| r == 0)
            || self.decoder_width == 0
            || self.in_channels == 0
        {
            return Err(Error::Validation(format!("invalid SegNeXt config {self:?}")));
        }
        if self.strip_kernels.iter().any(|&k| k % 2 == 0) {
            return Err(Error::Validation(
                "strip kernel lengths must be odd".into(),
            ));
        }
        Ok(())
    }

    pub fn size_divisor(&self) -> usize {
        32
    }

    /// Channel count of the concatenated decoder volume.
    pub fn fused_channels(&self) -> usize {
        NUM_STAGES * self.decoder_width
    }
}

/// Multiscale convolutional attention: a 5×5 depthwise conv feeding parallel
/// strip-conv pairs, summed, mixed by a 1×1 conv, then used as a
/// multiplicative gate on the input.
#[derive(Module, Debug)]
pub struct Msca<B: Backend> {
    local: DepthwiseConv<B>,
    strips: Vec<StripPair<B>>,
    mix: Conv<B>,
}

#[derive(Module, Debug)]
pub struct StripPair<B: Backend> {
    horizontal: DepthwiseConv<B>,
    vertical: DepthwiseConv<B>,
}

impl<B: Backend> Msca<B> {
    fn new(init: &mut ParamInit<'_, B>, channels: usize, strip_kernels: &[usize]) -> Self {
        let local = init.depthwise(channels, [5, 5]);
        let strips = strip_kernels
            .iter()
            .map(|&k| StripPair {
                horizontal: init.depthwise(channels, [1, k]),
                vertical: init.depthwise(channels, [k, 1]),
            })
            .collect();
        let mix = init.conv(channels, channels, [1, 1], 1, true);
        Self { local, strips, mix }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let local = self.local.forward(x.clone());
        let mut sum = local.clone();
        for pair in &self.strips {
            sum = sum + pair.vertical.forward(pair.horizontal.forward(local.clone()));
        }
        self.mix.forward(sum) * x
    }
}

#[derive(Module, Debug)]
pub struct MscaBlock<B: Backend> {
    norm1: BatchNorm<B, 2>,
    proj_in: Conv<B>,
    attention: Msca<B>,
    proj_out: Conv<B>,
    norm2: BatchNorm<B, 2>,
    fc1: Conv<B>,
    dw: DepthwiseConv<B>,
    fc2: Conv<B>,
}

impl<B: Backend> MscaBlock<B> {
    fn new(init: &mut ParamInit<'_, B>, channels: usize, mlp_ratio: usize, strips: &[usize]) -> Self {
        let hidden = channels * mlp_ratio;
        Self {
            norm1: init.batch_norm(channels),
            proj_in: init.conv(channels, channels, [1, 1], 1, true),
            attention: Msca::new(init, channels, strips),
            proj_out: init.conv(channels, channels, [1, 1], 1, true),
            norm2: init.batch_norm(channels),
            fc1: init.conv(channels, hidden, [1, 1], 1, true),
            dw: init.depthwise(hidden, [3, 3]),
            fc2: init.conv(hidden, channels, [1, 1], 1, true),
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let y = self.norm1.forward(x.clone());
        let a = self.proj_in.forward(y.clone());
        let a = self.attention.forward(gelu(a));
        let x = x + self.proj_out.forward(a) + y;

        let y = self.norm2.forward(x.clone());
        let y = gelu(self.dw.forward(self.fc1.forward(y)));
        x + self.fc2.forward(y)
    }
}

/// Downsampling entry of a stage: the two-conv stem (/4) for stage 1, a single
/// stride-2 conv (/2) for later stages.
#[derive(Module, Debug)]
pub struct StageEntry<B: Backend> {
    convs: Vec<Conv<B>>,
    norms: Vec<BatchNorm<B, 2>>,
}

impl<B: Backend> StageEntry<B> {
    fn stem(init: &mut ParamInit<'_, B>, in_channels: usize, width: usize) -> Self {
        let mid = (width / 2).max(1);
        Self {
            convs: vec![
                init.conv(in_channels, mid, [3, 3], 2, false),
                init.conv(mid, width, [3, 3], 2, false),
            ],
            norms: vec![init.batch_norm(mid), init.batch_norm(width)],
        }
    }

    fn downsample(init: &mut ParamInit<'_, B>, in_channels: usize, width: usize) -> Self {
        Self {
            convs: vec![init.conv(in_channels, width, [3, 3], 2, false)],
            norms: vec![init.batch_norm(width)],
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let last = self.convs.len() - 1;
        let mut x = x;
        for (i, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            x = norm.forward(conv.forward(x));
            if i < last {
                x = gelu(x);
            }
        }
        x
    }
}

#[derive(Module, Debug)]
pub struct Stage<B: Backend> {
    entry: StageEntry<B>,
    blocks: Vec<MscaBlock<B>>,
    norm: BatchNorm<B, 2>,
}

impl<B: Backend> Stage<B> {
    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let mut x = self.entry.forward(x);
        for block in &self.blocks {
            x = block.forward(x);
        }
        self.norm.forward(x)
    }
}

#[derive(Module, Debug)]
pub struct FusionDecoder<B: Backend> {
    projections: Vec<Conv<B>>,
    fuse: Conv<B>,
    fuse_norm: BatchNorm<B, 2>,
    refine: Conv<B>,
    refine_norm: BatchNorm<B, 2>,
    classifier: Conv<B>,
}

/// Intermediate tensors of one forward pass, exposed for shape probes.
#[derive(Debug)]
pub struct SegNeXtTrace<B: Backend> {
    pub stages: Vec<Tensor<B, 4>>,
    pub fused: Tensor<B, 4>,
    pub logits: Tensor<B, 4>,
}

#[derive(Module, Debug)]
pub struct SegNeXt<B: Backend> {
    stages: Vec<Stage<B>>,
    decoder: FusionDecoder<B>,
}

impl<B: Backend> SegNeXt<B> {
    pub(crate) fn new(config: &SegNeXtConfig, init: &mut ParamInit<'_, B>) -> Self {
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut in_channels = config.in_channels;
        for s in 0..NUM_STAGES {
            let width = config.widths[s];
            let entry = if s == 0 {
                StageEntry::stem(init, in_channels, width)
            } else {
                StageEntry::downsample(init, in_channels, width)
            };
            let blocks = (0..config.depths[s])
                .map(|_| MscaBlock::new(init, width, config.mlp_ratios[s], &config.strip_kernels))
                .collect();
            stages.push(Stage {
                entry,
                blocks,
                norm: init.batch_norm(width),
            });
            in_channels = width;
        }
        let d = config.decoder_width;
        let decoder = FusionDecoder {
            projections: config
                .widths
                .iter()
                .map(|&w| init.conv(w, d, [1, 1], 1, true))
                .collect(),
            fuse: init.conv(NUM_STAGES * d, d, [1, 1], 1, false),
            fuse_norm: init.batch_norm(d),
            refine: init.conv(d, d, [3, 3], 1, false),
            refine_norm: init.batch_norm(d),
            classifier: init.conv(d, 1, [1, 1], 1, true),
        };
        Self { stages, decoder }
    }

    pub fn trace(&self, x: Tensor<B, 4>) -> SegNeXtTrace<B> {
        let [_, _, h, w] = x.dims();
        let mut features = Vec::with_capacity(NUM_STAGES);
        let mut x = x;
        for stage in &self.stages {
            x = stage.forward(x);
            features.push(x.clone());
        }
        let [_, _, fh, fw] = features[0].dims();
        let projected: Vec<Tensor<B, 4>> = features
            .iter()
            .zip(&self.decoder.projections)
            .map(|(f, proj)| bilinear_resize(proj.forward(f.clone()), fh, fw))
            .collect();
        let fused = Tensor::cat(projected, 1);
        let y = relu(
            self.decoder
                .fuse_norm
                .forward(self.decoder.fuse.forward(fused.clone())),
        );
        let y = relu(self.decoder.refine_norm.forward(self.decoder.refine.forward(y)));
        let logits = bilinear_resize(self.decoder.classifier.forward(y), h, w);
        SegNeXtTrace {
            stages: features,
            fused,
            logits,
        }
    }

    pub fn forward_logits(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        self.trace(x).logits
    }
}
