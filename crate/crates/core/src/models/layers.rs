//! Convolution building blocks expressed through differentiable tensor ops
//! (padding, slicing, stacking and matmul), with explicitly seeded init.

use burn::module::{Module, Param};
use burn::nn::{BatchNorm, BatchNormConfig};
use burn::tensor::backend::Backend;
use burn::tensor::module::max_pool2d;
use burn::tensor::{Tensor, TensorData};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvKind};

/// Keeps network outputs strictly inside `(0, 1)` even when f32 sigmoid saturates.
pub const OUTPUT_MARGIN: f64 = 1e-6;

/// Logistic sigmoid written as `0.5 + 0.5 tanh(x / 2)`, squeezed into
/// `[OUTPUT_MARGIN, 1 - OUTPUT_MARGIN]`. The backend's fused sigmoid has an
/// incorrect backward pass, so it is not used.
pub fn squashed_sigmoid<B: Backend, const D: usize>(logits: Tensor<B, D>) -> Tensor<B, D> {
    logits
        .mul_scalar(0.5)
        .tanh()
        .mul_scalar(0.5 - OUTPUT_MARGIN)
        .add_scalar(0.5)
}

/// Exact GELU, `x Φ(x)`, composed from `erf`; the backend's fused GELU
/// backward disagrees with its forward.
pub fn gelu<B: Backend, const D: usize>(x: Tensor<B, D>) -> Tensor<B, D> {
    let cdf = x
        .clone()
        .mul_scalar(std::f64::consts::FRAC_1_SQRT_2)
        .erf()
        .add_scalar(1.0)
        .mul_scalar(0.5);
    x * cdf
}

/// Seeded parameter factory. Construction order fixes the draw order.
pub(crate) struct ParamInit<'a, B: Backend> {
    rng: ChaCha8Rng,
    device: &'a B::Device,
}

impl<'a, B: Backend> ParamInit<'a, B> {
    pub fn new(rng: ChaCha8Rng, device: &'a B::Device) -> Self {
        Self { rng, device }
    }

    /// He-uniform weights with bound `sqrt(6 / fan_in)`.
    fn he_uniform<const D: usize>(&mut self, shape: [usize; D], fan_in: usize) -> Param<Tensor<B, D>> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n)
            .map(|_| self.rng.gen_range(-bound..bound) as f32)
            .collect();
        Param::from_tensor(Tensor::from_data(TensorData::new(values, shape), self.device))
    }

    fn zeros<const D: usize>(&mut self, shape: [usize; D]) -> Param<Tensor<B, D>> {
        Param::from_tensor(Tensor::zeros(shape, self.device))
    }

    pub fn conv(
        &mut self,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        bias: bool,
    ) -> Conv<B> {
        let fan_in = in_channels * kernel[0] * kernel[1];
        Conv {
            weight: self.he_uniform([out_channels, in_channels, kernel[0], kernel[1]], fan_in),
            bias: bias.then(|| self.zeros([out_channels])),
            stride,
        }
    }

    pub fn depthwise(&mut self, channels: usize, kernel: [usize; 2]) -> DepthwiseConv<B> {
        DepthwiseConv {
            weight: self.he_uniform([channels, kernel[0], kernel[1]], kernel[0] * kernel[1]),
            bias: self.zeros([channels]),
        }
    }

    pub fn up2x2(&mut self, in_channels: usize, out_channels: usize) -> UpConv2x2<B> {
        UpConv2x2 {
            weight: self.he_uniform([out_channels * 4, in_channels], in_channels),
            bias: self.zeros([out_channels]),
            out_channels,
        }
    }

    pub fn batch_norm(&mut self, channels: usize) -> BatchNorm<B, 2> {
        BatchNormConfig::new(channels).init(self.device)
    }
}

/// Stacks the `kh × kw` shifted (and strided) windows of a zero-padded input:
/// `[b, c, h, w] -> [b, c, kh·kw, oh, ow]`.
fn windows<B: Backend>(
    x: Tensor<B, 4>,
    kernel: [usize; 2],
    stride: usize,
) -> (Tensor<B, 5>, usize, usize) {
    let [b, c, h, w] = x.dims();
    let [kh, kw] = kernel;
    let (ph, pw) = (kh / 2, kw / 2);
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (w + 2 * pw - kw) / stride + 1;
    // extra trailing padding so that every strided window spans stride·o rows
    let extra_h = (kh - 1 + stride * oh).saturating_sub(h + 2 * ph);
    let extra_w = (kw - 1 + stride * ow).saturating_sub(w + 2 * pw);
    let xp = x.pad((pw, pw + extra_w, ph, ph + extra_h), 0.0);
    let mut taps = Vec::with_capacity(kh * kw);
    for i in 0..kh {
        for j in 0..kw {
            let tap = xp
                .clone()
                .slice([0..b, 0..c, i..i + stride * oh, j..j + stride * ow]);
            let tap = if stride == 1 {
                tap
            } else {
                tap.reshape([b, c, oh, stride, ow, stride])
                    .slice([0..b, 0..c, 0..oh, 0..1, 0..ow, 0..1])
                    .reshape([b, c, oh, ow])
            };
            taps.push(tap);
        }
    }
    (Tensor::stack(taps, 2), oh, ow)
}

/// Dense 2-D convolution with "same" zero padding (`k / 2`) and an integer stride.
#[derive(Module, Debug)]
pub struct Conv<B: Backend> {
    /// `[out, in, kh, kw]`
    pub weight: Param<Tensor<B, 4>>,
    pub bias: Option<Param<Tensor<B, 1>>>,
    pub stride: usize,
}

impl<B: Backend> Conv<B> {
    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let [o, _, _, _] = self.weight.dims();
        let kind = ConvKind::Dense {
            stride: self.stride,
        };
        let out = match kernels::conv(x, self.weight.val(), kind) {
            Ok(out) => out,
            Err((x, _)) => self.forward_composed(x),
        };
        match &self.bias {
            Some(bias) => out + bias.val().reshape([1, o, 1, 1]),
            None => out,
        }
    }

    /// im2col formulation built from differentiable tensor ops only.
    fn forward_composed(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let [b, c, h, w] = x.dims();
        let [o, _, kh, kw] = self.weight.dims();
        let (cols, oh, ow) = if kh == 1 && kw == 1 && self.stride == 1 {
            (x.reshape([b, c, h * w]), h, w)
        } else {
            let (win, oh, ow) = windows(x, [kh, kw], self.stride);
            (win.reshape([b, c * kh * kw, oh * ow]), oh, ow)
        };
        self.weight
            .val()
            .reshape([1, o, c * kh * kw])
            .matmul(cols)
            .reshape([b, o, oh, ow])
    }
}

/// Per-channel convolution with "same" padding; kernels may be rectangular
/// (strip convolutions are `1 × k` or `k × 1`).
#[derive(Module, Debug)]
pub struct DepthwiseConv<B: Backend> {
    /// `[channels, kh, kw]`
    pub weight: Param<Tensor<B, 3>>,
    pub bias: Param<Tensor<B, 1>>,
}

impl<B: Backend> DepthwiseConv<B> {
    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let [c, kh, kw] = self.weight.dims();
        let bias = self.bias.val().reshape([1, c, 1, 1]);
        let weight = self.weight.val().reshape([c, 1, kh, kw]);
        match kernels::conv(x, weight, ConvKind::Depthwise) {
            Ok(out) => out + bias,
            Err((x, _)) => self.forward_composed(x) + bias,
        }
    }

    /// Per-tap multiply-accumulate built from differentiable tensor ops only.
    fn forward_composed(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let [b, c, h, w] = x.dims();
        let [_, kh, kw] = self.weight.dims();
        let (ph, pw) = (kh / 2, kw / 2);
        let xp = x.pad((pw, pw, ph, ph), 0.0);
        let weight = self.weight.val();
        let mut acc: Tensor<B, 4> = Tensor::zeros([b, c, h, w], &xp.device());
        for i in 0..kh {
            for j in 0..kw {
                let tap = xp.clone().slice([0..b, 0..c, i..i + h, j..j + w]);
                let k = weight
                    .clone()
                    .slice([0..c, i..i + 1, j..j + 1])
                    .reshape([1, c, 1, 1]);
                acc = acc + tap * k;
            }
        }
        acc
    }
}

/// Transposed convolution with a 2×2 kernel and stride 2: a per-pixel linear
/// map to `4·out` channels followed by a depth-to-space shuffle.
#[derive(Module, Debug)]
pub struct UpConv2x2<B: Backend> {
    /// `[out · 4, in]`, ordered `(out, dy, dx)`.
    pub weight: Param<Tensor<B, 2>>,
    pub bias: Param<Tensor<B, 1>>,
    pub out_channels: usize,
}

impl<B: Backend> UpConv2x2<B> {
    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let [b, c, h, w] = x.dims();
        let o = self.out_channels;
        let y = self
            .weight
            .val()
            .reshape([1, o * 4, c])
            .matmul(x.reshape([b, c, h * w]))
            .reshape([b, o, 2, 2, h, w])
            .permute([0, 1, 4, 2, 5, 3])
            .reshape([b, o, 2 * h, 2 * w]);
        y + self.bias.val().reshape([1, o, 1, 1])
    }
}

/// Row-stochastic `[out, in]` matrix of 1-D linear interpolation weights with
/// half-pixel centers (`align_corners = false`), edges clamped.
pub fn linear_resize_matrix(input: usize, output: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let f = src - i0 as f64;
        m[o * input + i0] += (1.0 - f) as f32;
        m[o * input + i1] += f as f32;
    }
    m
}

/// Separable bilinear resize of `[b, c, h, w]` to `[b, c, out_h, out_w]`.
pub fn bilinear_resize<B: Backend>(x: Tensor<B, 4>, out_h: usize, out_w: usize) -> Tensor<B, 4> {
    let [_, _, h, w] = x.dims();
    if h == out_h && w == out_w {
        return x;
    }
    let device = x.device();
    let rows = Tensor::<B, 4>::from_data(
        TensorData::new(linear_resize_matrix(h, out_h), [1, 1, out_h, h]),
        &device,
    );
    // transposed column matrix, [w, out_w]
    let cols = Tensor::<B, 2>::from_data(
        TensorData::new(linear_resize_matrix(w, out_w), [out_w, w]),
        &device,
    )
    .transpose()
    .reshape([1, 1, w, out_w]);
    rows.matmul(x.matmul(cols))
}

/// 2×2 max pooling with stride 2 (spatial dims must be even).
pub fn max_pool2x2<B: Backend>(x: Tensor<B, 4>) -> Tensor<B, 4> {
    max_pool2d(x, [2, 2], [2, 2], [0, 0], [1, 1])
}
