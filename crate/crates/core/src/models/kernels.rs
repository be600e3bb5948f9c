//! Convolution kernels with hand-written gradients.
//!
//! The stock autodiff convolution backward on the ndarray backend computes the
//! weight gradient as a convolution whose kernel spans the whole image, which
//! is unusably slow at 256×256. Here the forward pass uses the backend's
//! convolution and the backward pass is assembled from a transposed
//! convolution (input gradient) and per-tap batched matmuls (weight gradient).
//!
//! Module structs stay generic over `Backend`, so the tracked implementation is
//! selected by concrete type at runtime; unknown autodiff backends fall back to
//! the purely op-composed path, which is slower but exact.

use std::any::{Any, TypeId};

use burn::backend::autodiff::checkpoint::base::Checkpointer;
use burn::backend::autodiff::checkpoint::strategy::NoCheckpointing;
use burn::backend::autodiff::grads::Gradients;
use burn::backend::autodiff::ops::{Backward, Ops, OpsKind};
use burn::backend::autodiff::NodeID;
use burn::backend::{Autodiff, NdArray};
use burn::tensor::backend::Backend;
use burn::tensor::module::conv2d;
use burn::tensor::ops::ConvOptions;
use burn::tensor::{Tensor, TensorPrimitive};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Dense convolution with the given stride.
    Dense { stride: usize },
    /// One filter per channel, stride 1.
    Depthwise,
}

/// Output side length of a "same"-padded (`k / 2`) convolution.
pub fn output_len(input: usize, kernel: usize, stride: usize) -> usize {
    (input + 2 * (kernel / 2) - kernel) / stride + 1
}

fn options(kind: ConvKind, kernel: [usize; 2], channels: usize) -> ConvOptions<2> {
    let padding = [kernel[0] / 2, kernel[1] / 2];
    match kind {
        ConvKind::Dense { stride } => ConvOptions::new([stride, stride], padding, [1, 1], 1),
        ConvKind::Depthwise => ConvOptions::new([1, 1], padding, [1, 1], channels),
    }
}

/// Forward convolution without graph tracking concerns. `weight` is
/// `[out, in, kh, kw]` (dense) or `[c, 1, kh, kw]` (depthwise).
fn forward<B: Backend>(x: Tensor<B, 4>, weight: Tensor<B, 4>, kind: ConvKind) -> Tensor<B, 4> {
    let [_, c, _, _] = x.dims();
    let [_, _, kh, kw] = weight.dims();
    conv2d(x, weight, None, options(kind, [kh, kw], c))
}

/// Inserts `stride − 1` zero rows/columns after every element of the last two dims.
fn dilate<B: Backend>(g: Tensor<B, 4>, stride: usize) -> Tensor<B, 4> {
    if stride == 1 {
        return g;
    }
    let [b, c, h, w] = g.dims();
    let device = g.device();
    let g = g.reshape([b, c, h, 1, w, 1]);
    let g = Tensor::cat(vec![g, Tensor::zeros([b, c, h, stride - 1, w, 1], &device)], 3);
    let g = Tensor::cat(vec![g, Tensor::zeros([b, c, h, stride, w, stride - 1], &device)], 5);
    g.reshape([b, c, h * stride, w * stride])
}

/// Pads (or crops, for negative amounts) the last two dims.
fn pad_or_crop<B: Backend>(x: Tensor<B, 4>, left: isize, right: isize, top: isize, bottom: isize) -> Tensor<B, 4> {
    let [b, c, h, w] = x.dims();
    let crop = |lo: isize, hi: isize, len: usize| {
        (lo.min(0).unsigned_abs())..(len - hi.min(0).unsigned_abs())
    };
    let x = if left < 0 || right < 0 || top < 0 || bottom < 0 {
        x.slice([0..b, 0..c, crop(top, bottom, h), crop(left, right, w)])
    } else {
        x
    };
    let p = |v: isize| v.max(0) as usize;
    if left > 0 || right > 0 || top > 0 || bottom > 0 {
        x.pad((p(left), p(right), p(top), p(bottom)), 0.0)
    } else {
        x
    }
}

/// Gradient with respect to the input, given the output gradient `g`.
fn input_grad<B: Backend>(
    g: Tensor<B, 4>,
    weight: Tensor<B, 4>,
    input_hw: [usize; 2],
    kind: ConvKind,
) -> Tensor<B, 4> {
    let [o, _, kh, kw] = weight.dims();
    let flipped = weight.flip([2, 3]);
    let (stride, kernel, groups) = match kind {
        ConvKind::Dense { stride } => (stride, flipped.swap_dims(0, 1), 1),
        ConvKind::Depthwise => (1, flipped, o),
    };
    let g = dilate(g, stride);
    let [_, _, lh, lw] = g.dims();
    let pad = |k: usize, len: usize, input: usize| {
        let p = (k / 2) as isize;
        let before = k as isize - 1 - p;
        (before, input as isize + p - len as isize)
    };
    let (top, bottom) = pad(kh, lh, input_hw[0]);
    let (left, right) = pad(kw, lw, input_hw[1]);
    let g = pad_or_crop(g, left, right, top, bottom);
    conv2d(g, kernel, None, ConvOptions::new([1, 1], [0, 0], [1, 1], groups))
}

/// Gradient with respect to the weight, given input `x` and output gradient `g`.
fn weight_grad<B: Backend>(
    x: Tensor<B, 4>,
    g: Tensor<B, 4>,
    weight_dims: [usize; 4],
    kind: ConvKind,
) -> Tensor<B, 4> {
    let [b, c, h, w] = x.dims();
    let [_, o, oh, ow] = g.dims();
    let [wo, wi, kh, kw] = weight_dims;
    let stride = match kind {
        ConvKind::Dense { stride } => stride,
        ConvKind::Depthwise => 1,
    };
    let (ph, pw) = (kh / 2, kw / 2);
    let extra_h = (kh - 1 + stride * oh).saturating_sub(h + 2 * ph);
    let extra_w = (kw - 1 + stride * ow).saturating_sub(w + 2 * pw);
    let xp = x.pad((pw, pw + extra_w, ph, ph + extra_h), 0.0);
    let g3 = g.reshape([b, o, oh * ow]);
    let mut taps = Vec::with_capacity(kh * kw);
    for i in 0..kh {
        for j in 0..kw {
            let tap = xp.clone().slice([0..b, 0..c, i..i + stride * oh, j..j + stride * ow]);
            let tap = if stride == 1 {
                tap
            } else {
                tap.reshape([b, c, oh, stride, ow, stride])
                    .slice([0..b, 0..c, 0..oh, 0..1, 0..ow, 0..1])
                    .reshape([b, c, oh, ow])
            };
            let tap = tap.reshape([b, c, oh * ow]);
            let per_tap = match kind {
                // [b, o, n] · [b, n, c] summed over the batch
                ConvKind::Dense { .. } => g3
                    .clone()
                    .matmul(tap.swap_dims(1, 2))
                    .sum_dim(0)
                    .reshape([wo, wi, 1]),
                ConvKind::Depthwise => (g3.clone() * tap)
                    .sum_dim(2)
                    .sum_dim(0)
                    .reshape([wo, wi, 1]),
            };
            taps.push(per_tap);
        }
    }
    Tensor::cat(taps, 2).reshape([wo, wi, kh, kw])
}

#[derive(Debug)]
struct ConvBackward {
    kind: ConvKind,
}

impl<I: Backend> Backward<I, 2> for ConvBackward {
    type State = (NodeID, NodeID);

    fn backward(self, ops: Ops<Self::State, 2>, grads: &mut Gradients, checkpointer: &mut Checkpointer) {
        let [node_x, node_w] = ops.parents;
        let grad = float::<I, 4>(grads.consume::<I>(&ops.node));
        let (x_state, w_state) = ops.state;
        let x = float::<I, 4>(checkpointer.retrieve_node_output::<I::FloatTensorPrimitive>(x_state));
        let w = float::<I, 4>(checkpointer.retrieve_node_output::<I::FloatTensorPrimitive>(w_state));
        let [_, _, h, wd] = x.dims();
        if let Some(node) = node_x {
            let gx = input_grad(grad.clone(), w.clone(), [h, wd], self.kind);
            grads.register::<I>(node.id, gx.into_primitive().tensor());
        }
        if let Some(node) = node_w {
            let gw = weight_grad(x, grad, w.dims(), self.kind);
            grads.register::<I>(node.id, gw.into_primitive().tensor());
        }
    }
}

fn float<B: Backend, const D: usize>(p: B::FloatTensorPrimitive) -> Tensor<B, D> {
    Tensor::from_primitive(TensorPrimitive::Float(p))
}

fn tracked<I: Backend>(
    x: Tensor<Autodiff<I>, 4>,
    weight: Tensor<Autodiff<I>, 4>,
    kind: ConvKind,
) -> Tensor<Autodiff<I>, 4> {
    let xp = x.into_primitive().tensor();
    let wp = weight.into_primitive().tensor();
    let run = |x: I::FloatTensorPrimitive, w: I::FloatTensorPrimitive| {
        forward(float::<I, 4>(x), float::<I, 4>(w), kind)
            .into_primitive()
            .tensor()
    };
    let prepared = ConvBackward { kind }
        .prepare::<NoCheckpointing>([xp.node.clone(), wp.node.clone()])
        .compute_bound()
        .stateful();
    let out = match prepared {
        OpsKind::Tracked(mut prep) => {
            let x_state = prep.checkpoint(&xp);
            let w_state = prep.checkpoint(&wp);
            prep.finish((x_state, w_state), run(xp.primitive, wp.primitive))
        }
        OpsKind::UnTracked(prep) => prep.finish(run(xp.primitive, wp.primitive)),
    };
    Tensor::from_primitive(TensorPrimitive::Float(out))
}

fn cast<T: 'static, U: 'static>(value: T) -> Result<U, T> {
    if TypeId::of::<T>() == TypeId::of::<U>() {
        let boxed: Box<dyn Any> = Box::new(value);
        Ok(*boxed.downcast::<U>().expect("type ids match"))
    } else {
        Err(value)
    }
}

fn try_tracked<B: Backend, I: Backend>(
    x: Tensor<B, 4>,
    weight: Tensor<B, 4>,
    kind: ConvKind,
) -> Result<Tensor<B, 4>, (Tensor<B, 4>, Tensor<B, 4>)> {
    let (x, weight) = cast::<_, (Tensor<Autodiff<I>, 4>, Tensor<Autodiff<I>, 4>)>((x, weight))?;
    Ok(cast(tracked(x, weight, kind)).unwrap_or_else(|_| unreachable!("same backend")))
}

/// "Same"-padded convolution. Returns `None` when no fast kernel applies to
/// backend `B` (an autodiff backend over an unknown inner backend).
pub fn conv<B: Backend>(x: Tensor<B, 4>, weight: Tensor<B, 4>, kind: ConvKind) -> Result<Tensor<B, 4>, (Tensor<B, 4>, Tensor<B, 4>)> {
    if !B::ad_enabled() {
        return Ok(forward(x, weight, kind));
    }
    match try_tracked::<B, NdArray<f32>>(x, weight, kind) {
        Ok(y) => Ok(y),
        Err((x, weight)) => try_tracked::<B, NdArray<f64>>(x, weight, kind),
    }
}
