//! Minimal reverse-mode gradient tape for the fixed watermarking graph.
//!
//! The tape records the exact sequence of primitives the network executes,
//! keeps every forward value, and replays vector-Jacobian products in reverse
//! construction order. It is deliberately not a general autodiff system:
//! only the ops the pipeline needs exist, and each saved context is the bare
//! minimum for its backward pass.

use crate::error::{Error, Result};
use crate::ops::activation::{
    relu, relu_backward, sigmoid, sigmoid_backward, tanh, tanh_backward,
};
use crate::ops::batchnorm::{
    batchnorm_infer, batchnorm_infer_backward, batchnorm_train, batchnorm_train_backward,
    BatchNormParams, BnCache,
};
use crate::ops::concat::{concat_channels, concat_channels_backward};
use crate::ops::conv::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, ConvLayerParams, Padding,
};
use crate::ops::pool::{avgpool2d, avgpool2d_backward};
use crate::tensor::Tensor;
use crate::wavelet::{dwt2_stack, idwt2_stack};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    Conv {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        padding: Padding,
        weights: ConvLayerParams,
    },
    ConvT {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        weights: ConvLayerParams,
    },
    BatchNormTrain {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        bn: BatchNormParams,
        cache: BnCache,
    },
    BatchNormInfer {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        bn: BatchNormParams,
    },
    Relu { x: VarId },
    Tanh { x: VarId },
    Sigmoid { x: VarId },
    AvgPool { x: VarId },
    Concat { a: VarId, b: VarId, ca: usize, cb: usize },
    Dwt { x: VarId },
    Idwt { x: VarId },
    /// Slice one band channel out of a stacked `[N, 4, h, w]` tensor.
    BandSelect { x: VarId, band: usize },
    /// Stacked bands with one channel replaced by a `[N, 1, h, w]` tensor.
    BandReplace { bands: VarId, band: usize, repl: VarId },
    /// `y = scale * x + offset`
    Affine { x: VarId, scale: f32 },
    /// Clamp to [0, 1]; gradient masked to the interior.
    Clamp01 { x: VarId },
    /// Externally computed value with an elementwise gradient scale; carries
    /// attack outputs (straight-through when the scale is all ones).
    External { x: VarId, grad_scale: Tensor },
    Reshape { x: VarId },
    /// Mean of squared differences -> scalar.
    Mse { a: VarId, b: VarId },
    /// Mean of absolute differences -> scalar.
    Mae { a: VarId, b: VarId },
    /// `wa * a + wb * b` on scalars.
    WeightedSum { a: VarId, b: VarId, wa: f32, wb: f32 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    label: &'static str,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by [`VarId`], produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, label: &'static str) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, op, needs_grad, label });
        id
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> VarId {
        self.push(value, Op::Leaf, needs_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf, false, "const")
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        weights: &ConvLayerParams,
        w: VarId,
        b: VarId,
        stride: usize,
        padding: Padding,
        label: &'static str,
    ) -> Result<VarId> {
        let out = conv2d(self.value(x), weights, stride, padding)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            out,
            Op::Conv { x, w, b, stride, padding, weights: weights.clone() },
            needs,
            label,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: VarId,
        weights: &ConvLayerParams,
        w: VarId,
        b: VarId,
        stride: usize,
        label: &'static str,
    ) -> Result<VarId> {
        let out = conv_transpose2d(self.value(x), weights, stride)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::ConvT { x, w, b, stride, weights: weights.clone() }, needs, label))
    }

    /// Train-mode batchnorm; updates the running stats in `bn` as a side
    /// effect and snapshots the parameters for backward.
    pub fn batchnorm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        bn: &mut BatchNormParams,
        label: &'static str,
    ) -> Result<VarId> {
        let (out, cache) = batchnorm_train(self.value(x), bn)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let snapshot = bn.clone();
        Ok(self.push(
            out,
            Op::BatchNormTrain { x, gamma, beta, bn: snapshot, cache },
            needs,
            label,
        ))
    }

    pub fn batchnorm_infer(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        bn: &BatchNormParams,
        label: &'static str,
    ) -> Result<VarId> {
        let out = batchnorm_infer(self.value(x), bn)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::BatchNormInfer { x, gamma, beta, bn: bn.clone() }, needs, label))
    }

    pub fn relu(&mut self, x: VarId, label: &'static str) -> VarId {
        let out = relu(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs, label)
    }

    pub fn tanh(&mut self, x: VarId, label: &'static str) -> VarId {
        let out = tanh(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Tanh { x }, needs, label)
    }

    pub fn sigmoid(&mut self, x: VarId, label: &'static str) -> VarId {
        let out = sigmoid(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs, label)
    }

    pub fn avgpool2d(&mut self, x: VarId, label: &'static str) -> Result<VarId> {
        let out = avgpool2d(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::AvgPool { x }, needs, label))
    }

    pub fn concat_channels(&mut self, a: VarId, b: VarId, label: &'static str) -> Result<VarId> {
        let ca = self.value(a).shape()[1];
        let cb = self.value(b).shape()[1];
        let out = concat_channels(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b, ca, cb }, needs, label))
    }

    pub fn dwt2(&mut self, x: VarId) -> Result<VarId> {
        let out = dwt2_stack(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dwt { x }, needs, "dwt2"))
    }

    pub fn idwt2(&mut self, x: VarId) -> Result<VarId> {
        let out = idwt2_stack(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Idwt { x }, needs, "idwt2"))
    }

    pub fn band_select(&mut self, x: VarId, band: usize) -> Result<VarId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if c != 4 || band >= 4 {
            return Err(Error::InvalidArgument(format!(
                "band_select needs 4 channels, got {c} (band {band})"
            )));
        }
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, 1, h, w]);
        for item in 0..n {
            out.data_mut()[item * plane..][..plane]
                .copy_from_slice(&self.value(x).data()[(item * 4 + band) * plane..][..plane]);
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::BandSelect { x, band }, needs, "band_select"))
    }

    pub fn band_replace(&mut self, bands: VarId, band: usize, repl: VarId) -> Result<VarId> {
        let (n, c, h, w) = self.value(bands).dims4()?;
        let rs = self.value(repl).shape();
        if c != 4 || rs != [n, 1, h, w] {
            return Err(Error::shape("band_replace", &[n, 1, h, w], rs));
        }
        let plane = h * w;
        let mut out = self.value(bands).clone();
        for item in 0..n {
            let src = &self.value(repl).data()[item * plane..][..plane];
            out.data_mut()[(item * 4 + band) * plane..][..plane].copy_from_slice(src);
        }
        let needs = self.needs(bands) || self.needs(repl);
        Ok(self.push(out, Op::BandReplace { bands, band, repl }, needs, "band_replace"))
    }

    pub fn affine(&mut self, x: VarId, scale: f32, offset: f32, label: &'static str) -> VarId {
        let out = self.value(x).map(|v| scale * v + offset);
        let needs = self.needs(x);
        self.push(out, Op::Affine { x, scale }, needs, label)
    }

    pub fn clamp01(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(|v| v.clamp(0.0, 1.0));
        let needs = self.needs(x);
        self.push(out, Op::Clamp01 { x }, needs, "clamp01")
    }

    /// Record an externally computed replacement for `x`'s value (the attack
    /// layer). Backward multiplies the upstream gradient elementwise by
    /// `grad_scale`; all-ones means pure straight-through.
    pub fn external(
        &mut self,
        x: VarId,
        value: Tensor,
        grad_scale: Tensor,
        label: &'static str,
    ) -> Result<VarId> {
        if value.shape() != self.value(x).shape() || grad_scale.shape() != value.shape() {
            return Err(Error::shape("external", self.value(x).shape(), value.shape()));
        }
        let needs = self.needs(x);
        Ok(self.push(value, Op::External { x, grad_scale }, needs, label))
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, needs, "reshape"))
    }

    pub fn mse(&mut self, a: VarId, b: VarId, label: &'static str) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mse", ta.shape(), tb.shape()));
        }
        let n = ta.len() as f64;
        let sum: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar((sum / n) as f32), Op::Mse { a, b }, needs, label))
    }

    pub fn mae(&mut self, a: VarId, b: VarId, label: &'static str) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mae", ta.shape(), tb.shape()));
        }
        let n = ta.len() as f64;
        let sum: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| ((x - y) as f64).abs())
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar((sum / n) as f32), Op::Mae { a, b }, needs, label))
    }

    pub fn weighted_sum(&mut self, a: VarId, wa: f32, b: VarId, wb: f32) -> VarId {
        let v = wa * self.value(a).item() + wb * self.value(b).item();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(v), Op::WeightedSum { a, b, wa, wb }, needs, "weighted_sum")
    }

    /// First node (construction order) holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes.iter().find(|n| !n.value.all_finite()).map(|n| n.label)
    }

    /// Reverse-mode sweep from a scalar `loss` node.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::UnrecordedNode);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument(
                "backward requires a scalar loss node".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.accumulate(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], id: VarId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride, padding, weights } => {
                let (gx, gw, gb) =
                    conv2d_backward(self.value(*x), weights, *stride, *padding, gout)?;
                self.add_grad(grads, *x, gx);
                self.add_grad(grads, *w, gw);
                self.add_grad(grads, *b, gb);
            }
            Op::ConvT { x, w, b, stride, weights } => {
                let (gx, gw, gb) =
                    conv_transpose2d_backward(self.value(*x), weights, *stride, gout)?;
                self.add_grad(grads, *x, gx);
                self.add_grad(grads, *w, gw);
                self.add_grad(grads, *b, gb);
            }
            Op::BatchNormTrain { x, gamma, beta, bn, cache } => {
                let (gx, gg, gb) = batchnorm_train_backward(self.value(*x), bn, cache, gout)?;
                self.add_grad(grads, *x, gx);
                self.add_grad(grads, *gamma, gg);
                self.add_grad(grads, *beta, gb);
            }
            Op::BatchNormInfer { x, gamma, beta, bn } => {
                let (gx, gg, gb) = batchnorm_infer_backward(self.value(*x), bn, gout)?;
                self.add_grad(grads, *x, gx);
                self.add_grad(grads, *gamma, gg);
                self.add_grad(grads, *beta, gb);
            }
            Op::Relu { x } => {
                self.add_grad(grads, *x, relu_backward(self.value(*x), gout));
            }
            Op::Tanh { x } => {
                self.add_grad(grads, *x, tanh_backward(&node.value, gout));
            }
            Op::Sigmoid { x } => {
                self.add_grad(grads, *x, sigmoid_backward(&node.value, gout));
            }
            Op::AvgPool { x } => {
                self.add_grad(grads, *x, avgpool2d_backward(self.value(*x), gout)?);
            }
            Op::Concat { a, b, ca, cb } => {
                let (ga, gb) = concat_channels_backward(gout, *ca, *cb)?;
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, gb);
            }
            // Orthonormal Haar: the adjoint of analysis is synthesis.
            Op::Dwt { x } => {
                self.add_grad(grads, *x, idwt2_stack(gout)?);
            }
            Op::Idwt { x } => {
                self.add_grad(grads, *x, dwt2_stack(gout)?);
            }
            Op::BandSelect { x, band } => {
                let (n, _, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let mut gx = Tensor::zeros(&[n, 4, h, w]);
                for item in 0..n {
                    gx.data_mut()[(item * 4 + band) * plane..][..plane]
                        .copy_from_slice(&gout.data()[item * plane..][..plane]);
                }
                self.add_grad(grads, *x, gx);
            }
            Op::BandReplace { bands, band, repl } => {
                let (n, _, h, w) = gout.dims4()?;
                let plane = h * w;
                let mut g_bands = gout.clone();
                let mut g_repl = Tensor::zeros(&[n, 1, h, w]);
                for item in 0..n {
                    let slot = &mut g_bands.data_mut()[(item * 4 + band) * plane..][..plane];
                    g_repl.data_mut()[item * plane..][..plane].copy_from_slice(slot);
                    slot.fill(0.0);
                }
                self.add_grad(grads, *bands, g_bands);
                self.add_grad(grads, *repl, g_repl);
            }
            Op::Affine { x, scale } => {
                self.add_grad(grads, *x, gout.map(|g| g * scale));
            }
            Op::Clamp01 { x } => {
                let xin = self.value(*x);
                let g = Tensor::from_fn(xin.shape(), |i| {
                    if xin[i] > 0.0 && xin[i] < 1.0 { gout[i] } else { 0.0 }
                });
                self.add_grad(grads, *x, g);
            }
            Op::External { x, grad_scale } => {
                let g = Tensor::from_fn(gout.shape(), |i| gout[i] * grad_scale[i]);
                self.add_grad(grads, *x, g);
            }
            Op::Reshape { x } => {
                let g = gout.clone().reshape(self.value(*x).shape())?;
                self.add_grad(grads, *x, g);
            }
            Op::Mse { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = gout.item() * 2.0 / ta.len() as f32;
                let ga = Tensor::from_fn(ta.shape(), |i| scale * (ta[i] - tb[i]));
                let gb = ga.map(|v| -v);
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, gb);
            }
            Op::Mae { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = gout.item() / ta.len() as f32;
                let ga = Tensor::from_fn(ta.shape(), |i| scale * (ta[i] - tb[i]).signum());
                let gb = ga.map(|v| -v);
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, gb);
            }
            Op::WeightedSum { a, b, wa, wb } => {
                let g = gout.item();
                self.add_grad(grads, *a, Tensor::scalar(g * wa));
                self.add_grad(grads, *b, Tensor::scalar(g * wb));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unrecorded_node_is_an_error() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(VarId(3)), Err(Error::UnrecordedNode)));
    }

    #[test]
    fn weighted_sum_gradients_are_the_weights() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(0.01), true);
        let b = t.leaf(Tensor::scalar(0.5), true);
        let l = t.weighted_sum(a, 33.0, b, 0.2);
        assert!((t.value(l).item() - 0.43).abs() < 1e-6);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 33.0);
        assert_eq!(g.get(b).unwrap().item(), 0.2);
    }

    #[test]
    fn concat_backward_splits_by_channel_range() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32), true);
        let b = t.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| -(i as f32)), true);
        let cat = t.concat_channels(a, b, "cat").unwrap();
        let target = t.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let loss = t.mse(cat, target, "loss").unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().shape(), &[1, 2, 2, 2]);
        assert_eq!(g.get(b).unwrap().shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn external_straight_through_passes_gradient_unchanged() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f32 / 4.0), true);
        let replaced = Tensor::full(&[1, 1, 2, 2], 0.9);
        let st = t
            .external(x, replaced, Tensor::full(&[1, 1, 2, 2], 1.0), "jpeg")
            .unwrap();
        let target = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let loss = t.mse(st, target, "loss").unwrap();
        let g = t.backward(loss).unwrap();
        // gradient at x equals the gradient the loss feeds into the external
        // node: d/dy mean((y-0)^2) = 2y/n
        let expect = 2.0 * 0.9 / 4.0;
        for v in g.get(x).unwrap().data() {
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_detection_names_the_layer() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(f32::INFINITY), false);
        let _ = x;
        assert_eq!(t.first_non_finite(), Some("leaf"));
    }
}
