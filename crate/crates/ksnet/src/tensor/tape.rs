//! Reverse-mode gradient tape.
//!
//! A tape records one forward pass as a flat list of nodes in execution
//! order; `backward` walks the list in exact reverse order, so operand
//! nodes always precede their consumers. Leaves registered with `leaf`
//! receive gradients; leaves registered with `constant` do not, and any
//! gradient work that only feeds constants is skipped (this is what makes
//! frozen-backbone fine-tuning cheap).

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels as k;
use super::{debug_check_finite, shape_error, Scalar, Tensor, TensorError};
use crate::transform::{permute_planes, BlockPermutation, CHANNELS};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId {
    tape: u64,
    index: u32,
}

/// Normalization epsilon, shared by training and inference statistics.
pub const NORM_EPS: f64 = 1e-5;

enum Op<F: Scalar> {
    Leaf,
    PatchConv { x: u32, w: u32, b: u32 },
    DepthwiseConv { x: u32, w: u32, b: u32 },
    PointwiseConv { x: u32, w: u32, b: u32 },
    Gelu { x: u32 },
    NormTrain { x: u32, gamma: u32, beta: u32, mean: Tensor<F>, inv_std: Tensor<F> },
    NormEval { x: u32, gamma: u32, beta: u32, mean: Tensor<F>, inv_std: Tensor<F> },
    Add { a: u32, b: u32 },
    Scale { x: u32, factor: F },
    GlobalAvgPool { x: u32 },
    Affine { x: u32, w: u32, b: u32 },
    SoftmaxCrossEntropy { logits: u32, labels: Vec<usize>, probs: Tensor<F> },
    PermutePixels { x: u32, perm: BlockPermutation },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    /// Whether a gradient must flow into this node (it is a differentiable
    /// leaf or depends on one).
    tracked: bool,
}

pub struct GradTape<F: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<F>>,
}

/// Batch statistics produced by a training-mode normalization, for the
/// caller to fold into running statistics.
pub struct NormBatchStats<F: Scalar> {
    pub mean: Tensor<F>,
    pub var: Tensor<F>,
}

impl<F: Scalar> Default for GradTape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> GradTape<F> {
    pub fn new() -> Self {
        Self {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Differentiable leaf: `backward` reports a gradient for it.
    pub fn leaf(&mut self, value: Tensor<F>) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf: gradients are never computed for it, and
    /// work feeding only constants is skipped during backward.
    pub fn constant(&mut self, value: Tensor<F>) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        assert_eq!(id.tape, self.id, "value from another tape");
        &self.nodes[id.index as usize].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> ValueId {
        let index = u32::try_from(self.nodes.len()).expect("tape too long");
        self.nodes.push(Node { value, op, tracked });
        ValueId { tape: self.id, index }
    }

    fn check(&self, id: ValueId, op: &'static str) -> Result<u32, TensorError> {
        if id.tape != self.id {
            return Err(TensorError::TapeMismatch);
        }
        debug_assert!((id.index as usize) < self.nodes.len(), "{op}: dangling id");
        Ok(id.index)
    }

    fn tracked(&self, index: u32) -> bool {
        self.nodes[index as usize].tracked
    }

    fn val(&self, index: u32) -> &Tensor<F> {
        &self.nodes[index as usize].value
    }

    fn any_tracked(&self, ids: &[u32]) -> bool {
        ids.iter().any(|&i| self.tracked(i))
    }

    /// Patch embedding: stride equals kernel size, no padding.
    /// x: (B, C, S, S), w: (D, C, P, P), b: (D)
    pub fn patch_conv(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (xi, wi, bi) = (self.check(x, "patch_conv")?, self.check(w, "patch_conv")?, self.check(b, "patch_conv")?);
        let (xs, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(shape_error("patch_conv", format!("ranks x{xs:?} w{ws:?} b{bs:?}")));
        }
        let p = ws[2];
        if ws[3] != p || ws[1] != xs[1] || bs[0] != ws[0] || p == 0 || xs[2] % p != 0 || xs[3] % p != 0 {
            return Err(shape_error(
                "patch_conv",
                format!("x{xs:?} incompatible with w{ws:?}, b{bs:?} (kernel must equal stride and divide the input)"),
            ));
        }
        let out = k::patch_conv_forward(self.val(xi), self.val(wi), self.val(bi));
        debug_check_finite(&out, "patch_conv");
        let tracked = self.any_tracked(&[xi, wi, bi]);
        Ok(self.push(out, Op::PatchConv { x: xi, w: wi, b: bi }, tracked))
    }

    /// Depthwise convolution with same padding. x: (B, C, H, W), w: (C, K, K), b: (C)
    pub fn depthwise_conv(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (xi, wi, bi) = (self.check(x, "depthwise_conv")?, self.check(w, "depthwise_conv")?, self.check(b, "depthwise_conv")?);
        let (xs, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        if xs.len() != 4 || ws.len() != 3 || bs.len() != 1 || ws[0] != xs[1] || ws[1] != ws[2] || bs[0] != xs[1] {
            return Err(shape_error("depthwise_conv", format!("x{xs:?} w{ws:?} b{bs:?}")));
        }
        let out = k::depthwise_conv_forward(self.val(xi), self.val(wi), self.val(bi));
        debug_check_finite(&out, "depthwise_conv");
        let tracked = self.any_tracked(&[xi, wi, bi]);
        Ok(self.push(out, Op::DepthwiseConv { x: xi, w: wi, b: bi }, tracked))
    }

    /// 1x1 convolution. x: (B, C, H, W), w: (D, C), b: (D)
    pub fn pointwise_conv(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (xi, wi, bi) = (self.check(x, "pointwise_conv")?, self.check(w, "pointwise_conv")?, self.check(b, "pointwise_conv")?);
        let (xs, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        if xs.len() != 4 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[1] || bs[0] != ws[0] {
            return Err(shape_error("pointwise_conv", format!("x{xs:?} w{ws:?} b{bs:?}")));
        }
        let out = k::pointwise_conv_forward(self.val(xi), self.val(wi), self.val(bi));
        debug_check_finite(&out, "pointwise_conv");
        let tracked = self.any_tracked(&[xi, wi, bi]);
        Ok(self.push(out, Op::PointwiseConv { x: xi, w: wi, b: bi }, tracked))
    }

    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let xi = self.check(x, "gelu")?;
        let out = k::gelu_forward(self.val(xi));
        debug_check_finite(&out, "gelu");
        let tracked = self.tracked(xi);
        Ok(self.push(out, Op::Gelu { x: xi }, tracked))
    }

    /// Normalization using the current batch statistics; also returns the
    /// statistics so the caller can update running averages.
    pub fn norm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
    ) -> Result<(ValueId, NormBatchStats<F>), TensorError> {
        let (xi, gi, bi) = (self.check(x, "norm_train")?, self.check(gamma, "norm_train")?, self.check(beta, "norm_train")?);
        self.norm_shape_check("norm_train", xi, gi, bi)?;
        let stats = k::batch_stats(self.val(xi), NORM_EPS);
        let out = k::batch_norm_apply(self.val(xi), &stats.mean, &stats.inv_std, self.val(gi), self.val(bi));
        debug_check_finite(&out, "norm_train");
        let tracked = self.any_tracked(&[xi, gi, bi]);
        let id = self.push(
            out,
            Op::NormTrain {
                x: xi,
                gamma: gi,
                beta: bi,
                mean: stats.mean.clone(),
                inv_std: stats.inv_std,
            },
            tracked,
        );
        Ok((
            id,
            NormBatchStats {
                mean: stats.mean,
                var: stats.var,
            },
        ))
    }

    /// Normalization using stored running statistics (inference mode; no
    /// coupling across the batch).
    pub fn norm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &Tensor<F>,
        running_var: &Tensor<F>,
    ) -> Result<ValueId, TensorError> {
        let (xi, gi, bi) = (self.check(x, "norm_eval")?, self.check(gamma, "norm_eval")?, self.check(beta, "norm_eval")?);
        self.norm_shape_check("norm_eval", xi, gi, bi)?;
        let c = self.val(xi).shape()[1];
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(shape_error(
                "norm_eval",
                format!("running stats {:?}/{:?} for {c} channels", running_mean.shape(), running_var.shape()),
            ));
        }
        let inv_std = running_var.map(|v| F::ONE / (v + F::from_f64(NORM_EPS)).sqrt());
        let out = k::batch_norm_apply(self.val(xi), running_mean, &inv_std, self.val(gi), self.val(bi));
        debug_check_finite(&out, "norm_eval");
        let tracked = self.any_tracked(&[xi, gi, bi]);
        Ok(self.push(
            out,
            Op::NormEval {
                x: xi,
                gamma: gi,
                beta: bi,
                mean: running_mean.clone(),
                inv_std,
            },
            tracked,
        ))
    }

    fn norm_shape_check(&self, op: &'static str, xi: u32, gi: u32, bi: u32) -> Result<(), TensorError> {
        let (xs, gs, bs) = (self.val(xi).shape(), self.val(gi).shape(), self.val(bi).shape());
        if xs.len() != 4 || gs.len() != 1 || bs.len() != 1 || gs[0] != xs[1] || bs[0] != xs[1] {
            return Err(shape_error(op, format!("x{xs:?} gamma{gs:?} beta{bs:?}")));
        }
        Ok(())
    }

    /// Elementwise addition of same-shape tensors (residual connection).
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (ai, bi) = (self.check(a, "add")?, self.check(b, "add")?);
        if self.val(ai).shape() != self.val(bi).shape() {
            return Err(shape_error(
                "add",
                format!("{:?} vs {:?}", self.val(ai).shape(), self.val(bi).shape()),
            ));
        }
        let out = k::add_forward(self.val(ai), self.val(bi));
        let tracked = self.any_tracked(&[ai, bi]);
        Ok(self.push(out, Op::Add { a: ai, b: bi }, tracked))
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, x: ValueId, factor: F) -> Result<ValueId, TensorError> {
        let xi = self.check(x, "scale")?;
        let out = self.val(xi).map(|v| v * factor);
        let tracked = self.tracked(xi);
        Ok(self.push(out, Op::Scale { x: xi, factor }, tracked))
    }

    /// x: (B, C, H, W) -> (B, C)
    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let xi = self.check(x, "global_avg_pool")?;
        if self.val(xi).shape().len() != 4 {
            return Err(shape_error("global_avg_pool", format!("{:?}", self.val(xi).shape())));
        }
        let out = k::global_avg_pool_forward(self.val(xi));
        let tracked = self.tracked(xi);
        Ok(self.push(out, Op::GlobalAvgPool { x: xi }, tracked))
    }

    /// Fully connected layer. x: (B, D), w: (C, D), b: (C)
    pub fn affine(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (xi, wi, bi) = (self.check(x, "affine")?, self.check(w, "affine")?, self.check(b, "affine")?);
        let (xs, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[1] || bs[0] != ws[0] {
            return Err(shape_error("affine", format!("x{xs:?} w{ws:?} b{bs:?}")));
        }
        let out = k::affine_forward(self.val(xi), self.val(wi), self.val(bi));
        debug_check_finite(&out, "affine");
        let tracked = self.any_tracked(&[xi, wi, bi]);
        Ok(self.push(out, Op::Affine { x: xi, w: wi, b: bi }, tracked))
    }

    /// Mean softmax cross-entropy over the batch; returns a scalar value.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId, TensorError> {
        let li = self.check(logits, "softmax_cross_entropy")?;
        let ls = self.val(li).shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(shape_error(
                "softmax_cross_entropy",
                format!("logits {ls:?} with {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= ls[1]) {
            return Err(shape_error(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {} classes", ls[1]),
            ));
        }
        let ce = k::softmax_cross_entropy_forward(self.val(li), labels);
        let tracked = self.tracked(li);
        Ok(self.push(
            Tensor::scalar(ce.loss),
            Op::SoftmaxCrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs: ce.probs,
            },
            tracked,
        ))
    }

    /// Keyed block-wise pixel permutation of a normalized image batch
    /// (B, 3, H, W). Backward applies the inverse permutation.
    pub fn permute_pixels(&mut self, x: ValueId, perm: &BlockPermutation) -> Result<ValueId, TensorError> {
        let xi = self.check(x, "permute_pixels")?;
        let xs = self.val(xi).shape();
        let m = perm.block_size();
        if xs.len() != 4 || xs[1] != CHANNELS || xs[2] % m != 0 || xs[3] % m != 0 {
            return Err(shape_error(
                "permute_pixels",
                format!("x{xs:?} with block size {m}"),
            ));
        }
        let (bs, h, w) = (xs[0], xs[2], xs[3]);
        let plane = CHANNELS * h * w;
        let src = self.val(xi).as_slice();
        let mut data = vec![F::ZERO; src.len()];
        for n in 0..bs {
            permute_planes(
                &src[n * plane..(n + 1) * plane],
                &mut data[n * plane..(n + 1) * plane],
                h,
                w,
                m,
                perm.entries(),
            );
        }
        let out = Tensor::from_vec(xs, data).expect("sized");
        let tracked = self.tracked(xi);
        Ok(self.push(out, Op::PermutePixels { x: xi, perm: perm.clone() }, tracked))
    }

    /// Reverse sweep from a scalar loss. Returns the gradient map; leaves
    /// that were never used by the loss get zero gradients on request.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<F>, TensorError> {
        let li = self.check(loss, "backward")?;
        let loss_val = self.val(li);
        if loss_val.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li as usize] = Some(Tensor::filled(loss_val.shape(), F::ONE));

        for i in (0..=li as usize).rev() {
            if !self.nodes[i].tracked {
                grads[i] = None;
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    // keep gradient for the caller
                    grads[i] = Some(dy);
                }
                Op::PatchConv { x, w, b } => {
                    let needs = (self.tracked(*x), self.tracked(*w), self.tracked(*b));
                    let (dx, dw, db) = k::patch_conv_backward(&dy, self.val(*x), self.val(*w), needs);
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::DepthwiseConv { x, w, b } => {
                    let needs = (self.tracked(*x), self.tracked(*w), self.tracked(*b));
                    let (dx, dw, db) = k::depthwise_conv_backward(&dy, self.val(*x), self.val(*w), needs);
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::PointwiseConv { x, w, b } => {
                    let needs = (self.tracked(*x), self.tracked(*w), self.tracked(*b));
                    let (dx, dw, db) = k::pointwise_conv_backward(&dy, self.val(*x), self.val(*w), needs);
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Gelu { x } => {
                    if self.tracked(*x) {
                        let dx = k::gelu_backward(&dy, self.val(*x));
                        self.accumulate(&mut grads, *x, Some(dx));
                    }
                }
                Op::NormTrain { x, gamma, beta, mean, inv_std } => {
                    let needs = (self.tracked(*x), self.tracked(*gamma), self.tracked(*beta));
                    let (dx, dg, db) =
                        k::batch_norm_train_backward(&dy, self.val(*x), mean, inv_std, self.val(*gamma), needs);
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *gamma, dg);
                    self.accumulate(&mut grads, *beta, db);
                }
                Op::NormEval { x, gamma, beta, mean, inv_std } => {
                    let needs = (self.tracked(*x), self.tracked(*gamma), self.tracked(*beta));
                    let (dx, dg, db) =
                        k::batch_norm_eval_backward(&dy, self.val(*x), mean, inv_std, self.val(*gamma), needs);
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *gamma, dg);
                    self.accumulate(&mut grads, *beta, db);
                }
                Op::Add { a, b } => {
                    if self.tracked(*a) {
                        self.accumulate(&mut grads, *a, Some(dy.clone()));
                    }
                    if self.tracked(*b) {
                        self.accumulate(&mut grads, *b, Some(dy.clone()));
                    }
                }
                Op::Scale { x, factor } => {
                    if self.tracked(*x) {
                        let f = *factor;
                        self.accumulate(&mut grads, *x, Some(dy.map(|v| v * f)));
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if self.tracked(*x) {
                        let dx = k::global_avg_pool_backward(&dy, self.val(*x).shape());
                        self.accumulate(&mut grads, *x, Some(dx));
                    }
                }
                Op::Affine { x, w, b } => {
                    let needs = (self.tracked(*x), self.tracked(*w), self.tracked(*b));
                    let (dx, dw, db) = k::affine_backward(&dy, self.val(*x), self.val(*w), needs);
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    if self.tracked(*logits) {
                        let dl = k::softmax_cross_entropy_backward(dy.item(), probs, labels);
                        self.accumulate(&mut grads, *logits, Some(dl));
                    }
                }
                Op::PermutePixels { x, perm } => {
                    if self.tracked(*x) {
                        let shape = self.val(*x).shape();
                        let (bs, h, w) = (shape[0], shape[2], shape[3]);
                        let plane = CHANNELS * h * w;
                        let src = dy.as_slice();
                        let mut data = vec![F::ZERO; src.len()];
                        for n in 0..bs {
                            permute_planes(
                                &src[n * plane..(n + 1) * plane],
                                &mut data[n * plane..(n + 1) * plane],
                                h,
                                w,
                                perm.block_size(),
                                perm.inverse_entries(),
                            );
                        }
                        let dx = Tensor::from_vec(shape, data).expect("sized");
                        self.accumulate(&mut grads, *x, Some(dx));
                    }
                }
            }
        }

        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], target: u32, contribution: Option<Tensor<F>>) {
        let Some(c) = contribution else { return };
        if !self.tracked(target) {
            return;
        }
        match &mut grads[target as usize] {
            Some(existing) => existing.add_assign(&c),
            slot @ None => *slot = Some(c),
        }
    }
}

/// Gradient map produced by [`GradTape::backward`].
pub struct Gradients<F: Scalar = f32> {
    tape: u64,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<F>> {
        assert_eq!(id.tape, self.tape, "gradient lookup from another tape");
        self.grads[id.index as usize].as_ref()
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor<F>> {
        assert_eq!(id.tape, self.tape, "gradient lookup from another tape");
        self.grads[id.index as usize].take()
    }

    /// Gradient of a leaf, materializing zeros if the leaf never
    /// influenced the loss.
    pub fn get_or_zeros(&self, tape: &GradTape<F>, id: ValueId) -> Tensor<F> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::transform::SecretKey;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, "tape-test");
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn gelu_fixes_origin_and_known_points() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![0.0, 1.0, -1.0]).unwrap());
        let y = tape.gelu(x).unwrap();
        let v = tape.value(y).as_slice();
        assert_eq!(v[0], 0.0);
        // x * Phi(x) at 1 and -1: Phi(1) = 0.841344746...
        assert!((v[1] - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((v[2] + (1.0 - 0.841_344_746_068_543)).abs() < 1e-12);
    }

    #[test]
    fn global_avg_pool_of_constant_channel_is_the_constant() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[2, 3, 4, 4], 2.5));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3]);
        assert!(tape.value(y).as_slice().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn patch_conv_matches_hand_computed_sums() {
        // 4x4 single-channel input, 2x2 patch kernel of ones on channel 0:
        // each output is the sum of its patch.
        let x_data: Vec<f64> = (1..=16).map(|v| v as f64).collect();
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 4, 4], x_data).unwrap());
        let w = tape.leaf(Tensor::filled(&[1, 1, 2, 2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.patch_conv(x, w, b).unwrap();
        // patches: [1,2,5,6]=14, [3,4,7,8]=22, [9,10,13,14]=46, [11,12,15,16]=54
        assert_eq!(tape.value(y).as_slice(), &[14.0, 22.0, 46.0, 54.0]);
    }

    #[test]
    fn linear_loss_gradient_is_the_other_factor() {
        // loss = w . x via the affine kernel: d(loss)/dw = x exactly.
        let x_vals = vec![0.5, -1.5, 2.0, 3.25];
        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[1, 4], x_vals.clone()).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.affine(x, w, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().as_slice(), &x_vals[..]);
        // constants receive no gradient
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn softmax_ce_uniform_logits_value_and_gradient() {
        let (bs, c) = (4, 10);
        let mut tape = GradTape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[bs, c]));
        let labels = vec![0, 3, 7, 9];
        let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
        assert!((tape.value(loss).item() - (c as f64).ln()).abs() < 1e-9);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits).unwrap().as_slice();
        for n in 0..bs {
            for k in 0..c {
                let expected = (1.0 / c as f64 - if labels[n] == k { 1.0 } else { 0.0 }) / bs as f64;
                assert!((g[n * c + k] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unused_leaf_gets_zero_gradient_on_request() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap());
        let unused = tape.leaf(Tensor::zeros(&[5]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.affine(x, w, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(&tape, unused).as_slice(), &[0.0; 5]);
    }

    #[test]
    fn backward_rejects_foreign_and_non_scalar_losses() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));

        let mut other = GradTape::<f64>::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(TensorError::TapeMismatch)));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = GradTape::<f32>::new();
            let x = tape.leaf(rand_tensor(&[2, 3, 8, 8], 11).to_f32());
            let w = tape.leaf(rand_tensor(&[4, 3, 2, 2], 12).to_f32());
            let b = tape.leaf(rand_tensor(&[4], 13).to_f32());
            let c = tape.patch_conv(x, w, b).unwrap();
            let g = tape.gelu(c).unwrap();
            let p = tape.global_avg_pool(g).unwrap();
            tape.value(p).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn permute_pixels_inverse_gradient() {
        // f(x) = sum of a fixed linear readout of shuffle(x); the gradient
        // must equal the unshuffled readout weights.
        let perm = BlockPermutation::derive(SecretKey(5), 2);
        let x0 = rand_tensor(&[1, 3, 4, 4], 21);

        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(x0.clone());
        let shuffled = tape.permute_pixels(x, &perm).unwrap();
        let pooled = tape.global_avg_pool(shuffled).unwrap(); // (1, 3)
        let w = tape.constant(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.affine(pooled, w, b).unwrap();
        let grads = tape.backward(y).unwrap();
        let gx = grads.get(x).unwrap();

        // direct construction of the expected gradient: each input pixel
        // contributes 1/(H*W) times the channel weight of wherever the
        // shuffle puts it.
        let mut expected = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let weights = [1.0, 2.0, 3.0];
        let mut upstream = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        for c in 0..3 {
            for i in 0..16 {
                upstream.as_mut_slice()[c * 16 + i] = weights[c] / 16.0;
            }
        }
        permute_planes(
            upstream.as_slice(),
            expected.as_mut_slice(),
            4,
            4,
            2,
            perm.inverse_entries(),
        );
        assert!(gx.max_abs_diff(&expected) < 1e-12);
    }
}
