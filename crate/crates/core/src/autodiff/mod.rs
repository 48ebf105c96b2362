//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! The engine provides exactly the closed primitive set the networks need.
//! A [`Tape`] is a single-threaded arena of tensors in creation order, which
//! is already a topological order; [`Tape::backward`] walks it once in
//! reverse. Storage is generic over [`Scalar`] — training runs on `f32`,
//! while gradient verification instantiates the same code at `f64` so the
//! analytic and finite-difference sides share precision.
//!
//! Elementwise transcendentals and all reductions (convolution, norms, sums)
//! accumulate in 64-bit regardless of the storage type. Summation order is
//! fixed, so identical inputs produce bitwise identical outputs.

mod conv;
mod elementwise;
mod gradcheck;
mod norm;

pub use gradcheck::{grad_check, GradCheckReport};
pub use norm::{default_group_count, BatchStats, NORM_EPS};

use thiserror::Error;

/// Tensor element type. `to_f64`/`from_f64` bound every transcendental and
/// accumulation, so `f32` storage still computes in 64-bit.
pub trait Scalar:
    Copy + PartialOrd + std::fmt::Debug + Send + Sync + 'static + serde::Serialize
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_scalar(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
}

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("bad argument to {op}: {msg}")]
    BadArg { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AdError {
    AdError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn bad_arg(op: &'static str, msg: impl Into<String>) -> AdError {
    AdError::BadArg {
        op,
        msg: msg.into(),
    }
}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

pub(crate) struct Node<F: Scalar> {
    pub shape: Vec<usize>,
    pub values: Vec<F>,
    pub requires_grad: bool,
    pub op: Option<Op<F>>,
}

/// Recorded primitive application with everything backward needs.
pub(crate) enum Op<F: Scalar> {
    Linear {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
    },
    Conv3d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose3d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
    },
    MaxPool3d {
        x: TensorId,
        argmax: Vec<u32>,
    },
    GroupNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
    /// Batch statistics over spatial positions, one sample.
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
    /// Frozen running statistics; a per-channel affine map.
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
    Relu {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Softmax {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    ConcatFirst {
        a: TensorId,
        b: TensorId,
    },
    ConcatLast {
        a: TensorId,
        b: TensorId,
    },
    Reshape {
        x: TensorId,
    },
    SelectRows {
        x: TensorId,
        rows: Vec<usize>,
    },
    SliceLast {
        x: TensorId,
        start: usize,
    },
    PairConcat {
        x: TensorId,
    },
    SymPairs {
        x: TensorId,
        pairs: Vec<(usize, usize)>,
    },
    MpAggregate {
        latents: TensorId,
        feats: TensorId,
        logits: TensorId,
        argmax: Vec<u32>,
    },
    /// `priors` is the constant bank slice, flattened `m * volume`.
    WeightedGridSum {
        weights: TensorId,
        priors: Vec<F>,
    },
    Sum {
        x: TensorId,
    },
    Mean {
        x: TensorId,
    },
    CeWithLogits {
        logits: TensorId,
        targets: Vec<usize>,
    },
    BceWithLogits {
        logits: TensorId,
        targets: Vec<F>,
    },
    BceProbs {
        probs: TensorId,
        targets: Vec<F>,
    },
    Mse {
        a: TensorId,
        b: TensorId,
    },
}

/// Gradient buffers produced by one backward pass, indexed by tensor id.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. this tensor. `None` when the tensor does
    /// not require gradients.
    pub fn get(&self, id: TensorId) -> Option<&[F]> {
        self.grads
            .get(id.0)
            .and_then(|g| g.as_ref().map(|v| v.as_slice()))
    }
}

/// Arena of tensors and recorded operations; one forward/backward episode.
pub struct Tape<F: Scalar> {
    pub(crate) nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn leaf(
        &mut self,
        shape: Vec<usize>,
        values: Vec<F>,
        requires_grad: bool,
    ) -> Result<TensorId, AdError> {
        let want: usize = shape.iter().product();
        if values.len() != want {
            return Err(bad_arg(
                "leaf",
                format!("{} values for shape {shape:?} (need {want})", values.len()),
            ));
        }
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op: None,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Trainable leaf: receives a gradient buffer in every backward pass.
    pub fn param(&mut self, shape: &[usize], values: Vec<F>) -> Result<TensorId, AdError> {
        self.leaf(shape.to_vec(), values, true)
    }

    /// Non-trainable leaf (inputs, targets, fixed masks).
    pub fn constant(&mut self, shape: &[usize], values: Vec<F>) -> Result<TensorId, AdError> {
        self.leaf(shape.to_vec(), values, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorId {
        let count = shape.iter().product();
        self.leaf(shape.to_vec(), vec![F::ZERO; count], false)
            .expect("count matches shape by construction")
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].values
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a single-element tensor as f64.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0].to_f64()
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        values: Vec<F>,
        parents: &[TensorId],
        op: Op<F>,
    ) -> TensorId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op: Some(op),
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar loss. Every gradient-requiring leaf
    /// gets a buffer (zero if the loss does not depend on it).
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<F>, AdError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.values.len() != 1 {
            return Err(AdError::NonScalarLoss(loss_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.is_none() && node.requires_grad {
                grads[i] = Some(vec![F::ZERO; node.values.len()]);
            }
        }
        add_to(&mut grads[loss.0], 1, &[F::ONE]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else { continue };
            // Op nodes surrender their buffer; leaves keep theirs for the caller.
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_op(op, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, op: &Op<F>, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        match op {
            Op::Linear { x, w, b } => self.bw_linear(*x, *w, *b, gout, grads),
            Op::Conv3d {
                x,
                w,
                b,
                stride,
                padding,
            } => self.bw_conv3d(*x, *w, *b, *stride, *padding, gout, grads),
            Op::ConvTranspose3d {
                x,
                w,
                b,
                stride,
                padding,
            } => self.bw_conv_transpose3d(*x, *w, *b, *stride, *padding, gout, grads),
            Op::MaxPool3d { x, argmax } => self.bw_maxpool3d(*x, argmax, gout, grads),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                invstd,
            } => self.bw_group_norm(*x, *gamma, *beta, *groups, mean, invstd, gout, grads),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                let channels = self.nodes[x.0].shape[0];
                self.bw_group_norm(*x, *gamma, *beta, channels, mean, invstd, gout, grads)
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => self.bw_batch_norm_eval(*x, *gamma, *beta, mean, invstd, gout, grads),
            Op::Relu { x } => self.bw_relu(*x, gout, grads),
            Op::Sigmoid { x } => self.bw_sigmoid(*x, gout, grads),
            Op::Softmax { x } => self.bw_softmax(*x, gout, grads),
            Op::Add { a, b } => self.bw_add(*a, *b, gout, grads),
            Op::Mul { a, b } => self.bw_mul(*a, *b, gout, grads),
            Op::Scale { x, c } => self.bw_scale(*x, *c, gout, grads),
            Op::ConcatFirst { a, b } => self.bw_concat_first(*a, *b, gout, grads),
            Op::ConcatLast { a, b } => self.bw_concat_last(*a, *b, gout, grads),
            Op::Reshape { x } => self.bw_reshape(*x, gout, grads),
            Op::SelectRows { x, rows } => self.bw_select_rows(*x, rows, gout, grads),
            Op::SliceLast { x, start } => self.bw_slice_last(*x, *start, gout, grads),
            Op::PairConcat { x } => self.bw_pair_concat(*x, gout, grads),
            Op::SymPairs { x, pairs } => self.bw_sym_pairs(*x, pairs, gout, grads),
            Op::MpAggregate {
                latents,
                feats,
                logits,
                argmax,
            } => self.bw_mp_aggregate(*latents, *feats, *logits, argmax, gout, grads),
            Op::WeightedGridSum { weights, priors } => {
                self.bw_weighted_grid_sum(*weights, priors, gout, grads)
            }
            Op::Sum { x } => self.bw_sum(*x, gout, grads),
            Op::Mean { x } => self.bw_mean(*x, gout, grads),
            Op::CeWithLogits { logits, targets } => {
                self.bw_ce_with_logits(*logits, targets, gout, grads)
            }
            Op::BceWithLogits { logits, targets } => {
                self.bw_bce_with_logits(*logits, targets, gout, grads)
            }
            Op::BceProbs { probs, targets } => self.bw_bce_probs(*probs, targets, gout, grads),
            Op::Mse { a, b } => self.bw_mse(*a, *b, gout, grads),
        }
    }

    /// True if `id` participates in gradient computation.
    pub(crate) fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }
}

/// Lazily allocates and accumulates into a gradient slot.
pub(crate) fn add_to<F: Scalar>(slot: &mut Option<Vec<F>>, len: usize, delta: &[F]) {
    let buf = slot.get_or_insert_with(|| vec![F::ZERO; len]);
    for (g, d) in buf.iter_mut().zip(delta) {
        *g = F::from_f64(g.to_f64() + d.to_f64());
    }
}

/// Accumulates an f64 buffer into a gradient slot.
pub(crate) fn add_to_f64<F: Scalar>(slot: &mut Option<Vec<F>>, delta: &[f64]) {
    let buf = slot.get_or_insert_with(|| vec![F::ZERO; delta.len()]);
    for (g, d) in buf.iter_mut().zip(delta) {
        *g = F::from_f64(g.to_f64() + d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn mse_at_equality_has_zero_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let vals = vec![0.3, -0.7, 2.0];
        let x = tape.param(&[3], vals.clone()).unwrap();
        let target = tape.constant(&[3], vals).unwrap();
        let loss = tape.mse(x, target).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
        assert_eq!(grads.get(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(&[2], vec![1.0, 2.0]).unwrap();
        let unused = tape.param(&[3], vec![4.0, 5.0, 6.0]).unwrap();
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(AdError::NonScalarLoss(shape)) if shape == vec![2]
        ));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || -> Vec<f32> {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut tape: Tape<f32> = Tape::new();
            let x_vals: Vec<f32> = (0..4 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w_vals: Vec<f32> = (0..8 * 4 * 27).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let x = tape.constant(&[4, 4, 4, 4], x_vals).unwrap();
            let w = tape.param(&[8, 4, 3, 3, 3], w_vals).unwrap();
            let y = tape.conv3d(x, w, None, 1, 1).unwrap();
            let y = tape.relu(y);
            tape.values(y).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn three_layer_net_matches_finite_differences() {
        // Random MLP: linear -> relu -> linear -> relu -> linear -> mse.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dims = [5usize, 7, 6, 3];
        let mut shapes: Vec<Vec<usize>> = vec![vec![dims[0]]];
        for i in 0..3 {
            shapes.push(vec![dims[i + 1], dims[i]]);
            shapes.push(vec![dims[i + 1]]);
        }
        let inits: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| rand_vec(s.iter().product(), &mut rng))
            .collect();
        let report = grad_check(
            |tape, ids| {
                let mut h = ids[0];
                for layer in 0..3 {
                    let w = ids[1 + 2 * layer];
                    let b = ids[2 + 2 * layer];
                    h = tape.linear(h, w, Some(b))?;
                    if layer < 2 {
                        h = tape.relu(h);
                    }
                }
                let target = tape.constant(&[3], vec![0.25, -0.5, 1.0])?;
                tape.mse(h, target)
            },
            &shapes,
            &inits,
            1e-4,
            1e-6,
            400,
            99,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_error);
    }
}
