//! Tape-based reverse-mode differentiation over dense `ndarray` tensors.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to propagate gradients. Nodes are immutable once recorded, so a
//! [`Var`] can be held across later operations without aliasing concerns.

mod kernels;

use std::cell::RefCell;
use std::fmt::Debug;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn, NdFloat};
use num_traits::{FromPrimitive, ToPrimitive};

pub use kernels::bilinear_plan;

/// Element type of the engine: `f32` for training, `f64` for gradient checks.
pub trait Float: NdFloat + FromPrimitive + ToPrimitive + Default + Debug + 'static {
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Float for f32 {}
impl Float for f64 {}

/// Per-key validity flags for a batch of sequences (`true` = real token).
#[derive(Clone, Debug, PartialEq)]
pub struct KeyMask {
    pub batch: usize,
    pub len: usize,
    pub valid: Vec<bool>,
}

impl KeyMask {
    pub fn all_valid(batch: usize, len: usize) -> Self {
        KeyMask {
            batch,
            len,
            valid: vec![true; batch * len],
        }
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.valid[b * self.len..(b + 1) * self.len]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormMode {
    /// Normalize with batch statistics.
    Batch,
    /// Normalize with fixed running statistics.
    Running,
}

pub(crate) enum Op<T: Float> {
    Leaf,
    MatMul { a: usize, w: usize },
    AddBias { x: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, s: T },
    Sum { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: ArrayD<T>, inv_std: Vec<T> },
    Gelu { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, scale: T, probs: Rc<ArrayD<T>> },
    SliceTokens { x: usize, start: usize },
    ConcatTokens { parts: Vec<(usize, usize)> },
    ConcatChannels { parts: Vec<(usize, usize)> },
    Reshape { x: usize },
    BroadcastBatch { x: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Upsample2x { x: usize },
    Conv3x3 { x: usize, w: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: ArrayD<T>, inv_std: Vec<T>, mode: NormMode },
    DotMap { f: usize, t: usize },
    ScaleSamples { x: usize, factors: Vec<T> },
    Bce { m: usize, target: Rc<ArrayD<T>>, eps: T },
    Dice { m: usize, target: Rc<ArrayD<T>>, smooth: T },
}

pub(crate) struct Node<T: Float> {
    value: Rc<ArrayD<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a differentiable computation.
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        self.push_rc(Rc::new(value), op, needs_grad)
    }

    fn push_rc(&self, value: Rc<ArrayD<T>>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&self, value: Rc<ArrayD<T>>) -> Var<'_, T> {
        self.push_rc(value, Op::Leaf, true)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<ArrayD<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Back-propagates from a scalar `loss`, returning gradients of every leaf
    /// created with [`Tape::param`] that the loss depends on.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(ArrayD::from_elem(nodes[loss.id].value.raw_dim(), T::one()));
        let mut leaf_grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].needs_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                leaf_grads[id] = Some(g);
                continue;
            }
            for (input, gin) in kernels::backward(&nodes, id, &g) {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => *acc += &gin,
                    slot @ None => *slot = Some(gin),
                }
            }
        }
        Gradients { grads: leaf_grads }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Float> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var<'_, T>) -> ArrayD<T> {
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(v.value().raw_dim()),
        }
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<ArrayD<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<ArrayD<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn scalar(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1);
        *v.iter().next().unwrap()
    }

    fn unary(&self, value: ArrayD<T>, op: Op<T>) -> Var<'t, T> {
        let needs = self.tape.needs(self.id);
        self.tape.push(value, op, needs)
    }

    fn binary(&self, other: Var<'t, T>, value: ArrayD<T>, op: Op<T>) -> Var<'t, T> {
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(value, op, needs)
    }

    /// `self [.., K] @ w [K, N]`.
    pub fn matmul(&self, w: Var<'t, T>) -> Var<'t, T> {
        let out = kernels::matmul(&self.value(), &w.value());
        self.binary(w, out, Op::MatMul { a: self.id, w: w.id })
    }

    /// Adds a bias vector broadcast over the last axis.
    pub fn add_bias(&self, b: Var<'t, T>) -> Var<'t, T> {
        let bv = b.value();
        let mut out = (*self.value()).clone();
        assert_eq!(out.shape().last(), bv.shape().last(), "bias width");
        let width = bv.len();
        let bs = bv.as_slice().unwrap();
        for row in out.as_slice_mut().unwrap().chunks_exact_mut(width) {
            for (o, &bb) in row.iter_mut().zip(bs) {
                *o += bb;
            }
        }
        self.binary(b, out, Op::AddBias { x: self.id, b: b.id })
    }

    pub fn add(&self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "add shapes");
        let out = &*a + &*b;
        self.binary(other, out, Op::Add { a: self.id, b: other.id })
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "mul shapes");
        let out = &*a * &*b;
        self.binary(other, out, Op::Mul { a: self.id, b: other.id })
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let out = self.value().mapv(|x| x * s);
        self.unary(out, Op::Scale { x: self.id, s })
    }

    pub fn sum(&self) -> Var<'t, T> {
        let total = self.value().iter().fold(T::zero(), |acc, &x| acc + x);
        self.unary(ArrayD::from_elem(IxDyn(&[]), total), Op::Sum { x: self.id })
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Var<'t, T> {
        let (out, xhat, inv_std) = kernels::layer_norm(&self.value(), &gain.value(), &bias.value(), eps);
        let needs = self.tape.needs(self.id) || self.tape.needs(gain.id) || self.tape.needs(bias.id);
        self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<'t, T> {
        let out = self.value().mapv(kernels::gelu);
        self.unary(out, Op::Gelu { x: self.id })
    }

    pub fn relu(&self) -> Var<'t, T> {
        let out = self.value().mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(out, Op::Relu { x: self.id })
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let out = self.value().mapv(kernels::sigmoid);
        self.unary(out, Op::Sigmoid { x: self.id })
    }

    /// Scaled dot-product attention with `heads` heads.
    ///
    /// `q` is `[B, Nq, C]`, `k`/`v` are `[B, Nk, C]`; keys flagged invalid in
    /// `mask` receive zero weight. Returns the attended values and the
    /// per-head weights `[B, heads, Nq, Nk]`.
    pub fn attention(
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
        heads: usize,
        mask: Option<&KeyMask>,
    ) -> (Var<'t, T>, Rc<ArrayD<T>>) {
        let qv = q.value();
        let width = qv.shape()[2];
        assert_eq!(width % heads, 0, "width divisible by heads");
        let scale = T::one() / T::c((width / heads) as f64).sqrt();
        let (out, probs) = kernels::attention(&qv, &k.value(), &v.value(), heads, scale, mask);
        let probs = Rc::new(probs);
        let tape = q.tape;
        let needs = tape.needs(q.id) || tape.needs(k.id) || tape.needs(v.id);
        let var = tape.push(
            out,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                heads,
                scale,
                probs: probs.clone(),
            },
            needs,
        );
        (var, probs)
    }

    /// Tokens `start..start + len` of a `[B, N, C]` sequence.
    pub fn slice_tokens(&self, start: usize, len: usize) -> Var<'t, T> {
        let out = kernels::slice_tokens(&self.value(), start, len);
        self.unary(out, Op::SliceTokens { x: self.id, start })
    }

    /// Concatenates `[B, N_i, C]` sequences along the token axis.
    pub fn concat_tokens(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let out = kernels::concat_axis(&values, 1);
        let needs = parts.iter().any(|p| tape.needs(p.id));
        let meta = parts.iter().zip(&values).map(|(p, v)| (p.id, v.shape()[1])).collect();
        tape.push(out, Op::ConcatTokens { parts: meta }, needs)
    }

    /// Concatenates tensors along their last axis.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let axis = values[0].ndim() - 1;
        let out = kernels::concat_axis(&values, axis);
        let needs = parts.iter().any(|p| tape.needs(p.id));
        let meta = parts.iter().zip(&values).map(|(p, v)| (p.id, v.shape()[axis])).collect();
        tape.push(out, Op::ConcatChannels { parts: meta }, needs)
    }

    /// Row-major reshape.
    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        let v = self.value();
        let out = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        self.unary(out, Op::Reshape { x: self.id })
    }

    /// Repeats `self` along a new leading batch axis.
    pub fn broadcast_batch(&self, batch: usize) -> Var<'t, T> {
        let v = self.value();
        let mut shape = vec![batch];
        shape.extend_from_slice(v.shape());
        let out = v
            .broadcast(IxDyn(&shape))
            .expect("leading broadcast")
            .as_standard_layout()
            .into_owned();
        self.unary(out, Op::BroadcastBatch { x: self.id })
    }

    /// Row lookup into a `[V, C]` table; `ids` is laid out as `shape`.
    pub fn embedding(&self, ids: &[usize], shape: &[usize]) -> Var<'t, T> {
        let out = kernels::embedding(&self.value(), ids, shape);
        self.unary(
            out,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        )
    }

    /// Bilinear x2 spatial upsampling of an NHWC map (half-pixel centers).
    pub fn upsample2x(&self) -> Var<'t, T> {
        let out = kernels::upsample2x(&self.value());
        self.unary(out, Op::Upsample2x { x: self.id })
    }

    /// 3x3 same-padded convolution of an NHWC map with `w [9*Cin, Cout]`.
    pub fn conv3x3(&self, w: Var<'t, T>) -> Var<'t, T> {
        let out = kernels::conv3x3(&self.value(), &w.value());
        self.binary(w, out, Op::Conv3x3 { x: self.id, w: w.id })
    }

    /// Batch normalization over the last (channel) axis.
    ///
    /// With [`NormMode::Batch`] the returned pair holds the batch mean and the
    /// unbiased batch variance, for the caller to fold into running statistics.
    pub fn batch_norm(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mode: NormMode,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> (Var<'t, T>, Option<(Vec<T>, Vec<T>)>) {
        let (out, xhat, inv_std, stats) =
            kernels::batch_norm(&self.value(), &gamma.value(), &beta.value(), mode, running, eps);
        let needs = self.tape.needs(self.id) || self.tape.needs(gamma.id) || self.tape.needs(beta.id);
        let var = self.tape.push(
            out,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                mode,
            },
            needs,
        );
        (var, stats)
    }

    /// Per-pixel dot product of an NHWC map with one vector per sample `[B, C]`.
    pub fn dot_map(&self, t: Var<'t, T>) -> Var<'t, T> {
        let out = kernels::dot_map(&self.value(), &t.value());
        self.binary(t, out, Op::DotMap { f: self.id, t: t.id })
    }

    /// Multiplies each sample (leading index) by its own factor.
    pub fn scale_samples(&self, factors: &[T]) -> Var<'t, T> {
        let mut out = (*self.value()).clone();
        assert_eq!(out.shape()[0], factors.len());
        for (mut sample, &f) in out.outer_iter_mut().zip(factors) {
            sample.mapv_inplace(|x| x * f);
        }
        self.unary(
            out,
            Op::ScaleSamples {
                x: self.id,
                factors: factors.to_vec(),
            },
        )
    }

    /// Mean over samples of the per-sample pixel-mean binary cross-entropy of
    /// probabilities `self` (clamped to `[eps, 1 - eps]`) against `target`.
    pub fn bce(&self, target: Rc<ArrayD<T>>, eps: T) -> Var<'t, T> {
        let loss = kernels::bce(&self.value(), &target, eps);
        self.unary(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::Bce {
                m: self.id,
                target,
                eps,
            },
        )
    }

    /// Mean over samples of the soft Dice loss with additive smoothing.
    pub fn dice(&self, target: Rc<ArrayD<T>>, smooth: T) -> Var<'t, T> {
        let loss = kernels::dice(&self.value(), &target, smooth);
        self.unary(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::Dice {
                m: self.id,
                target,
                smooth,
            },
        )
    }
}

#[cfg(test)]
mod tests;
