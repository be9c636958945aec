//! Layer normalization, multi-head attention with exposed weights, and the
//! two-layer GELU perceptron shared by every transformer-style block.

use std::rc::Rc;

use ndarray::ArrayD;

use crate::autodiff::{Float, KeyMask, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamBuilder, ParamId};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Key validity per token; `false` marks text padding.
pub type KeyPaddingMask = KeyMask;

impl KeyMask {
    /// Builds a mask, rejecting samples with no valid key.
    pub fn new(batch: usize, len: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * len {
            return Err(Error::Shape(format!(
                "mask has {} flags for {batch}x{len}",
                valid.len()
            )));
        }
        let mask = KeyMask { batch, len, valid };
        if let Some(sample) = (0..batch).find(|&b| !mask.row(b).iter().any(|&v| v)) {
            return Err(Error::AllMasked { sample });
        }
        Ok(mask)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = pb.add(format!("{name}.weight"), &[in_dim, out_dim], Init::TruncNormal(INIT_STD));
        let bias = bias.then(|| pb.add(format!("{name}.bias"), &[out_dim], Init::Zeros));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t, T: Float>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let y = x.matmul(cx.p(self.weight));
        match self.bias {
            Some(b) => y.add_bias(cx.p(b)),
            None => y,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: pb.add(format!("{name}.gain"), &[dim], Init::Ones),
            bias: pb.add(format!("{name}.bias"), &[dim], Init::Zeros),
        }
    }

    pub fn forward<'t, T: Float>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.layer_norm(cx.p(self.gain), cx.p(self.bias), T::c(LN_EPS))
    }
}

/// Attention result with the per-head weights `[B, heads, Nq, Nk]`.
pub struct AttentionOutput<'t, T: Float> {
    pub values: Var<'t, T>,
    pub weights: Rc<ArrayD<T>>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "{name}: width {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            query: Linear::new(pb, &format!("{name}.query"), dim, dim, true),
            key: Linear::new(pb, &format!("{name}.key"), dim, dim, true),
            value: Linear::new(pb, &format!("{name}.value"), dim, dim, true),
            out: Linear::new(pb, &format!("{name}.out"), dim, dim, true),
            heads,
        }
    }

    /// Self-attention of `x [B, N, C]` over its own (unmasked) tokens.
    pub fn self_attention<'t, T: Float>(
        &self,
        cx: &Ctx<'t, T>,
        x: Var<'t, T>,
        mask: Option<&KeyPaddingMask>,
    ) -> AttentionOutput<'t, T> {
        self.attend(cx, x, x, mask)
    }

    /// `queries [B, Nq, C]` attending `context [B, Nk, C]`.
    pub fn attend<'t, T: Float>(
        &self,
        cx: &Ctx<'t, T>,
        queries: Var<'t, T>,
        context: Var<'t, T>,
        mask: Option<&KeyPaddingMask>,
    ) -> AttentionOutput<'t, T> {
        let q = self.query.forward(cx, queries);
        let k = self.key.forward(cx, context);
        let v = self.value.forward(cx, context);
        let (attended, weights) = Var::attention(q, k, v, self.heads, mask);
        AttentionOutput {
            values: self.out.forward(cx, attended),
            weights,
        }
    }

    pub fn num_params(&self) -> usize {
        self.query.num_params() + self.key.num_params() + self.value.num_params() + self.out.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(pb, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward<'t, T: Float>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.fc2.forward(cx, self.fc1.forward(cx, x).gelu())
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}
