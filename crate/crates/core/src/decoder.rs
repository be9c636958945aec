//! The shared mask decoder: one fusion layer with a single shared MLP,
//! reshaping of visual tokens to a grid, upsampling convolutions, and the
//! text-conditioned per-pixel similarity head.

use crate::attention::{LayerNorm, Mlp};
use crate::autodiff::{Float, NormMode, Var};
use crate::config::ValidatedConfig;
use crate::embedding::SharedSequence;
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::params::{AttentionSite, BufferId, Ctx, Init, ParamBuilder, ParamId};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `F_i = ReLU(BN(Conv(Upsample(F_{i-1}))))`.
#[derive(Clone, Debug)]
pub struct UpsampleBlock {
    pub conv: ParamId,
    pub conv_bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl UpsampleBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        UpsampleBlock {
            conv: pb.add(format!("{name}.conv.weight"), &[9 * dim, dim], Init::Kaiming { fan_in: 9 * dim }),
            conv_bias: pb.add(format!("{name}.conv.bias"), &[dim], Init::Zeros),
            gamma: pb.add(format!("{name}.bn.gamma"), &[dim], Init::Ones),
            beta: pb.add(format!("{name}.bn.beta"), &[dim], Init::Zeros),
            running_mean: pb.buffer(format!("{name}.bn.running_mean"), dim, 0.0),
            running_var: pb.buffer(format!("{name}.bn.running_var"), dim, 1.0),
        }
    }

    /// `[B, H, W, C]` to `[B, 2H, 2W, C]`.
    pub fn forward<'t, T: Float>(&self, cx: &Ctx<'t, T>, f: Var<'t, T>) -> Var<'t, T> {
        let x = f.upsample2x().conv3x3(cx.p(self.conv)).add_bias(cx.p(self.conv_bias));
        let (gamma, beta, eps) = (cx.p(self.gamma), cx.p(self.beta), T::c(BN_EPS));
        let y = if cx.is_train() {
            let (y, stats) = x.batch_norm(gamma, beta, NormMode::Batch, None, eps);
            let (mean, var) = stats.expect("batch statistics");
            let m = T::c(BN_MOMENTUM);
            let blend = |old: &[T], new: Vec<T>| -> Vec<T> {
                old.iter().zip(new).map(|(&o, n)| (T::one() - m) * o + m * n).collect()
            };
            cx.push_buffer_update(self.running_mean, blend(cx.buffer(self.running_mean), mean));
            cx.push_buffer_update(self.running_var, blend(cx.buffer(self.running_var), var));
            y
        } else {
            let running = (cx.buffer(self.running_mean), cx.buffer(self.running_var));
            x.batch_norm(gamma, beta, NormMode::Running, Some(running), eps).0
        };
        y.relu()
    }
}

/// Drops the visual class token and lays the patch tokens out row-major on
/// the patch grid: `[B, n + 1, C]` to `[B, H, W, C]`.
pub fn reshape_to_map<'t, T: Float>(visual: Var<'t, T>, grid_h: usize, grid_w: usize) -> Result<Var<'t, T>> {
    let s = visual.shape();
    if s[1] != grid_h * grid_w + 1 {
        return Err(Error::Grid {
            tokens: s[1].saturating_sub(1),
            grid_h,
            grid_w,
        });
    }
    Ok(visual.slice_tokens(1, s[1] - 1).reshape(&[s[0], grid_h, grid_w, s[2]]))
}

pub struct DecoderOutput<'t, 'l, T: Float> {
    /// Fused sequence `u`.
    pub fused: SharedSequence<'t, 'l, T>,
    /// `F_0`, `[B, h/p, w/p, d_w]`.
    pub grid: Var<'t, T>,
    /// Probabilities `[B, H_l, W_l]`.
    pub probs: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct SharedMaskDecoder {
    /// `u' = z + Fusion(LN(z))`; absent when the slot is disabled.
    pub fusion: Option<Fusion>,
    /// `u = u' + MLP(LN(u'))` over both modalities.
    pub mlp: Option<(LayerNorm, Mlp)>,
    pub upsample: Vec<UpsampleBlock>,
    /// Refines the textual class token before the similarity.
    pub head: Mlp,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl SharedMaskDecoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ValidatedConfig) -> Self {
        let dw = cfg.fpn_dim;
        let fusion = Fusion::new(pb, "decoder.fuse", cfg.decoder_fusion, dw, cfg.decoder_heads);
        let mlp = fusion.as_ref().map(|_| {
            (
                LayerNorm::new(pb, "decoder.ln_mlp", dw),
                Mlp::new(pb, "decoder.mlp", dw, dw * cfg.mlp_ratio),
            )
        });
        let upsample = (0..cfg.upsample_steps)
            .map(|i| UpsampleBlock::new(pb, &format!("decoder.up{}", i + 1), dw))
            .collect();
        SharedMaskDecoder {
            fusion,
            mlp,
            upsample,
            head: Mlp::new(pb, "decoder.head", dw, dw),
            grid_h: cfg.grid_h,
            grid_w: cfg.grid_w,
        }
    }

    pub fn fuse<'t, 'l, T: Float>(&self, cx: &Ctx<'t, T>, z: SharedSequence<'t, 'l, T>) -> SharedSequence<'t, 'l, T> {
        let Some(fusion) = &self.fusion else {
            return z;
        };
        let u1 = fusion.forward(cx, z, AttentionSite::Decoder);
        let (ln, mlp) = self.mlp.as_ref().expect("fusion comes with its MLP");
        u1.with_tokens(u1.tokens.add(mlp.forward(cx, ln.forward(cx, u1.tokens))))
    }

    /// `M(i, j) = sigmoid(F_l(i, j) . MLP(t_cls_u))`.
    pub fn predict<'t, T: Float>(&self, cx: &Ctx<'t, T>, map: Var<'t, T>, t_cls: Var<'t, T>) -> Var<'t, T> {
        map.dot_map(self.head.forward(cx, t_cls)).sigmoid()
    }

    pub fn forward<'t, 'l, T: Float>(&self, cx: &Ctx<'t, T>, z: SharedSequence<'t, 'l, T>) -> Result<DecoderOutput<'t, 'l, T>> {
        let fused = self.fuse(cx, z);
        let (visual, textual) = fused.split();
        let grid = reshape_to_map(visual, self.grid_h, self.grid_w)?;
        let map = self.upsample.iter().fold(grid, |f, block| block.forward(cx, f));
        let width = fused.width();
        let t_cls = textual.slice_tokens(0, 1).reshape(&[fused.layout.batch, width]);
        Ok(DecoderOutput {
            fused,
            grid,
            probs: self.predict(cx, map, t_cls),
        })
    }

    pub fn num_params(&self, dw: usize) -> usize {
        let fusion = self.fusion.as_ref().map_or(0, |f| f.num_params(dw));
        let mlp = self.mlp.as_ref().map_or(0, |(_, m)| 2 * dw + m.num_params());
        let up = self.upsample.len() * (9 * dw * dw + 3 * dw);
        fusion + mlp + up + self.head.num_params()
    }

    /// Parameters of the fusion layer and its MLP alone.
    pub fn shared_layer_params(&self, dw: usize) -> usize {
        self.fusion.as_ref().map_or(0, |f| f.num_params(dw)) + self.mlp.as_ref().map_or(0, |(_, m)| 2 * dw + m.num_params())
    }
}
