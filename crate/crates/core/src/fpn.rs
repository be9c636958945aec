//! Multi-level aggregation of tapped encoder features: per-stage projection
//! and fusion residual, channel concatenation, and a final linear fusion.

use crate::attention::Linear;
use crate::autodiff::{Float, Var};
use crate::config::{SlotVariant, ValidatedConfig};
use crate::embedding::SharedSequence;
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::params::{AttentionSite, Ctx, ParamBuilder};

/// `z_j = Fusion(LN(h_j W_j)) + h_j W_j`.
#[derive(Clone, Debug)]
pub struct FpnStage {
    pub proj: Linear,
    pub fusion: Fusion,
}

impl FpnStage {
    pub fn forward<'t, 'l, T: Float>(
        &self,
        cx: &Ctx<'t, T>,
        h: SharedSequence<'t, 'l, T>,
        site: AttentionSite,
    ) -> SharedSequence<'t, 'l, T> {
        let x = h.with_tokens(self.proj.forward(cx, h.tokens));
        self.fusion.forward(cx, x, site)
    }
}

#[derive(Clone, Debug)]
pub struct SharedFpn {
    pub stages: Vec<FpnStage>,
    pub fuse: Linear,
}

impl SharedFpn {
    pub fn new(pb: &mut ParamBuilder, cfg: &ValidatedConfig, variant: SlotVariant) -> Self {
        assert_ne!(variant, SlotVariant::None, "a disabled FPN is a plain projection");
        let (d, dw) = (cfg.embed_dim, cfg.fpn_dim);
        let stages = cfg
            .tap_stages
            .iter()
            .map(|&j| FpnStage {
                proj: Linear::new(pb, &format!("fpn.stage{j}.proj"), d, dw, true),
                fusion: Fusion::new(pb, &format!("fpn.stage{j}"), variant, dw, cfg.fpn_heads).unwrap(),
            })
            .collect::<Vec<_>>();
        let fuse = Linear::new(pb, "fpn.fuse", stages.len() * dw, dw, cfg.fpn_bias);
        SharedFpn { stages, fuse }
    }

    /// `z = [z_1; ...; z_K] W_f`, concatenating along channels in tap order.
    pub fn aggregate<'t, 'l, T: Float>(
        &self,
        cx: &Ctx<'t, T>,
        stages: &[SharedSequence<'t, 'l, T>],
    ) -> Result<SharedSequence<'t, 'l, T>> {
        if stages.len() != self.stages.len() {
            return Err(Error::StageCount {
                expected: self.stages.len(),
                got: stages.len(),
            });
        }
        let channels: Vec<_> = stages.iter().map(|s| s.tokens).collect();
        let joined = if channels.len() == 1 {
            channels[0]
        } else {
            Var::concat_channels(&channels)
        };
        Ok(stages[0].with_tokens(self.fuse.forward(cx, joined)))
    }

    pub fn forward<'t, 'l, T: Float>(
        &self,
        cx: &Ctx<'t, T>,
        enc: &EncoderOutput<'t, 'l, T>,
    ) -> Result<SharedSequence<'t, 'l, T>> {
        if enc.taps.len() != self.stages.len() {
            return Err(Error::StageCount {
                expected: self.stages.len(),
                got: enc.taps.len(),
            });
        }
        let zs: Vec<_> = self
            .stages
            .iter()
            .zip(&enc.taps)
            .enumerate()
            .map(|(k, (stage, (_, h)))| stage.forward(cx, *h, AttentionSite::Fpn(k)))
            .collect();
        self.aggregate(cx, &zs)
    }

    pub fn num_params(&self, dw: usize) -> usize {
        self.stages
            .iter()
            .map(|s| s.proj.num_params() + s.fusion.num_params(dw))
            .sum::<usize>()
            + self.fuse.num_params()
    }
}

/// What sits between the encoder and the decoder.
#[derive(Clone, Debug)]
pub enum Neck {
    Fpn(SharedFpn),
    /// Without an FPN the last encoder output is projected to `d_w`.
    Projection(Linear),
}

impl Neck {
    pub fn new(pb: &mut ParamBuilder, cfg: &ValidatedConfig) -> Self {
        match cfg.fpn_fusion {
            SlotVariant::None => Neck::Projection(Linear::new(pb, "neck.proj", cfg.embed_dim, cfg.fpn_dim, true)),
            v => Neck::Fpn(SharedFpn::new(pb, cfg, v)),
        }
    }

    pub fn forward<'t, 'l, T: Float>(
        &self,
        cx: &Ctx<'t, T>,
        enc: &EncoderOutput<'t, 'l, T>,
    ) -> Result<SharedSequence<'t, 'l, T>> {
        match self {
            Neck::Fpn(fpn) => fpn.forward(cx, enc),
            Neck::Projection(proj) => Ok(enc.last.with_tokens(proj.forward(cx, enc.last.tokens))),
        }
    }

    pub fn num_params(&self, dw: usize) -> usize {
        match self {
            Neck::Fpn(f) => f.num_params(dw),
            Neck::Projection(p) => p.num_params(),
        }
    }
}
