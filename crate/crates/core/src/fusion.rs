//! Pluggable fusion blocks for the FPN and decoder slots: shared
//! self-attention, vision-to-text cross-attention, and the bi-directional
//! pair of cross-attentions.

use crate::attention::{LayerNorm, MultiHeadAttention};
use crate::autodiff::{Float, KeyMask};
use crate::config::SlotVariant;
use crate::embedding::{SeqLayout, SharedSequence};
use crate::params::{AttentionSite, Ctx, ParamBuilder};

/// Key mask restricted to the textual block, if any text key is padding.
pub fn text_key_mask(layout: &SeqLayout) -> Option<KeyMask> {
    let full = layout.key_mask.as_ref()?;
    let valid = (0..layout.batch)
        .flat_map(|b| full.row(b)[layout.visual_len..].iter().copied())
        .collect();
    Some(KeyMask {
        batch: layout.batch,
        len: layout.text_len,
        valid,
    })
}

#[derive(Clone, Debug)]
pub enum FusionKind {
    /// `x + MSA(LN(x))` over the whole sequence.
    Shared(MultiHeadAttention),
    /// Vision queries attend text; text passes through.
    Cross(MultiHeadAttention),
    /// Vision-to-text and text-to-vision cross-attention from the same input.
    Bidir {
        v2t: MultiHeadAttention,
        t2v: MultiHeadAttention,
    },
}

/// A residual fusion step with its pre-norm; preserves length, width and
/// the modality split.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub ln: LayerNorm,
    pub kind: FusionKind,
}

impl Fusion {
    /// `None` for [`SlotVariant::None`].
    pub fn new(pb: &mut ParamBuilder, name: &str, variant: SlotVariant, dim: usize, heads: usize) -> Option<Self> {
        let kind = match variant {
            SlotVariant::None => return None,
            SlotVariant::Shared => FusionKind::Shared(MultiHeadAttention::new(pb, &format!("{name}.attn"), dim, heads)),
            SlotVariant::Cross => FusionKind::Cross(MultiHeadAttention::new(pb, &format!("{name}.v2t"), dim, heads)),
            SlotVariant::Bidir => FusionKind::Bidir {
                v2t: MultiHeadAttention::new(pb, &format!("{name}.v2t"), dim, heads),
                t2v: MultiHeadAttention::new(pb, &format!("{name}.t2v"), dim, heads),
            },
        };
        Some(Fusion {
            ln: LayerNorm::new(pb, &format!("{name}.ln"), dim),
            kind,
        })
    }

    pub fn variant(&self) -> SlotVariant {
        match self.kind {
            FusionKind::Shared(_) => SlotVariant::Shared,
            FusionKind::Cross(_) => SlotVariant::Cross,
            FusionKind::Bidir { .. } => SlotVariant::Bidir,
        }
    }

    pub fn forward<'t, 'l, T: Float>(
        &self,
        cx: &Ctx<'t, T>,
        x: SharedSequence<'t, 'l, T>,
        site: AttentionSite,
    ) -> SharedSequence<'t, 'l, T> {
        let normed = x.with_tokens(self.ln.forward(cx, x.tokens));
        match &self.kind {
            FusionKind::Shared(attn) => {
                let out = attn.self_attention(cx, normed.tokens, x.mask());
                cx.record(site, out.weights);
                x.with_tokens(x.tokens.add(out.values))
            }
            FusionKind::Cross(attn) => {
                let (v, t) = x.split();
                let (nv, nt) = normed.split();
                let mask = text_key_mask(x.layout);
                let out = attn.attend(cx, nv, nt, mask.as_ref());
                x.join(v.add(out.values), t)
            }
            FusionKind::Bidir { v2t, t2v } => {
                let (v, t) = x.split();
                let (nv, nt) = normed.split();
                let mask = text_key_mask(x.layout);
                let to_text = v2t.attend(cx, nv, nt, mask.as_ref());
                let to_vision = t2v.attend(cx, nt, nv, None);
                x.join(v.add(to_text.values), t.add(to_vision.values))
            }
        }
    }

    pub fn num_params(&self, dim: usize) -> usize {
        2 * dim
            + match &self.kind {
                FusionKind::Shared(a) | FusionKind::Cross(a) => a.num_params(),
                FusionKind::Bidir { v2t, t2v } => v2t.num_params() + t2v.num_params(),
            }
    }
}
