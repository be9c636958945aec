//! The shared encoder: multiway blocks with one self-attention over the
//! concatenated sequence and separate vision and language MLPs.

use crate::attention::{LayerNorm, Mlp, MultiHeadAttention};
use crate::autodiff::{Float, Var};
use crate::config::ValidatedConfig;
use crate::embedding::SharedSequence;
use crate::params::{AttentionSite, Ctx, ParamBuilder};

/// Residual branch with per-sample stochastic depth in training mode.
pub(crate) fn drop_path<'t, T: Float>(cx: &Ctx<'t, T>, branch: Var<'t, T>, rate: f64) -> Var<'t, T> {
    if !cx.is_train() || rate <= 0.0 {
        return branch;
    }
    let factors = cx.drop_path_factors(branch.shape()[0], rate);
    branch.scale_samples(&factors)
}

#[derive(Clone, Debug)]
pub struct MultiwayBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_v: LayerNorm,
    pub mlp_v: Mlp,
    pub ln_t: LayerNorm,
    pub mlp_t: Mlp,
    /// Probability of dropping each residual branch during training.
    pub drop_rate: f64,
}

impl MultiwayBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, mlp_ratio: usize, drop_rate: f64) -> Self {
        MultiwayBlock {
            ln_attn: LayerNorm::new(pb, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(pb, &format!("{name}.attn"), dim, heads),
            ln_v: LayerNorm::new(pb, &format!("{name}.ln_v"), dim),
            mlp_v: Mlp::new(pb, &format!("{name}.mlp_v"), dim, dim * mlp_ratio),
            ln_t: LayerNorm::new(pb, &format!("{name}.ln_t"), dim),
            mlp_t: Mlp::new(pb, &format!("{name}.mlp_t"), dim, dim * mlp_ratio),
            drop_rate,
        }
    }

    pub fn forward<'t, 'l, T: Float>(
        &self,
        cx: &Ctx<'t, T>,
        h: SharedSequence<'t, 'l, T>,
        site: AttentionSite,
    ) -> SharedSequence<'t, 'l, T> {
        let out = self.attn.self_attention(cx, self.ln_attn.forward(cx, h.tokens), h.mask());
        cx.record(site, out.weights);
        let h1 = h.with_tokens(h.tokens.add(drop_path(cx, out.values, self.drop_rate)));
        let (v, t) = h1.split();
        let branch = Var::concat_tokens(&[
            self.mlp_v.forward(cx, self.ln_v.forward(cx, v)),
            self.mlp_t.forward(cx, self.ln_t.forward(cx, t)),
        ]);
        h1.with_tokens(h1.tokens.add(drop_path(cx, branch, self.drop_rate)))
    }

    pub fn num_params(&self, dim: usize) -> usize {
        3 * 2 * dim + self.attn.num_params() + self.mlp_v.num_params() + self.mlp_t.num_params()
    }
}

pub struct EncoderOutput<'t, 'l, T: Float> {
    pub last: SharedSequence<'t, 'l, T>,
    /// `(stage, h_stage)` in ascending stage order.
    pub taps: Vec<(usize, SharedSequence<'t, 'l, T>)>,
}

impl<'t, 'l, T: Float> EncoderOutput<'t, 'l, T> {
    pub fn tap(&self, stage: usize) -> Option<SharedSequence<'t, 'l, T>> {
        self.taps.iter().find(|(s, _)| *s == stage).map(|(_, h)| *h)
    }
}

#[derive(Clone, Debug)]
pub struct SharedEncoder {
    pub blocks: Vec<MultiwayBlock>,
    pub tap_stages: Vec<usize>,
}

/// Linearly increasing drop rates from 0 at the first block to `max`.
pub fn drop_schedule(layers: usize, max: f64) -> Vec<f64> {
    if layers <= 1 {
        return vec![0.0; layers];
    }
    (0..layers).map(|i| max * i as f64 / (layers - 1) as f64).collect()
}

impl SharedEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ValidatedConfig, drop_prob: f64) -> Self {
        let blocks = drop_schedule(cfg.encoder_layers, drop_prob)
            .into_iter()
            .enumerate()
            .map(|(i, rate)| {
                MultiwayBlock::new(
                    pb,
                    &format!("encoder.{}", i + 1),
                    cfg.embed_dim,
                    cfg.encoder_heads,
                    cfg.mlp_ratio,
                    rate,
                )
            })
            .collect();
        SharedEncoder {
            blocks,
            tap_stages: cfg.tap_stages.clone(),
        }
    }

    pub fn forward<'t, 'l, T: Float>(&self, cx: &Ctx<'t, T>, h0: SharedSequence<'t, 'l, T>) -> EncoderOutput<'t, 'l, T> {
        let mut h = h0;
        let mut taps = Vec::with_capacity(self.tap_stages.len());
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(cx, h, AttentionSite::Encoder(i + 1));
            if self.tap_stages.contains(&(i + 1)) {
                taps.push((i + 1, h));
            }
        }
        EncoderOutput { last: h, taps }
    }
}
