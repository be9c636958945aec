//! Full pipeline assembly: embeddings, shared encoder, neck, decoder.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Float, Tape, Var};
use crate::config::{SlotVariant, ValidatedConfig};
use crate::decoder::SharedMaskDecoder;
use crate::embedding::{concat_modalities, layout_for, PatchEmbed, SeqLayout, TextEmbed};
use crate::encoder::SharedEncoder;
use crate::error::Result;
use crate::fpn::Neck;
use crate::mask::ProbabilityMap;
use crate::params::{BufferSpec, BufferStore, Ctx, Mode, ParamBuilder, ParamSpec, ParamStore};

pub struct ModelOutput<'t, T: Float> {
    /// `[B, H_l, W_l]` foreground probabilities.
    pub probs: Var<'t, T>,
    pub layout: SeqLayout,
}

#[derive(Clone, Debug)]
pub struct SharedRis {
    pub config: ValidatedConfig,
    pub patch: PatchEmbed,
    pub text: TextEmbed,
    pub encoder: SharedEncoder,
    pub neck: Neck,
    pub decoder: SharedMaskDecoder,
    specs: Vec<ParamSpec>,
    buffer_specs: Vec<BufferSpec>,
}

/// Assembles the pipeline with the requested fusion in each slot.
pub fn build_variant_model(cfg: &ValidatedConfig, fpn: SlotVariant, decoder: SlotVariant, drop_prob: f64) -> Result<SharedRis> {
    let mut c = cfg.config().clone();
    c.fpn_fusion = fpn;
    c.decoder_fusion = decoder;
    Ok(SharedRis::new(c.validate()?, drop_prob))
}

impl SharedRis {
    /// `drop_prob` is the stochastic depth rate of the deepest encoder block.
    pub fn new(config: ValidatedConfig, drop_prob: f64) -> Self {
        let mut pb = ParamBuilder::new();
        let patch = PatchEmbed::new(&mut pb, &config);
        let text = TextEmbed::new(&mut pb, &config);
        let encoder = SharedEncoder::new(&mut pb, &config, drop_prob);
        let neck = Neck::new(&mut pb, &config);
        let decoder = SharedMaskDecoder::new(&mut pb, &config);
        let (specs, buffer_specs) = pb.finish();
        SharedRis {
            config,
            patch,
            text,
            encoder,
            neck,
            decoder,
            specs,
            buffer_specs,
        }
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn buffer_specs(&self) -> &[BufferSpec] {
        &self.buffer_specs
    }

    pub fn num_params(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn init_params<T: Float>(&self, rng: &mut ChaCha8Rng) -> ParamStore<T> {
        ParamStore::initialize(self.specs.clone(), rng)
    }

    pub fn init_buffers<T: Float>(&self) -> BufferStore<T> {
        BufferStore::new(self.buffer_specs.clone())
    }

    /// `images [B, h, w, 3]`, one id list per sample.
    pub fn forward<'t, T: Float>(&self, cx: &Ctx<'t, T>, images: &ArrayD<T>, texts: &[Vec<usize>]) -> Result<ModelOutput<'t, T>> {
        let v0 = self.patch.forward(cx, images)?;
        let (t0, lens) = self.text.forward(cx, texts)?;
        let layout = layout_for(&v0, &t0, lens, self.config.text_mask)?;
        let probs = {
            let h0 = concat_modalities(v0, t0, &layout);
            let enc = self.encoder.forward(cx, h0);
            let z = self.neck.forward(cx, &enc)?;
            self.decoder.forward(cx, z)?.probs
        };
        Ok(ModelOutput { probs, layout })
    }

    /// Eval-mode probability maps, one per sample.
    pub fn predict<T: Float>(
        &self,
        params: &ParamStore<T>,
        buffers: &BufferStore<T>,
        images: &ArrayD<T>,
        texts: &[Vec<usize>],
    ) -> Result<Vec<ProbabilityMap>> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, params, buffers, Mode::Eval);
        let out = self.forward(&cx, images, texts)?;
        Ok(probability_maps(&out.probs.value()))
    }
}

/// Splits `[B, H, W]` probabilities into per-sample maps.
pub fn probability_maps<T: Float>(probs: &ArrayD<T>) -> Vec<ProbabilityMap> {
    let s = probs.shape();
    probs
        .outer_iter()
        .map(|m| ProbabilityMap {
            height: s[1],
            width: s[2],
            values: m.iter().map(|v| v.f64() as f32).collect(),
        })
        .collect()
}
