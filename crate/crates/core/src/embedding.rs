//! Visual patch embedding, textual token embedding, the word-level
//! vocabulary, and the shared visual+textual sequence that flows through the
//! rest of the model.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::attention::INIT_STD;
use crate::autodiff::{Float, KeyMask, Var};
use crate::config::ValidatedConfig;
use crate::data::GRAMMAR_WORDS;
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamBuilder, ParamId};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Closed word-level vocabulary; ids 0 and 1 are reserved for padding and
/// unknown words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in [PAD.to_string(), UNK.to_string()].into_iter().chain(words.into_iter().map(Into::into)) {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    /// Every word the expression grammar can emit.
    pub fn synthetic() -> Self {
        Self::from_words(GRAMMAR_WORDS.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Lowercases, splits on whitespace, and maps unknown words to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_file_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_text(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.lines().collect();
        if words.len() < 2 || words[0] != PAD || words[1] != UNK {
            return Err(Error::Format("vocabulary must start with <pad> and <unk>".into()));
        }
        let v = Self::from_words(words[2..].iter().copied());
        if v.len() != words.len() {
            return Err(Error::Format("vocabulary has duplicate entries".into()));
        }
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_text()).map_err(|e| Error::io(path, e))
    }

    /// FNV-1a over the file form, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write(self.to_file_text().as_bytes());
        h.finish()
    }
}

/// Splits `[B, h, w, 3]` images into `[B, n, p*p*3]` row-major patches, each
/// flattened in `(row, column, channel)` order.
pub fn patchify<T: Float>(images: &ArrayD<T>, patch: usize) -> Result<ArrayD<T>> {
    let s = images.shape();
    if s.len() != 4 || s[3] != 3 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(Error::Shape(format!("cannot patchify {s:?} with patch size {patch}")));
    }
    let (b, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * 3;
    let src = images.as_standard_layout();
    let src = src.as_slice().unwrap();
    let mut out = vec![T::zero(); b * gh * gw * dim];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let base = ((bi * gh + gy) * gw + gx) * dim;
                for py in 0..patch {
                    let row = ((bi * h + gy * patch + py) * w + gx * patch) * 3;
                    out[base + py * patch * 3..base + (py + 1) * patch * 3]
                        .copy_from_slice(&src[row..row + patch * 3]);
                }
            }
        }
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[b, gh * gw, dim]), out).unwrap())
}

/// `v_0 = [v_cls, x_1 P, ..., x_n P] + v_pos`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: ParamId,
    pub proj_bias: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new(pb: &mut ParamBuilder, cfg: &ValidatedConfig) -> Self {
        let (p, d) = (cfg.patch_size, cfg.embed_dim);
        PatchEmbed {
            proj: pb.add("embed.patch.weight", &[p * p * 3, d], Init::TruncNormal(INIT_STD)),
            proj_bias: pb.add("embed.patch.bias", &[d], Init::Zeros),
            cls: pb.add("embed.v_cls", &[1, d], Init::TruncNormal(INIT_STD)),
            pos: pb.add("embed.v_pos", &[cfg.visual_len, d], Init::TruncNormal(INIT_STD)),
            patch: p,
            height: cfg.image_height,
            width: cfg.image_width,
            dim: d,
        }
    }

    /// `images [B, h, w, 3]` to `[B, n + 1, d]`.
    pub fn forward<'t, T: Float>(&self, cx: &Ctx<'t, T>, images: &ArrayD<T>) -> Result<Var<'t, T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.height || s[2] != self.width || s[3] != 3 {
            return Err(Error::Shape(format!(
                "expected images [B, {}, {}, 3], got {s:?}",
                self.height, self.width
            )));
        }
        let b = s[0];
        let patches = cx.tape.constant(patchify(images, self.patch)?);
        let x = patches.matmul(cx.p(self.proj)).add_bias(cx.p(self.proj_bias));
        let cls = cx.p(self.cls).broadcast_batch(b);
        Ok(Var::concat_tokens(&[cls, x]).add(cx.p(self.pos).broadcast_batch(b)))
    }
}

/// `t_0 = [t_cls, t_1, ..., t_m, t_eot] + t_pos`; the class and end tokens
/// live in two extra rows of the word table.
#[derive(Clone, Debug)]
pub struct TextEmbed {
    pub table: ParamId,
    pub pos: ParamId,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
}

impl TextEmbed {
    pub fn new(pb: &mut ParamBuilder, cfg: &ValidatedConfig) -> Self {
        let d = cfg.embed_dim;
        TextEmbed {
            table: pb.add("embed.text.table", &[cfg.vocab_size + 2, d], Init::TruncNormal(INIT_STD)),
            pos: pb.add("embed.t_pos", &[cfg.max_text_len + 2, d], Init::TruncNormal(INIT_STD)),
            vocab_size: cfg.vocab_size,
            max_len: cfg.max_text_len,
            dim: d,
        }
    }

    pub fn cls_id(&self) -> usize {
        self.vocab_size
    }

    pub fn eot_id(&self) -> usize {
        self.vocab_size + 1
    }

    /// Frames and pads a batch to `[B, m + 2]` ids, with `m` the longest
    /// expression. Expressions beyond `max_len` tokens are truncated.
    pub fn frame(&self, texts: &[Vec<usize>]) -> Result<(Vec<usize>, usize, Vec<usize>)> {
        let lens: Vec<usize> = texts.iter().map(|t| t.len().min(self.max_len)).collect();
        let m = lens.iter().copied().max().unwrap_or(0);
        let mut ids = Vec::with_capacity(texts.len() * (m + 2));
        for (t, &len) in texts.iter().zip(&lens) {
            if let Some(&id) = t[..len].iter().find(|&&id| id >= self.vocab_size) {
                return Err(Error::Vocab {
                    id,
                    vocab_size: self.vocab_size,
                });
            }
            ids.push(self.cls_id());
            ids.extend_from_slice(&t[..len]);
            ids.push(self.eot_id());
            ids.resize(ids.len() + m - len, PAD_ID);
        }
        Ok((ids, m, lens))
    }

    /// Returns `[B, m + 2, d]` and the per-sample unpadded lengths.
    pub fn forward<'t, T: Float>(&self, cx: &Ctx<'t, T>, texts: &[Vec<usize>]) -> Result<(Var<'t, T>, Vec<usize>)> {
        let (ids, m, lens) = self.frame(texts)?;
        let b = texts.len();
        let tokens = cx.p(self.table).embedding(&ids, &[b, m + 2]);
        let pos = cx
            .p(self.pos)
            .reshape(&[1, self.max_len + 2, self.dim])
            .slice_tokens(0, m + 2)
            .reshape(&[m + 2, self.dim])
            .broadcast_batch(b);
        Ok((tokens.add(pos), lens))
    }
}

/// Split metadata shared by every sequence derived from one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub batch: usize,
    /// `n + 1`.
    pub visual_len: usize,
    /// `m + 2` for the longest expression in the batch.
    pub text_len: usize,
    pub text_lens: Vec<usize>,
    /// Padding mask, or `None` when every key is attended.
    pub key_mask: Option<KeyMask>,
}

impl SeqLayout {
    pub fn len(&self) -> usize {
        self.visual_len + self.text_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position of the textual class token.
    pub fn text_cls(&self) -> usize {
        self.visual_len
    }

    /// Validity of every position, visual first, whether or not masking is on.
    pub fn validity(&self) -> Vec<bool> {
        let mut valid = Vec::with_capacity(self.batch * self.len());
        for &m in &self.text_lens {
            valid.extend(std::iter::repeat_n(true, self.visual_len + m + 2));
            valid.extend(std::iter::repeat_n(false, self.text_len - m - 2));
        }
        valid
    }
}

/// `[B, n + m + 3, C]` tokens with their modality split.
#[derive(Clone, Copy, Debug)]
pub struct SharedSequence<'t, 'l, T: Float> {
    pub tokens: Var<'t, T>,
    pub layout: &'l SeqLayout,
}

impl<'t, 'l, T: Float> SharedSequence<'t, 'l, T> {
    pub fn with_tokens(&self, tokens: Var<'t, T>) -> Self {
        SharedSequence {
            tokens,
            layout: self.layout,
        }
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn mask(&self) -> Option<&'l KeyMask> {
        self.layout.key_mask.as_ref()
    }

    /// `(visual [B, n + 1, C], textual [B, m + 2, C])`.
    pub fn split(&self) -> (Var<'t, T>, Var<'t, T>) {
        (
            self.tokens.slice_tokens(0, self.layout.visual_len),
            self.tokens.slice_tokens(self.layout.visual_len, self.layout.text_len),
        )
    }

    pub fn join(&self, visual: Var<'t, T>, textual: Var<'t, T>) -> Self {
        self.with_tokens(Var::concat_tokens(&[visual, textual]))
    }
}

/// Builds the layout for `h_0 = [v_0; t_0]`.
pub fn layout_for(visual: &Var<'_, impl Float>, textual: &Var<'_, impl Float>, text_lens: Vec<usize>, mask: bool) -> Result<SeqLayout> {
    let (vs, ts) = (visual.shape(), textual.shape());
    if vs[2] != ts[2] {
        return Err(Error::Width {
            visual: vs[2],
            textual: ts[2],
        });
    }
    if vs[0] != ts[0] || text_lens.len() != vs[0] {
        return Err(Error::Shape(format!("batch sizes differ: {} vs {}", vs[0], ts[0])));
    }
    let mut layout = SeqLayout {
        batch: vs[0],
        visual_len: vs[1],
        text_len: ts[1],
        text_lens,
        key_mask: None,
    };
    if mask && layout.text_lens.iter().any(|&m| m + 2 < layout.text_len) {
        layout.key_mask = Some(KeyMask::new(layout.batch, layout.len(), layout.validity())?);
    }
    Ok(layout)
}

/// Concatenates the two modality blocks along the token axis.
pub fn concat_modalities<'t, 'l, T: Float>(
    visual: Var<'t, T>,
    textual: Var<'t, T>,
    layout: &'l SeqLayout,
) -> SharedSequence<'t, 'l, T> {
    SharedSequence {
        tokens: Var::concat_tokens(&[visual, textual]),
        layout,
    }
}
