//! Attention probes: the textual class token's attention over the visual
//! patch tokens, read from the encoder's last layer, the FPN stages, or the
//! decoder's shared layer.

use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tape};
use crate::config::ValidatedConfig;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ProbabilityMap};
use crate::model::{probability_maps, SharedRis};
use crate::params::{AttentionRecord, AttentionSite, BufferStore, Ctx, Mode, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Encoder,
    Fpn,
    Decoder,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Encoder, Source::Fpn, Source::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            Source::Encoder => "encoder",
            Source::Fpn => "fpn",
            Source::Decoder => "decoder",
        }
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Source::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown probe source `{s}`"))
    }
}

/// Nonnegative weights on the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub source: Source,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Share of the map's mass inside `gt`, divided by the share a uniform
    /// map would place there. Each cell is weighted by the fraction of its
    /// pixels the mask covers.
    pub fn mass_ratio(&self, gt: &BinaryMask) -> f64 {
        let cover = cell_coverage(gt, self.height, self.width);
        let area: f64 = cover.iter().sum::<f64>() / cover.len() as f64;
        let total = self.sum();
        if area == 0.0 || total == 0.0 {
            return 0.0;
        }
        let inside: f64 = self.values.iter().zip(&cover).map(|(v, c)| v * c).sum();
        inside / total / area
    }
}

/// Fraction of each grid cell's pixels that lie inside the mask.
pub fn cell_coverage(mask: &BinaryMask, gh: usize, gw: usize) -> Vec<f64> {
    let (ch, cw) = (mask.height / gh, mask.width / gw);
    let mut out = vec![0.0; gh * gw];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                out[(y / ch).min(gh - 1) * gw + (x / cw).min(gw - 1)] += 1.0;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= (ch * cw) as f64);
    out
}

/// Head-averaged `t_cls` row over the patch columns of one record.
fn cls_row<T: Float>(weights: &ArrayD<T>, cfg: &ValidatedConfig, sample: usize) -> Vec<f64> {
    let s = weights.shape();
    let heads = s[1];
    let q = cfg.visual_len;
    let mut row = vec![0.0; cfg.num_patches];
    for h in 0..heads {
        for (j, r) in row.iter_mut().enumerate() {
            *r += weights[[sample, h, q, j + 1]].f64();
        }
    }
    row.iter_mut().for_each(|v| *v /= heads as f64);
    row
}

/// Extracts the probe map for `sample` from recorded attention weights.
pub fn probe<T: Float>(records: &[AttentionRecord<T>], cfg: &ValidatedConfig, sample: usize, source: Source) -> Result<AttentionMap> {
    let selected: Vec<&AttentionRecord<T>> = match source {
        Source::Encoder => records
            .iter()
            .filter(|r| r.site == AttentionSite::Encoder(cfg.encoder_layers))
            .collect(),
        Source::Fpn => records.iter().filter(|r| matches!(r.site, AttentionSite::Fpn(_))).collect(),
        Source::Decoder => records.iter().filter(|r| r.site == AttentionSite::Decoder).collect(),
    };
    if selected.is_empty() {
        return Err(Error::NotRecorded(source.name().into()));
    }
    let mut values = vec![0.0; cfg.num_patches];
    for r in &selected {
        for (v, w) in values.iter_mut().zip(cls_row(&r.weights, cfg, sample)) {
            *v += w;
        }
    }
    values.iter_mut().for_each(|v| *v /= selected.len() as f64);
    Ok(AttentionMap {
        source,
        height: cfg.grid_h,
        width: cfg.grid_w,
        values,
    })
}

/// Eval-mode forward with recording on; returns the maps and the records.
pub fn forward_recorded<T: Float>(
    model: &SharedRis,
    params: &ParamStore<T>,
    buffers: &BufferStore<T>,
    images: &ArrayD<T>,
    texts: &[Vec<usize>],
) -> Result<(Vec<ProbabilityMap>, Vec<AttentionRecord<T>>)> {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, params, buffers, Mode::Eval).with_recording(true);
    let out = model.forward(&cx, images, texts)?;
    Ok((probability_maps(&out.probs.value()), cx.take_records()))
}

/// Bilinear resampling with half-pixel centres and clamped borders.
pub fn resize_bilinear(values: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let plan = |n: usize, out: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = src.floor() as usize;
                (i0, (i0 + 1).min(n - 1), src - i0 as f64)
            })
            .collect()
    };
    let (py, px) = (plan(h, oh), plan(w, ow));
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, ly) in &py {
        for &(x0, x1, lx) in &px {
            let top = values[y0 * w + x0] * (1.0 - lx) + values[y0 * w + x1] * lx;
            let bot = values[y1 * w + x0] * (1.0 - lx) + values[y1 * w + x1] * lx;
            out.push(top * (1.0 - ly) + bot * ly);
        }
    }
    out
}

/// Blue through cyan, green and yellow to red.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 255.0],
        [0.0, 255.0, 0.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let t = t.clamp(0.0, 1.0) * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f64;
    [0, 1, 2].map(|c| (STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f).round() as u8)
}

/// The heat overlay as RGB bytes: upsampled, max-normalized, colour-mapped
/// and blended with the image at 50% alpha.
pub fn overlay(map: &AttentionMap, pixels: &[u8], height: usize, width: usize) -> Vec<u8> {
    let up = resize_bilinear(&map.values, map.height, map.width, height, width);
    let max = up.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::with_capacity(height * width * 3);
    for (i, v) in up.iter().enumerate() {
        let heat = colormap(if max > 0.0 { v / max } else { 0.0 });
        for c in 0..3 {
            let blend = 0.5 * f64::from(pixels[3 * i + c]) + 0.5 * f64::from(heat[c]);
            out.push(blend.round() as u8);
        }
    }
    out
}

pub fn render(map: &AttentionMap, pixels: &[u8], height: usize, width: usize, out_path: &Path) -> Result<()> {
    let bytes = overlay(map, pixels, height, width);
    let img = RgbImage::from_raw(width as u32, height as u32, bytes).expect("overlay size");
    img.save_with_format(out_path, image::ImageFormat::Png)?;
    Ok(())
}
