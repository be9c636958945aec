//! Synthetic referring-segmentation corpus: scenes of coloured shapes with
//! uniquely referring expressions and exact masks.

pub mod corpus;
pub mod expression;
pub mod scene;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

pub use expression::{generate_expression, mirror_expression, Expression, Family, GRAMMAR_WORDS};
pub use scene::{generate_scene, rasterize, render, Color, SceneObject, SceneSpec, Shape};

use crate::autodiff::Float;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::rng::stream;

/// Scenes tried per sample before giving up on a seed.
pub const MAX_SCENE_RETRIES: u64 = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub height: usize,
    pub width: usize,
    /// Row-major RGB bytes.
    pub pixels: Vec<u8>,
    pub expression: String,
    pub mask: BinaryMask,
    pub target: usize,
    /// `100 * |mask| / (height * width)`.
    pub size_ratio: f64,
    pub family: Family,
    pub scene_seed: u64,
}

impl SegSample {
    pub fn flip_horizontal(&self) -> SegSample {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width * 3) {
            for px in row.chunks(3).rev() {
                pixels.extend_from_slice(px);
            }
        }
        SegSample {
            pixels,
            expression: mirror_expression(&self.expression),
            mask: self.mask.flip_horizontal(),
            ..self.clone()
        }
    }
}

/// One sample per scene seed; scenes without a unique reference for the
/// drawn target are redrawn from the next sub-stream.
pub fn generate_sample(scene_seed: u64, height: usize, width: usize) -> Result<SegSample> {
    generate_sample_scene(scene_seed, height, width).map(|(s, _)| s)
}

/// [`generate_sample`] together with the scene it was drawn from.
pub fn generate_sample_scene(scene_seed: u64, height: usize, width: usize) -> Result<(SegSample, SceneSpec)> {
    let mut last = None;
    for attempt in 0..MAX_SCENE_RETRIES {
        let mut rng = stream(scene_seed, "data", attempt);
        let scene = generate_scene(&mut rng, height, width)?;
        let target = rand::Rng::random_range(&mut rng, 0..scene.objects.len());
        match generate_expression(&scene, target, &mut rng) {
            Ok(expr) => {
                let mask = rasterize(&scene, target);
                let sample = SegSample {
                    height,
                    width,
                    pixels: render(&scene, Some(target)),
                    expression: expr.text(),
                    size_ratio: 100.0 * mask.count() as f64 / (height * width) as f64,
                    mask,
                    target,
                    family: expr.family(),
                    scene_seed,
                };
                return Ok((sample, scene));
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or(Error::NoUniqueReference { target: 0 }))
}

/// Offset separating validation scene seeds from training ones.
pub const VAL_SEED_OFFSET: u64 = 1 << 31;

pub fn scene_seed(root: u64, split: Split, index: usize) -> u64 {
    let base = root << 32;
    match split {
        Split::Train => base + index as u64,
        Split::Val => base + VAL_SEED_OFFSET + index as u64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

pub fn generate_split(root: u64, split: Split, n: usize, height: usize, width: usize) -> Result<Vec<SegSample>> {
    generate_split_parallel(root, split, n, height, width, 1)
}

/// Same samples as [`generate_split`], produced by up to `workers` threads.
pub fn generate_split_parallel(root: u64, split: Split, n: usize, height: usize, width: usize, workers: usize) -> Result<Vec<SegSample>> {
    let gen = |i: usize| generate_sample(scene_seed(root, split, i), height, width);
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(gen).collect();
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| scope.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(gen).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("generator thread panicked")?);
        }
        Ok(out)
    })
}

/// Training and validation samples from disjoint scene seed ranges.
pub fn make_split(seed: u64, n_train: usize, n_val: usize, height: usize, width: usize) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    make_split_parallel(seed, n_train, n_val, height, width, 1)
}

pub fn make_split_parallel(
    seed: u64,
    n_train: usize,
    n_val: usize,
    height: usize,
    width: usize,
    workers: usize,
) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    Ok((
        generate_split_parallel(seed, Split::Train, n_train, height, width, workers)?,
        generate_split_parallel(seed, Split::Val, n_val, height, width, workers)?,
    ))
}

/// Per-channel pixel statistics over `[0, 1]`-scaled images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn fit(samples: &[SegSample]) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for s in samples {
            for px in s.pixels.chunks(3) {
                for c in 0..3 {
                    let v = f64::from(px[c]) / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean = sum.map(|s| s / n);
        let std = [0, 1, 2].map(|c| (sq[c] / n - mean[c] * mean[c]).max(1e-12).sqrt());
        Normalization { mean, std }
    }

    /// `[B, h, w, 3]` normalized images (all samples share a size).
    pub fn batch<T: Float>(&self, samples: &[&SegSample]) -> ArrayD<T> {
        let (h, w) = (samples[0].height, samples[0].width);
        let mut data = Vec::with_capacity(samples.len() * h * w * 3);
        for s in samples {
            assert_eq!((s.height, s.width), (h, w), "uniform image size");
            for px in s.pixels.chunks(3) {
                for c in 0..3 {
                    data.push(T::c((f64::from(px[c]) / 255.0 - self.mean[c]) / self.std[c]));
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[samples.len(), h, w, 3]), data).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::embedding::{Vocab, UNK_ID};

    #[test]
    fn split_sizes_and_disjoint_seeds() {
        let (train, val) = make_split(7, 256, 64, 64, 64).unwrap();
        assert_eq!((train.len(), val.len()), (256, 64));
        let seeds: HashSet<u64> = train.iter().chain(&val).map(|s| s.scene_seed).collect();
        assert_eq!(seeds.len(), 320);
        let (train2, val2) = make_split_parallel(7, 256, 64, 64, 64, 3).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
        let vocab = Vocab::from_words(train.iter().flat_map(|s| s.expression.split(' ').map(str::to_string)));
        for s in &val {
            assert!(!vocab.tokenize(&s.expression).contains(&UNK_ID), "{}", s.expression);
        }
        let families: HashSet<Family> = train.iter().map(|s| s.family).collect();
        assert_eq!(families.len(), 3);
    }

    #[test]
    fn expressions_denote_exactly_their_target() {
        for i in 0..300 {
            let (s, scene) = generate_sample_scene(scene_seed(1, Split::Train, i), 64, 64).unwrap();
            assert_eq!(rasterize(&scene, s.target), s.mask);
            let e = Expression::parse(&s.expression).unwrap();
            assert_eq!(e.denotation(&scene), vec![s.target], "{}", s.expression);
            assert_eq!(e.family(), s.family);
            assert_eq!(s.size_ratio, 100.0 * s.mask.count() as f64 / 4096.0);
            // Object masks overlap by at most the placement allowance.
            let total: usize = (0..scene.objects.len()).map(|k| rasterize(&scene, k).count()).sum();
            let union = (0..64 * 64)
                .filter(|&p| (0..scene.objects.len()).any(|k| rasterize(&scene, k).data[p]))
                .count();
            assert!(total - union <= total / 5);
        }
    }

    #[test]
    fn flip_mirrors_pixels_mask_and_words() {
        let s = generate_sample(5, 64, 64).unwrap();
        let f = s.flip_horizontal();
        assert_eq!(f.mask.count(), s.mask.count());
        assert_eq!(f.flip_horizontal(), s);
        assert_eq!(&f.pixels[0..3], &s.pixels[63 * 3..64 * 3]);
    }

    #[test]
    fn normalization_standardizes() {
        let (train, _) = make_split(2, 8, 1, 64, 64).unwrap();
        let norm = Normalization::fit(&train);
        let refs: Vec<&SegSample> = train.iter().collect();
        let x = norm.batch::<f64>(&refs);
        let n = (x.len() / 3) as f64;
        for c in 0..3 {
            let ch = x.index_axis(ndarray::Axis(3), c);
            let mean = ch.sum() / n;
            let var = ch.mapv(|v| v * v).sum() / n - mean * mean;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
        }
    }
}
