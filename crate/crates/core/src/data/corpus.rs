//! On-disk corpus layout: `{split}/{idx}.png`, `{idx}.mask.png`,
//! `{idx}.txt`, and a `manifest.json` at the root.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::expression::Family;
use super::scene::{Color, Shape};
use super::{make_split_parallel, SegSample, Split};
use crate::error::{Error, Result};
use crate::io::{read_mask_png, read_rgb_png, write_atomic, write_mask_png, write_rgb_png};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub idx: usize,
    pub scene_seed: u64,
    pub target: usize,
    pub family: Family,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub canvas: [usize; 2],
    pub n_train: usize,
    pub n_val: usize,
    pub palette: Vec<PaletteEntry>,
    pub shapes: Vec<String>,
    pub template_families: Vec<String>,
    pub train: Vec<SampleEntry>,
    pub val: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
}

fn entries(samples: &[SegSample]) -> Vec<SampleEntry> {
    samples
        .iter()
        .enumerate()
        .map(|(idx, s)| SampleEntry {
            idx,
            scene_seed: s.scene_seed,
            target: s.target,
            family: s.family,
        })
        .collect()
}

impl Corpus {
    pub fn generate(seed: u64, n_train: usize, n_val: usize, height: usize, width: usize) -> Result<Self> {
        Self::generate_with_workers(seed, n_train, n_val, height, width, 1)
    }

    pub fn generate_with_workers(seed: u64, n_train: usize, n_val: usize, height: usize, width: usize, workers: usize) -> Result<Self> {
        let (train, val) = make_split_parallel(seed, n_train, n_val, height, width, workers)?;
        let manifest = CorpusManifest {
            seed,
            canvas: [height, width],
            n_train,
            n_val,
            palette: Color::ALL
                .iter()
                .map(|c| PaletteEntry {
                    name: c.name().into(),
                    rgb: c.rgb(),
                })
                .collect(),
            shapes: Shape::ALL.iter().map(|s| s.name().into()).collect(),
            template_families: Family::ALL.iter().map(|f| f.name().into()).collect(),
            train: entries(&train),
            val: entries(&val),
        };
        Ok(Corpus { manifest, train, val })
    }

    pub fn split(&self, split: Split) -> &[SegSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for split in [Split::Train, Split::Val] {
            let dir = root.join(split.name());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, s) in self.split(split).iter().enumerate() {
                write_rgb_png(&dir.join(format!("{i}.png")), s.width, s.height, &s.pixels)?;
                write_mask_png(&dir.join(format!("{i}.mask.png")), &s.mask)?;
                let txt = dir.join(format!("{i}.txt"));
                std::fs::write(&txt, format!("{}\n", s.expression)).map_err(|e| Error::io(&txt, e))?;
            }
        }
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&root.join("manifest.json"), &json)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let mpath = root.join("manifest.json");
        let text = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CorpusManifest = serde_json::from_slice(&text)?;
        let load_split = |split: Split, list: &[SampleEntry]| -> Result<Vec<SegSample>> {
            let dir = root.join(split.name());
            list.iter()
                .map(|e| {
                    let (width, height, pixels) = read_rgb_png(&dir.join(format!("{}.png", e.idx)))?;
                    let mask = read_mask_png(&dir.join(format!("{}.mask.png", e.idx)))?;
                    let txt = dir.join(format!("{}.txt", e.idx));
                    let expression = std::fs::read_to_string(&txt).map_err(|err| Error::io(&txt, err))?;
                    Ok(SegSample {
                        height,
                        width,
                        pixels,
                        expression: expression.trim().to_string(),
                        size_ratio: 100.0 * mask.count() as f64 / (height * width) as f64,
                        mask,
                        target: e.target,
                        family: e.family,
                        scene_seed: e.scene_seed,
                    })
                })
                .collect()
        };
        let train = load_split(Split::Train, &manifest.train)?;
        let val = load_split(Split::Val, &manifest.val)?;
        Ok(Corpus { manifest, train, val })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_is_exact_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::generate(3, 6, 2, 64, 64).unwrap();
        corpus.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), corpus);
        let first = std::fs::read(dir.path().join("train/0.png")).unwrap();
        let other = tempfile::tempdir().unwrap();
        Corpus::generate(3, 6, 2, 64, 64).unwrap().save(other.path()).unwrap();
        assert_eq!(std::fs::read(other.path().join("train/0.png")).unwrap(), first);
        assert_eq!(
            std::fs::read(other.path().join("manifest.json")).unwrap(),
            std::fs::read(dir.path().join("manifest.json")).unwrap()
        );
    }
}
