//! Checkpoint container.
//!
//! Layout: magic `SRISCKPT`, version `u32`, manifest length `u64` and UTF-8
//! JSON manifest, blob count `u64`, then each blob as name length `u32`,
//! name, dtype tag `u8` (0 = f32), rank `u32`, dims `u64` each, the
//! row-major payload, and a trailing FNV-1a 64 hash of the blob record.
//! Every integer and float is little-endian.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::optimizer::AdamW;
use crate::config::RunConfig;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::MetricReport;
use crate::model::SharedRis;
use crate::params::{BufferStore, ParamStore};

pub const MAGIC: &[u8; 8] = b"SRISCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub run: RunConfig,
    /// Optimizer steps taken.
    pub step: usize,
    pub epoch: usize,
    pub best_miou: Option<f64>,
    pub metrics: Option<MetricReport>,
    pub normalization: Normalization,
    pub vocab_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A parsed file whose blobs have not yet been matched to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub manifest: CheckpointManifest,
    pub blobs: Vec<Blob>,
}

/// Model state ready to use.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore<f32>,
    pub buffers: BufferStore<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

fn blob_bytes(name: &str, shape: &[usize], data: &[f32], out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut h = FnvHasher::default();
    h.write(&out[start..]);
    out.extend_from_slice(&h.finish().to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest)?;
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);

        let mut blobs = Vec::new();
        let mut count = 0u64;
        for (spec, value) in self.params.iter() {
            blob_bytes(&format!("param:{}", spec.name), &spec.shape, &contiguous(value), &mut blobs);
            count += 1;
        }
        for (spec, value) in self.buffers.iter() {
            blob_bytes(&format!("buffer:{}", spec.name), &[spec.len], value, &mut blobs);
            count += 1;
        }
        if let Some(opt) = &self.optimizer {
            for (spec, (m, v)) in self.params.specs().iter().zip(opt.m.iter().zip(&opt.v)) {
                blob_bytes(&format!("adam_m:{}", spec.name), &spec.shape, &contiguous(m), &mut blobs);
                blob_bytes(&format!("adam_v:{}", spec.name), &spec.shape, &contiguous(v), &mut blobs);
                count += 2;
            }
            let hyper = [opt.beta1, opt.beta2, opt.eps, opt.weight_decay, opt.step as f64];
            let bits: Vec<f32> = hyper.iter().flat_map(|x| split_f64(*x)).collect();
            blob_bytes("adam_state", &[bits.len()], &bits, &mut blobs);
            count += 1;
        }
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }
}

fn contiguous(a: &ArrayD<f32>) -> Vec<f32> {
    a.iter().copied().collect()
}

/// Stores an `f64` exactly as two `f32` bit patterns.
fn split_f64(x: f64) -> [f32; 2] {
    let b = x.to_bits();
    [f32::from_bits(b as u32), f32::from_bits((b >> 32) as u32)]
}

fn join_f64(lo: f32, hi: f32) -> f64 {
    f64::from_bits(u64::from(lo.to_bits()) | (u64::from(hi.to_bits()) << 32))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

fn read_blob(c: &mut Cursor<'_>) -> Result<Blob> {
    let start = c.pos;
    let name_len = c.u32()? as usize;
    let name = std::str::from_utf8(c.take(name_len)?)
        .map_err(|_| Error::Format("blob name is not UTF-8".into()))?
        .to_string();
    let dtype = c.take(1)?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("blob `{name}` has unknown dtype {dtype}")));
    }
    let rank = c.u32()? as usize;
    let mut shape = Vec::with_capacity(rank.min(8));
    for _ in 0..rank {
        shape.push(c.len()?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("blob `{name}` is too large")))?;
    let payload = c.take(numel)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut h = FnvHasher::default();
    h.write(&c.bytes[start..c.pos]);
    if h.finish() != c.u64()? {
        return Err(Error::Hash(name));
    }
    Ok(Blob { name, shape, data })
}

impl RawCheckpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8).ok() != Some(&MAGIC[..]) {
            return Err(Error::Format("missing SRISCKPT magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mlen = c.len()?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(c.take(mlen)?).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let count = c.len()?;
        let blobs = (0..count).map(|_| read_blob(&mut c)).collect::<Result<Vec<_>>>()?;
        if c.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after the last blob".into()));
        }
        Ok(RawCheckpoint { manifest, blobs })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn find(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    /// Matches blobs to the model's parameter and buffer layout.
    pub fn into_checkpoint(self, model: &SharedRis) -> Result<Checkpoint> {
        let tensor = |name: &str, shape: &[usize]| -> Result<ArrayD<f32>> {
            let b = self
                .find(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks blob `{name}`")))?;
            if b.shape != shape {
                return Err(Error::Format(format!("blob `{name}` has shape {:?}, model expects {shape:?}", b.shape)));
            }
            Ok(ArrayD::from_shape_vec(IxDyn(shape), b.data.clone()).unwrap())
        };
        let mut params = ParamStore::zeros(model.param_specs().to_vec());
        for id in params.ids().collect::<Vec<_>>() {
            let spec = params.specs()[id.0].clone();
            params.set(id, tensor(&format!("param:{}", spec.name), &spec.shape)?)?;
        }
        let mut buffers = model.init_buffers::<f32>();
        for i in 0..buffers.specs().len() {
            let spec = buffers.specs()[i].clone();
            let t = tensor(&format!("buffer:{}", spec.name), &[spec.len])?;
            buffers.set(crate::params::BufferId(i), t.into_raw_vec_and_offset().0);
        }
        let optimizer = match self.find("adam_state") {
            None => None,
            Some(state) => {
                if state.data.len() != 10 {
                    return Err(Error::Format("adam_state must hold five values".into()));
                }
                let h: Vec<f64> = state.data.chunks(2).map(|p| join_f64(p[0], p[1])).collect();
                let mut m = Vec::new();
                let mut v = Vec::new();
                for spec in params.specs() {
                    m.push(tensor(&format!("adam_m:{}", spec.name), &spec.shape)?);
                    v.push(tensor(&format!("adam_v:{}", spec.name), &spec.shape)?);
                }
                Some(AdamW {
                    beta1: h[0],
                    beta2: h[1],
                    eps: h[2],
                    weight_decay: h[3],
                    step: h[4] as u64,
                    m,
                    v,
                })
            }
        };
        Ok(Checkpoint {
            manifest: self.manifest,
            params,
            buffers,
            optimizer,
        })
    }
}

/// Name of the first configuration key on which `a` and `b` differ.
pub fn config_difference(a: &RunConfig, b: &RunConfig) -> Option<String> {
    let (ta, tb) = (a.to_file_text(), b.to_file_text());
    ta.lines()
        .zip(tb.lines())
        .find(|(x, y)| x != y)
        .map(|(x, _)| x.split(" = ").next().unwrap_or("").to_string())
}

/// Errors with the first differing model key unless `force` is set.
pub fn check_model_config(saved: &RunConfig, runtime: &RunConfig, force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    let only_model = |r: &RunConfig| RunConfig {
        model: r.model.clone(),
        train: runtime.train.clone(),
    };
    match config_difference(&only_model(saved), &only_model(runtime)) {
        Some(key) => Err(Error::ConfigMismatch(key)),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::{toy_config, ModelConfig, TrainConfig};
    use crate::embedding::Vocab;

    fn sample() -> (SharedRis, Checkpoint) {
        let run = RunConfig {
            model: ModelConfig {
                embed_dim: 16,
                fpn_dim: 8,
                ..toy_config()
            },
            train: TrainConfig::toy(),
        };
        let model = SharedRis::new(run.model.validate().unwrap(), 0.1);
        let params = model.init_params::<f32>(&mut ChaCha8Rng::seed_from_u64(5));
        let mut buffers = model.init_buffers::<f32>();
        buffers.set(crate::params::BufferId(0), vec![0.25; buffers.specs()[0].len]);
        let mut opt = AdamW::new(&run.train, &params);
        opt.step = 7;
        opt.m[3].fill(0.5);
        let ckpt = Checkpoint {
            manifest: CheckpointManifest {
                run,
                step: 7,
                epoch: 1,
                best_miou: Some(0.125),
                metrics: None,
                normalization: Normalization {
                    mean: [0.1, 0.2, 0.3],
                    std: [0.7, 0.8, 0.9],
                },
                vocab_hash: Vocab::synthetic().hash(),
            },
            params,
            buffers,
            optimizer: Some(opt),
        };
        (model, ckpt)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (model, ckpt) = sample();
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = RawCheckpoint::from_bytes(&bytes).unwrap().into_checkpoint(&model).unwrap();
        assert_eq!(back.manifest, ckpt.manifest);
        for ((_, a), (_, b)) in back.params.iter().zip(ckpt.params.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(back.buffers, ckpt.buffers);
        assert_eq!(back.optimizer, ckpt.optimizer);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let (_, ckpt) = sample();
        let bytes = ckpt.to_bytes().unwrap();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(RawCheckpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 20] ^= 1;
        assert!(matches!(RawCheckpoint::from_bytes(&bad), Err(Error::Hash(_))));
        let mut wrong = bytes;
        wrong[8] = 9;
        assert!(matches!(RawCheckpoint::from_bytes(&wrong), Err(Error::Format(_))));
    }

    #[test]
    fn config_mismatch_names_the_key() {
        let (_, ckpt) = sample();
        let mut other = ckpt.manifest.run.clone();
        other.model.fpn_dim = 16;
        assert!(matches!(
            check_model_config(&ckpt.manifest.run, &other, false),
            Err(Error::ConfigMismatch(k)) if k == "fpn_dim"
        ));
        assert!(check_model_config(&ckpt.manifest.run, &other, true).is_ok());
        other.model.fpn_dim = 8;
        other.train.lr = 0.5;
        assert!(check_model_config(&ckpt.manifest.run, &other, false).is_ok());
    }
}
