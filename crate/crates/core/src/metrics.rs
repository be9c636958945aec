//! Overall IoU, mean IoU, precision at IoU thresholds, and IoU bucketed by
//! target size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const PREC_THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];
/// Target area as a percentage of the image; the last bin is closed.
pub const SIZE_EDGES: [f64; 6] = [0.0, 1.0, 5.0, 10.0, 25.0, 100.0];

/// `(intersection, union)` pixel counts.
pub fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> Result<(u64, u64)> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (mut i, mut u) = (0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        i += u64::from(p && g);
        u += u64::from(p || g);
    }
    Ok((i, u))
}

fn ratio(i: u64, u: u64) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// IoU, with two empty masks scoring 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, u) = overlap(pred, gt)?;
    Ok(ratio(i, u))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub total_intersection: u64,
    pub total_union: u64,
    pub per_sample_ious: Vec<f64>,
    /// `100 * |gt| / image_area` per sample.
    pub per_sample_size_ratio: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Precision {
    pub p50: f64,
    pub p70: f64,
    pub p90: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBucket {
    pub lo: f64,
    pub hi: f64,
    /// `None` when no sample falls in the bucket.
    pub mean_iou: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub oiou: f64,
    pub miou: f64,
    /// Fractions of samples with IoU above each threshold.
    pub prec: Precision,
    pub size_buckets: Vec<SizeBucket>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalizeOptions {
    /// Count IoU equal to the threshold as a hit.
    pub prec_inclusive: bool,
    pub size_edges: Vec<f64>,
}

impl Default for FinalizeOptions {
    fn default() -> Self {
        FinalizeOptions {
            prec_inclusive: false,
            size_edges: SIZE_EDGES.to_vec(),
        }
    }
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.per_sample_ious.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample_ious.is_empty()
    }

    pub fn update(&mut self, pred: &BinaryMask, gt: &BinaryMask, image_area: usize) -> Result<()> {
        let (i, u) = overlap(pred, gt)?;
        self.update_counts(i, u, 100.0 * gt.count() as f64 / image_area as f64);
        Ok(())
    }

    pub fn update_counts(&mut self, intersection: u64, union: u64, size_ratio: f64) {
        debug_assert!(intersection <= union);
        self.total_intersection += intersection;
        self.total_union += union;
        self.per_sample_ious.push(ratio(intersection, union));
        self.per_sample_size_ratio.push(size_ratio);
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.total_intersection += other.total_intersection;
        self.total_union += other.total_union;
        self.per_sample_ious.extend_from_slice(&other.per_sample_ious);
        self.per_sample_size_ratio.extend_from_slice(&other.per_sample_size_ratio);
    }

    pub fn oiou(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Empty);
        }
        Ok(ratio(self.total_intersection, self.total_union))
    }

    pub fn miou(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Empty);
        }
        Ok(self.per_sample_ious.iter().sum::<f64>() / self.len() as f64)
    }

    pub fn precision_at(&self, threshold: f64, inclusive: bool) -> f64 {
        let hits = self
            .per_sample_ious
            .iter()
            .filter(|&&v| if inclusive { v >= threshold } else { v > threshold })
            .count();
        hits as f64 / self.len().max(1) as f64
    }

    pub fn finalize(&self) -> Result<MetricReport> {
        self.finalize_with(&FinalizeOptions::default())
    }

    pub fn finalize_with(&self, opts: &FinalizeOptions) -> Result<MetricReport> {
        let (oiou, miou) = (self.oiou()?, self.miou()?);
        let [p50, p70, p90] = PREC_THRESHOLDS.map(|t| self.precision_at(t, opts.prec_inclusive));
        let edges = &opts.size_edges;
        let mut size_buckets = Vec::new();
        for (k, w) in edges.windows(2).enumerate() {
            let last = k + 2 == edges.len();
            let members: Vec<f64> = self
                .per_sample_ious
                .iter()
                .zip(&self.per_sample_size_ratio)
                .filter(|(_, &r)| r >= w[0] && (r < w[1] || (last && r <= w[1])))
                .map(|(&v, _)| v)
                .collect();
            size_buckets.push(SizeBucket {
                lo: w[0],
                hi: w[1],
                mean_iou: (!members.is_empty()).then(|| members.iter().sum::<f64>() / members.len() as f64),
                count: members.len(),
            });
        }
        Ok(MetricReport {
            oiou,
            miou,
            prec: Precision { p50, p70, p90 },
            size_buckets,
            n_samples: self.len(),
        })
    }
}
