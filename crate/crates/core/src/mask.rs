//! Probability maps, binary masks, and nearest-neighbour resizing.

use crate::error::{Error, Result};

/// Index of the nearest source cell for output cell `i` (cell centres).
pub fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

/// Row-major `height x width` probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} map", values.len())));
        }
        Ok(ProbabilityMap { height, width, values })
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Foreground where the probability is strictly above `threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.values.iter().map(|&v| f64::from(v) > threshold).collect(),
        }
    }
}

/// Threshold, then nearest-neighbour resize to the output size.
pub fn binarize_and_resize(m: &ProbabilityMap, threshold: f64, out_h: usize, out_w: usize) -> BinaryMask {
    m.binarize(threshold).resize_nearest(out_h, out_w)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} flags for a {height}x{width} mask", data.len())));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> BinaryMask {
        let ys: Vec<usize> = (0..out_h).map(|i| nearest_index(i, self.height, out_h)).collect();
        let xs: Vec<usize> = (0..out_w).map(|j| nearest_index(j, self.width, out_w)).collect();
        let mut data = Vec::with_capacity(out_h * out_w);
        for &y in &ys {
            data.extend(xs.iter().map(|&x| self.get(y, x)));
        }
        BinaryMask {
            height: out_h,
            width: out_w,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        BinaryMask { data, ..*self }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}
