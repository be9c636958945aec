//! Binary cross-entropy and Dice losses and their weighted sum.

use std::rc::Rc;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Var};
use crate::error::{Error, Result};
use crate::mask::{nearest_index, BinaryMask, ProbabilityMap};

pub const BCE_CLAMP: f64 = 1e-6;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(bce: f64, dice: f64, lambda_bce: f64, lambda_dice: f64) -> Self {
        LossBreakdown {
            bce,
            dice,
            total: lambda_bce * bce + lambda_dice * dice,
        }
    }
}

fn check(m: &ProbabilityMap, g: &BinaryMask) -> Result<()> {
    if (m.height, m.width) != (g.height, g.width) {
        return Err(Error::Shape(format!(
            "map {}x{} vs mask {}x{}",
            m.height, m.width, g.height, g.width
        )));
    }
    Ok(())
}

/// Pixel mean of `-[g ln m + (1 - g) ln(1 - m)]` with `m` clamped.
pub fn bce_loss(m: &ProbabilityMap, g: &BinaryMask) -> Result<f64> {
    check(m, g)?;
    let sum: f64 = m
        .values
        .iter()
        .zip(&g.data)
        .map(|(&p, &t)| {
            let p = f64::from(p).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if t {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / m.values.len() as f64)
}

/// Soft Dice: `1 - (2 sum(m g) + s) / (sum m + sum g + s)`.
pub fn dice_loss(m: &ProbabilityMap, g: &BinaryMask) -> Result<f64> {
    check(m, g)?;
    let (mut inter, mut sm, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &t) in m.values.iter().zip(&g.data) {
        let p = f64::from(p);
        let t = if t { 1.0 } else { 0.0 };
        inter += p * t;
        sm += p;
        sg += t;
    }
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (sm + sg + DICE_SMOOTH))
}

pub fn seg_loss(m: &ProbabilityMap, g: &BinaryMask, lambda_bce: f64, lambda_dice: f64) -> Result<LossBreakdown> {
    Ok(LossBreakdown::combine(bce_loss(m, g)?, dice_loss(m, g)?, lambda_bce, lambda_dice))
}

/// Differentiable batch loss; each term is a mean over per-sample losses.
pub fn seg_loss_var<'t, T: Float>(
    probs: Var<'t, T>,
    target: Rc<ArrayD<T>>,
    lambda_bce: f64,
    lambda_dice: f64,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    if probs.shape() != target.shape() {
        return Err(Error::Shape(format!("probabilities {:?} vs target {:?}", probs.shape(), target.shape())));
    }
    let bce = probs.bce(target.clone(), T::c(BCE_CLAMP));
    let dice = probs.dice(target, T::c(DICE_SMOOTH));
    let total = bce.scale(T::c(lambda_bce)).add(dice.scale(T::c(lambda_dice)));
    let breakdown = LossBreakdown::combine(bce.scalar().f64(), dice.scalar().f64(), lambda_bce, lambda_dice);
    Ok((total, breakdown))
}

/// Nearest-neighbour resampling of a ground-truth mask to the map size.
pub fn downsample_target(g: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    if (g.height, g.width) == (height, width) {
        return g.clone();
    }
    let mut out = BinaryMask::empty(height, width);
    for y in 0..height {
        for x in 0..width {
            out.set(y, x, g.get(nearest_index(y, g.height, height), nearest_index(x, g.width, width)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use ndarray::IxDyn;

    use super::*;
    use crate::autodiff::Tape;

    fn map(h: usize, w: usize, v: &[f32]) -> ProbabilityMap {
        ProbabilityMap::new(h, w, v.to_vec()).unwrap()
    }

    fn mask(h: usize, w: usize, v: &[u8]) -> BinaryMask {
        BinaryMask::new(h, w, v.iter().map(|&x| x == 1).collect()).unwrap()
    }

    #[test]
    fn bce_examples() {
        let g = mask(2, 2, &[1, 0, 1, 0]);
        let perfect = map(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert!(bce_loss(&perfect, &g).unwrap() <= 1e-5);
        let half = map(2, 2, &[0.5; 4]);
        assert!((bce_loss(&half, &g).unwrap() - 2f64.ln()).abs() < 1e-12);
        let m = map(2, 2, &[0.9, 0.1, 0.8, 0.2]);
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((bce_loss(&m, &g).unwrap() - want).abs() < 1e-7);
        assert!((want - 0.1643).abs() < 1e-4);
        assert!(bce_loss(&map(1, 4, &[0.5; 4]), &g).is_err());
    }

    #[test]
    fn dice_examples() {
        let g = mask(2, 4, &[1; 8]);
        assert_eq!(dice_loss(&map(2, 4, &[1.0; 8]), &g).unwrap(), 0.0);
        let m = map(1, 2, &[1.0, 0.0]);
        assert!((dice_loss(&m, &mask(1, 2, &[0, 1])).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let n = 64 * 64;
        let g = BinaryMask::new(64, 64, (0..n).map(|i| i < n / 2).collect()).unwrap();
        let inv = ProbabilityMap::new(64, 64, g.data.iter().map(|&t| if t { 0.0 } else { 1.0 }).collect()).unwrap();
        assert!(dice_loss(&inv, &g).unwrap() > 0.999);
    }

    #[test]
    fn weighted_combination() {
        let l = LossBreakdown::combine(0.5, 0.4, 2.0, 0.5);
        assert!((l.total - 1.2).abs() < 1e-15);
        assert_eq!(LossBreakdown::combine(0.5, 0.4, 1.0, 0.0).total, 0.5);
        assert_eq!(LossBreakdown::combine(0.5, 0.4, 0.0, 0.0).total, 0.0);
        let m = map(2, 2, &[0.9, 0.3, 0.6, 0.2]);
        let g = mask(2, 2, &[1, 0, 0, 1]);
        let a = seg_loss(&m, &g, 1.0, 0.0).unwrap().total;
        let b = seg_loss(&m, &g, 0.0, 1.0).unwrap().total;
        let c = seg_loss(&m, &g, 3.0, 2.0).unwrap().total;
        assert!((c - (3.0 * a + 2.0 * b)).abs() < 1e-12);
    }

    #[test]
    fn differentiable_loss_matches_scalar_and_finite_differences() {
        let values = [0.2, 0.7, 0.55, 0.9, 0.1, 0.35, 0.6, 0.45, 0.8];
        let g = mask(3, 3, &[1, 1, 0, 1, 0, 0, 1, 0, 1]);
        let target = Rc::new(ArrayD::from_shape_vec(IxDyn(&[1, 3, 3]), g.data.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect()).unwrap());
        let eval = |v: &[f64]| {
            let tape = Tape::new();
            let m = tape.param(Rc::new(ArrayD::from_shape_vec(IxDyn(&[1, 3, 3]), v.to_vec()).unwrap()));
            let (total, b) = seg_loss_var(m, target.clone(), 2.0, 0.5).unwrap();
            let grad = tape.backward(total).get(m);
            (b, grad)
        };
        let v: Vec<f64> = values.to_vec();
        let (b, grad) = eval(&v);
        let scalar = seg_loss(&map(3, 3, &values.map(|x| x as f32)), &g, 2.0, 0.5).unwrap();
        assert!((b.total - scalar.total).abs() < 1e-6);
        let h = 1e-6;
        for j in 0..9 {
            let mut plus = v.clone();
            plus[j] += h;
            let mut minus = v.clone();
            minus[j] -= h;
            let numeric = (eval(&plus).0.total - eval(&minus).0.total) / (2.0 * h);
            let analytic = grad.as_slice().unwrap()[j];
            assert!((analytic - numeric).abs() / analytic.abs().max(1e-12) < 1e-4);
        }
    }

    #[test]
    fn batch_loss_is_mean_of_sample_losses() {
        let a = map(2, 2, &[0.9, 0.3, 0.6, 0.2]);
        let b = map(2, 2, &[0.1, 0.4, 0.7, 0.5]);
        let ga = mask(2, 2, &[1, 0, 0, 1]);
        let gb = mask(2, 2, &[0, 0, 0, 0]);
        let la = seg_loss(&a, &ga, 2.0, 0.5).unwrap();
        let lb = seg_loss(&b, &gb, 2.0, 0.5).unwrap();
        let probs: Vec<f64> = a.values.iter().chain(&b.values).map(|&x| f64::from(x)).collect();
        let target: Vec<f64> = ga.to_f32().into_iter().chain(gb.to_f32()).map(f64::from).collect();
        let tape = Tape::new();
        let m = tape.constant(ArrayD::from_shape_vec(IxDyn(&[2, 2, 2]), probs).unwrap());
        let (_, l) = seg_loss_var(m, Rc::new(ArrayD::from_shape_vec(IxDyn(&[2, 2, 2]), target).unwrap()), 2.0, 0.5).unwrap();
        assert!((l.total - (la.total + lb.total) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn supervision_resolution_preserves_targets() {
        use crate::config::RunConfig;
        use crate::data::make_split;
        use crate::metrics::iou;
        for (preset, n) in [("toy", 64), ("base", 4)] {
            let cfg = RunConfig::preset(preset).unwrap().model.validate().unwrap();
            let (h, w) = (cfg.image_height, cfg.image_width);
            let (samples, _) = make_split(3, n, 1, h, w).unwrap();
            let worst = samples
                .iter()
                .map(|s| iou(&downsample_target(&s.mask, cfg.map_h, cfg.map_w).resize_nearest(h, w), &s.mask).unwrap())
                .fold(1.0, f64::min);
            assert!(worst >= 0.95, "{preset}: round trip IoU {worst}");
        }
    }
}
