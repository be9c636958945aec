//! Fixed-budget comparisons of fusion wirings across seeds.

use serde::{Deserialize, Serialize};

use crate::complexity::{complexity_report, DEFAULT_TEXT_LEN};
use crate::config::{RunConfig, SlotVariant};
use crate::data::{Normalization, SegSample};
use crate::error::{Error, Result};
use crate::model::build_variant_model;
use crate::train::{fit, FitOptions, Trainer};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub fpn: SlotVariant,
    pub decoder: SlotVariant,
}

impl Variant {
    pub fn new(fpn: SlotVariant, decoder: SlotVariant) -> Self {
        Variant {
            name: format!("fpn={fpn},decoder={decoder}"),
            fpn,
            decoder,
        }
    }
}

/// The four on/off combinations of the FPN and decoder fusion.
pub fn component_sweep() -> Vec<Variant> {
    use SlotVariant::{None, Shared};
    vec![
        Variant::new(None, None),
        Variant::new(Shared, None),
        Variant::new(None, Shared),
        Variant::new(Shared, Shared),
    ]
}

/// Fusion modules in the FPN slot, decoder fixed to shared.
pub fn fpn_fusion_sweep() -> Vec<Variant> {
    [SlotVariant::Shared, SlotVariant::Cross, SlotVariant::Bidir]
        .into_iter()
        .map(|v| Variant::new(v, SlotVariant::Shared))
        .collect()
}

/// Fusion modules in the decoder slot, FPN fixed to shared.
pub fn decoder_fusion_sweep() -> Vec<Variant> {
    [SlotVariant::Shared, SlotVariant::Cross, SlotVariant::Bidir]
        .into_iter()
        .map(|v| Variant::new(SlotVariant::Shared, v))
        .collect()
}

pub fn sweep(name: &str) -> Result<Vec<Variant>> {
    match name {
        "components" => Ok(component_sweep()),
        "fpn-fusion" => Ok(fpn_fusion_sweep()),
        "decoder-fusion" => Ok(decoder_fusion_sweep()),
        other => Err(Error::Config(format!(
            "unknown sweep `{other}` (expected components, fpn-fusion or decoder-fusion)"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: u64,
    pub gflops: f64,
    pub seeds: Vec<u64>,
    pub oiou: Vec<f64>,
    pub miou: Vec<f64>,
    pub mean_oiou: f64,
    pub mean_miou: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains `variant` from scratch once per seed on the same data and scores
/// the final state on `val`.
pub fn run_variant(
    base: &RunConfig,
    variant: &Variant,
    seeds: &[u64],
    train: &[SegSample],
    val: &[SegSample],
    mut progress: impl FnMut(&Variant, u64, f64),
) -> Result<AblationRow> {
    let cfg = base.model.validate()?;
    let model = build_variant_model(&cfg, variant.fpn, variant.decoder, 0.0)?;
    let cost = complexity_report(&model, DEFAULT_TEXT_LEN);
    let norm = Normalization::fit(train);
    let (mut oiou, mut miou) = (Vec::new(), Vec::new());
    for &seed in seeds {
        let mut run = base.clone();
        run.model.fpn_fusion = variant.fpn;
        run.model.decoder_fusion = variant.decoder;
        run.train.seed = seed;
        run.train.eval_every = usize::MAX;
        let mut trainer = Trainer::new(run, norm, train.len())?;
        fit(&mut trainer, train, &[], FitOptions::default())?;
        let report = trainer.evaluate(val, &Default::default())?.report;
        progress(variant, seed, report.miou);
        oiou.push(report.oiou);
        miou.push(report.miou);
    }
    Ok(AblationRow {
        variant: variant.clone(),
        params: cost.total_params,
        gflops: cost.total_flops as f64 / 1e9,
        seeds: seeds.to_vec(),
        mean_oiou: mean(&oiou),
        mean_miou: mean(&miou),
        oiou,
        miou,
    })
}

pub fn table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<8} {:<8} {:>12} {:>8} {:>8} {:>8}\n",
        "fpn", "decoder", "params", "GFLOPs", "oIoU", "mIoU"
    );
    for r in rows {
        out += &format!(
            "{:<8} {:<8} {:>12} {:>8.3} {:>8.4} {:>8.4}\n",
            r.variant.fpn.name(),
            r.variant.decoder.name(),
            r.params,
            r.gflops,
            r.mean_oiou,
            r.mean_miou
        );
    }
    out
}

/// Checks `rows[i].mean_miou >= rows[i + 1].mean_miou - tolerance` along
/// `order`, given as variant names from best to worst.
pub fn check_monotone(rows: &[AblationRow], order: &[&str], tolerance: f64) -> Result<()> {
    let get = |n: &str| -> Result<&AblationRow> {
        rows.iter()
            .find(|r| r.variant.name == n)
            .ok_or_else(|| Error::Config(format!("no ablation row `{n}`")))
    };
    for w in order.windows(2) {
        let (hi, lo) = (get(w[0])?, get(w[1])?);
        if hi.mean_miou < lo.mean_miou - tolerance {
            return Err(Error::Config(format!(
                "`{}` mIoU {:.4} is below `{}` mIoU {:.4}",
                hi.variant.name, hi.mean_miou, lo.variant.name, lo.mean_miou
            )));
        }
    }
    Ok(())
}
