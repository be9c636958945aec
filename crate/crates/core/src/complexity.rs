//! Analytic parameter counts and FLOP estimates.
//!
//! FLOPs follow the multiply-accumulate convention: one MAC counts as one
//! FLOP. Nonlinearities, softmax and normalization are not counted.

use serde::{Deserialize, Serialize};

use crate::config::{SlotVariant, ValidatedConfig};
use crate::error::{Error, Result};
use crate::model::SharedRis;

/// Default expression length for whole-model estimates.
pub const DEFAULT_TEXT_LEN: usize = 10;

pub const MODULES: [&str; 4] = ["embedding", "encoder", "fpn", "decoder"];

/// FLOPs split by term so scaling laws can be checked separately.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopTerms {
    /// Linear maps, including attention projections and MLPs.
    pub linear: u64,
    /// `QK^T` and the weighted sum over values.
    pub attention: u64,
    pub conv: u64,
}

impl FlopTerms {
    pub fn total(&self) -> u64 {
        self.linear + self.attention + self.conv
    }

    fn add(&mut self, o: FlopTerms) {
        self.linear += o.linear;
        self.attention += o.attention;
        self.conv += o.conv;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub flops: FlopTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub image: [usize; 2],
    pub text_len: usize,
    pub modules: Vec<ModuleCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl ComplexityReport {
    pub fn module(&self, name: &str) -> Option<&ModuleCost> {
        self.modules.iter().find(|m| m.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>14} {:>10} {:>10}\n", "module", "params", "Mparams", "GFLOPs");
        let line = |name: &str, p: u64, f: u64| {
            format!("{name:<10} {p:>14} {:>10.3} {:>10.3}\n", p as f64 / 1e6, f as f64 / 1e9)
        };
        for m in &self.modules {
            out += &line(&m.name, m.params, m.flops.total());
        }
        out + &line("total", self.total_params, self.total_flops)
    }
}

/// Which module a parameter belongs to, from its name.
pub fn module_of(param: &str) -> &'static str {
    match param.split('.').next().unwrap_or("") {
        "embed" => "embedding",
        "encoder" => "encoder",
        "fpn" | "neck" => "fpn",
        _ => "decoder",
    }
}

/// Exact learnable-scalar counts grouped by module.
pub fn count_params(model: &SharedRis) -> Vec<(&'static str, u64)> {
    let mut counts: Vec<(&'static str, u64)> = MODULES.iter().map(|&m| (m, 0)).collect();
    for spec in model.param_specs() {
        let m = module_of(&spec.name);
        counts.iter_mut().find(|(n, _)| *n == m).unwrap().1 += spec.numel() as u64;
    }
    counts
}

fn linear(tokens: usize, din: usize, dout: usize) -> u64 {
    (tokens * din * dout) as u64
}

/// Self-attention over `n` tokens of width `d`.
fn self_attention(n: usize, d: usize) -> FlopTerms {
    FlopTerms {
        linear: 4 * linear(n, d, d),
        attention: 2 * (n * n * d) as u64,
        conv: 0,
    }
}

/// `nq` queries attending `nk` keys.
fn cross_attention(nq: usize, nk: usize, d: usize) -> FlopTerms {
    FlopTerms {
        linear: 2 * linear(nq, d, d) + 2 * linear(nk, d, d),
        attention: 2 * (nq * nk * d) as u64,
        conv: 0,
    }
}

fn fusion(variant: SlotVariant, nv: usize, nt: usize, d: usize) -> FlopTerms {
    match variant {
        SlotVariant::None => FlopTerms::default(),
        SlotVariant::Shared => self_attention(nv + nt, d),
        SlotVariant::Cross => cross_attention(nv, nt, d),
        SlotVariant::Bidir => {
            let mut f = cross_attention(nv, nt, d);
            f.add(cross_attention(nt, nv, d));
            f
        }
    }
}

/// Per-module FLOPs for one image and a text of `m` tokens.
pub fn estimate_flops(cfg: &ValidatedConfig, m: usize) -> Vec<(&'static str, FlopTerms)> {
    let (n, d, dw, r) = (cfg.num_patches, cfg.embed_dim, cfg.fpn_dim, cfg.mlp_ratio);
    let (nv, nt) = (cfg.visual_len, m + 2);
    let seq = cfg.seq_len(m);
    let p2c = cfg.patch_size * cfg.patch_size * 3;

    let embedding = FlopTerms {
        linear: linear(n, p2c, d),
        ..Default::default()
    };

    let mut layer = self_attention(seq, d);
    layer.linear += 2 * linear(seq, d, r * d);
    let encoder = FlopTerms {
        linear: layer.linear * cfg.encoder_layers as u64,
        attention: layer.attention * cfg.encoder_layers as u64,
        conv: 0,
    };

    let mut fpn = FlopTerms::default();
    if cfg.fpn_fusion == SlotVariant::None {
        fpn.linear = linear(seq, d, dw);
    } else {
        let k = cfg.num_taps();
        for _ in 0..k {
            fpn.linear += linear(seq, d, dw);
            fpn.add(fusion(cfg.fpn_fusion, nv, nt, dw));
        }
        fpn.linear += linear(seq, k * dw, dw);
    }

    let mut decoder = fusion(cfg.decoder_fusion, nv, nt, dw);
    if cfg.decoder_fusion != SlotVariant::None {
        decoder.linear += 2 * linear(seq, dw, r * dw);
    }
    let (mut h, mut w) = (cfg.grid_h, cfg.grid_w);
    for _ in 0..cfg.upsample_steps {
        h *= 2;
        w *= 2;
        decoder.conv += (9 * dw * dw * h * w) as u64;
    }
    decoder.linear += 2 * linear(1, dw, dw) + (h * w * dw) as u64;

    vec![("embedding", embedding), ("encoder", encoder), ("fpn", fpn), ("decoder", decoder)]
}

/// Parameters and FLOPs together for an assembled model.
pub fn complexity_report(model: &SharedRis, m: usize) -> ComplexityReport {
    let params = count_params(model);
    let flops = estimate_flops(&model.config, m);
    let modules: Vec<ModuleCost> = params
        .iter()
        .zip(&flops)
        .map(|(&(name, p), &(_, f))| ModuleCost {
            name: name.to_string(),
            params: p,
            flops: f,
        })
        .collect();
    ComplexityReport {
        image: [model.config.image_height, model.config.image_width],
        text_len: m,
        total_params: modules.iter().map(|m| m.params).sum(),
        total_flops: modules.iter().map(|m| m.flops.total()).sum(),
        modules,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// A reference value with a relative tolerance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    pub what: &'static str,
    pub reference: f64,
    pub tolerance: f64,
}

impl Budget {
    pub fn check(&self, value: f64) -> bool {
        (value - self.reference).abs() <= self.tolerance * self.reference
    }
}

/// Sorts named reports by parameter count (stable, ties by name) and checks
/// that each `(lower, higher)` pair is strictly ordered.
pub fn ordering_check(reports: &[(String, u64, u64)], expect: &[(&str, &str)]) -> Result<Vec<OrderingRow>> {
    if reports.len() < 2 {
        return Err(Error::Config("ordering needs at least two reports".into()));
    }
    let mut rows: Vec<OrderingRow> = reports
        .iter()
        .map(|(name, params, flops)| OrderingRow {
            name: name.clone(),
            params: *params,
            flops: *flops,
        })
        .collect();
    rows.sort_by(|a, b| a.params.cmp(&b.params).then_with(|| a.name.cmp(&b.name)));
    let find = |name: &str| -> Result<&OrderingRow> {
        rows.iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Config(format!("no report named `{name}`")))
    };
    for (lo, hi) in expect {
        let (a, b) = (find(lo)?, find(hi)?);
        if a.params >= b.params {
            return Err(Error::OrderingViolation {
                first: a.name.clone(),
                first_value: a.params,
                second: b.name.clone(),
                second_value: b.params,
            });
        }
    }
    Ok(rows)
}

/// Reference budgets for the base preset: FPN about 8M parameters and
/// 9 GFLOPs, decoder about 9M parameters, whole model about 155 GFLOPs.
pub const PAPER_BUDGETS: [Budget; 4] = [
    Budget {
        what: "fpn params",
        reference: 8e6,
        tolerance: 0.25,
    },
    Budget {
        what: "fpn flops",
        reference: 9e9,
        tolerance: 0.25,
    },
    Budget {
        what: "decoder params",
        reference: 9e6,
        tolerance: 0.25,
    },
    Budget {
        what: "total flops",
        reference: 155e9,
        tolerance: 0.15,
    },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetResult {
    pub what: String,
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn check_paper_budgets(report: &ComplexityReport) -> Vec<BudgetResult> {
    let fpn = report.module("fpn").unwrap();
    let dec = report.module("decoder").unwrap();
    let values = [
        fpn.params as f64,
        fpn.flops.total() as f64,
        dec.params as f64,
        report.total_flops as f64,
    ];
    PAPER_BUDGETS
        .iter()
        .zip(values)
        .map(|(b, v)| BudgetResult {
            what: b.what.into(),
            value: v,
            reference: b.reference,
            tolerance: b.tolerance,
            pass: b.check(v),
        })
        .collect()
}
