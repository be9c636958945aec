//! `sris`: corpus generation, training, evaluation, ablations, complexity
//! accounting and attention probing.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use shared_ris::ablation::{run_variant, sweep, table, AblationRow, Variant};
use shared_ris::complexity::{check_paper_budgets, complexity_report};
use shared_ris::config::{RunConfig, SlotVariant};
use shared_ris::data::corpus::Corpus;
use shared_ris::data::{Normalization, SegSample, Split};
use shared_ris::embedding::Vocab;
use shared_ris::io::{read_mask_png, write_atomic, write_grid, write_mask_png};
use shared_ris::mask::BinaryMask;
use shared_ris::metrics::FinalizeOptions;
use shared_ris::model::SharedRis;
use shared_ris::probe::{forward_recorded, probe, render, Source};
use shared_ris::train::{check_model_config, evaluate, fit, score_masks, Checkpoint, FitOptions, RawCheckpoint, Trainer};
use shared_ris::Error;

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "sris", version, about = "Shared-encoder referring image segmentation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// `key = value` configuration file applied on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset: toy or base.
    #[arg(long, global = true, default_value = "toy")]
    preset: String,
    /// Root seed; overrides the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    /// Override any configuration key, e.g. `--set lr=5e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus into `--out`.
    Gen {
        #[arg(long, default_value_t = 256)]
        train: usize,
        #[arg(long, default_value_t = 64)]
        val: usize,
        /// Square canvas side in pixels.
        #[arg(long, default_value_t = 64)]
        canvas: usize,
    },
    /// Train a model and write checkpoints and logs into `--out`.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Continue from a checkpoint with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Ignore configuration mismatches with the checkpoint.
        #[arg(long)]
        force: bool,
        /// Cap on optimizer steps for this invocation.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint, or precomputed masks, on a split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, required_unless_present = "pred_dir")]
        ckpt: Option<PathBuf>,
        /// Directory of `{idx}.png` masks to score instead of a model.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Write one predicted mask PNG per sample.
        #[arg(long)]
        dump_masks: bool,
        /// Count IoU equal to a precision threshold as a hit.
        #[arg(long)]
        prec_inclusive: bool,
        #[arg(long)]
        force: bool,
    },
    /// Train fusion variants at a fixed budget and compare them.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// components, fpn-fusion or decoder-fusion.
        #[arg(long, conflicts_with_all = ["fpn", "decoder"])]
        sweep: Option<String>,
        #[arg(long)]
        fpn: Option<SlotVariant>,
        #[arg(long)]
        decoder: Option<SlotVariant>,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Optimizer steps per run.
        #[arg(long, default_value_t = 300)]
        steps: usize,
    },
    /// Print parameter counts and FLOP estimates.
    Count {
        #[arg(long, default_value_t = shared_ris::complexity::DEFAULT_TEXT_LEN)]
        text_len: usize,
        /// Fail unless the base-preset budgets hold.
        #[arg(long)]
        assert_paper_budgets: bool,
    },
    /// Write attention heatmaps for samples of a split.
    ProbeAttn {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// encoder, fpn, decoder or all.
        #[arg(long, default_value = "all")]
        source: String,
        #[arg(long, default_value = "val")]
        split: String,
        /// Number of samples to probe.
        #[arg(long, default_value_t = 8)]
        limit: usize,
        #[arg(long)]
        force: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Count { .. } => "count",
            Command::ProbeAttn { .. } => "probe-attn",
        }
    }
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Corpus directory written by `gen`; generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    n_train: usize,
    #[arg(long, default_value_t = 64)]
    n_val: usize,
}

fn workers() -> usize {
    std::env::var("SRIS_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
        .max(1)
}

fn resolve_config(g: &Global) -> Result<RunConfig, Error> {
    let mut run = RunConfig::preset(&g.preset)?;
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        run.apply_file_text(&text)?;
    }
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        run.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = g.seed {
        run.train.seed = seed;
    }
    run.model.validate()?;
    run.train.validate()?;
    Ok(run)
}

fn load_corpus(d: &DataArgs, run: &RunConfig) -> Result<Corpus, Error> {
    let corpus = match &d.data {
        Some(dir) => Corpus::load(dir)?,
        None => Corpus::generate_with_workers(
            run.train.seed,
            d.n_train,
            d.n_val,
            run.model.image_height,
            run.model.image_width,
            workers(),
        )?,
    };
    let [h, w] = corpus.manifest.canvas;
    if (h, w) != (run.model.image_height, run.model.image_width) {
        return Err(Error::Config(format!(
            "corpus canvas {h}x{w} differs from model input {}x{}",
            run.model.image_height, run.model.image_width
        )));
    }
    Ok(corpus)
}

fn split_of(corpus: &Corpus, name: &str) -> Result<Vec<SegSample>, Error> {
    match name {
        "train" => Ok(corpus.split(Split::Train).to_vec()),
        "val" => Ok(corpus.split(Split::Val).to_vec()),
        other => Err(Error::Config(format!("unknown split `{other}`"))),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Loads a checkpoint and checks it against the runtime configuration.
fn open_checkpoint(path: &Path, runtime: &RunConfig, force: bool) -> Result<(SharedRis, Checkpoint), Error> {
    let raw = RawCheckpoint::read(path)?;
    check_model_config(&raw.manifest.run, runtime, force)?;
    if raw.manifest.vocab_hash != Vocab::synthetic().hash() && !force {
        return Err(Error::ConfigMismatch("vocabulary".into()));
    }
    let model = SharedRis::new(raw.manifest.run.model.validate()?, 0.0);
    let ckpt = raw.into_checkpoint(&model)?;
    Ok((model, ckpt))
}

fn cmd_gen(g: &Global, run: &RunConfig, train: usize, val: usize, canvas: usize, m: &mut RunManifest) -> Result<(), Error> {
    let mut model = run.model.clone();
    model.image_height = canvas;
    model.image_width = canvas;
    model.validate()?;
    let corpus = Corpus::generate_with_workers(run.train.seed, train, val, canvas, canvas, workers())?;
    create_dir(&g.out)?;
    corpus.save(&g.out)?;
    m.artifacts.push(g.out.join("manifest.json"));
    println!("wrote {} train and {} val samples to {}", train, val, g.out.display());
    Ok(())
}

fn cmd_train(
    g: &Global,
    run: &RunConfig,
    data: &DataArgs,
    resume: Option<&Path>,
    force: bool,
    steps: Option<usize>,
    m: &mut RunManifest,
) -> Result<(), Error> {
    let corpus = load_corpus(data, run)?;
    let (train, val) = (corpus.split(Split::Train), corpus.split(Split::Val));
    let mut trainer = match resume {
        Some(path) => {
            let raw = RawCheckpoint::read(path)?;
            if !force {
                if let Some(key) = shared_ris::train::config_difference(&raw.manifest.run, run) {
                    return Err(Error::ConfigMismatch(key));
                }
            }
            let model = SharedRis::new(raw.manifest.run.model.validate()?, 0.0);
            let mut t = Trainer::resume(raw.into_checkpoint(&model)?, train.len())?;
            // A forced resume keeps the saved architecture but follows the
            // runtime schedule.
            if force {
                t.run.train = run.train.clone();
                t.total_steps = shared_ris::train::total_steps(&t.run, train.len());
            }
            t
        }
        None => Trainer::new(run.clone(), Normalization::fit(train), train.len())?,
    };
    create_dir(&g.out)?;
    let loss_path = g.out.join("loss.jsonl");
    let eval_path = g.out.join("evals.jsonl");
    let mut losses = String::new();
    let mut evals = String::new();
    let mut on_step = |s: &shared_ris::train::StepLog| {
        losses += &serde_json::to_string(s).unwrap();
        losses.push('\n');
        if s.step % 10 == 0 {
            eprintln!(
                "step {:>6} epoch {:>3} loss {:.5} (bce {:.5} dice {:.5}) lr {:.3e}",
                s.step, s.epoch, s.loss.total, s.loss.bce, s.loss.dice, s.lr
            );
        }
    };
    let mut on_eval = |e: &shared_ris::train::EvalLog| {
        evals += &serde_json::to_string(e).unwrap();
        evals.push('\n');
        eprintln!("eval after epoch {}: mIoU {:.4} oIoU {:.4}", e.epoch, e.report.miou, e.report.oiou);
    };
    let stop_at_step = steps.map(|s| trainer.state.step + s);
    let result = fit(
        &mut trainer,
        train,
        val,
        FitOptions {
            stop_at_step,
            on_step: Some(&mut on_step),
            on_eval: Some(&mut on_eval),
            ..Default::default()
        },
    )?;
    write_atomic(&loss_path, losses.as_bytes())?;
    write_atomic(&eval_path, evals.as_bytes())?;
    let best = g.out.join("best.ckpt");
    let last = g.out.join("last.ckpt");
    result.best.save(&best)?;
    result.last.save(&last)?;
    write_atomic(&g.out.join("config.txt"), run.to_file_text().as_bytes())?;
    m.artifacts.extend([loss_path, eval_path, best, last]);
    println!(
        "{}",
        json!({
            "steps": trainer.state.step,
            "best_miou": trainer.state.best_miou,
            "final_loss": result.steps.last().map(|s| s.loss.total),
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    g: &Global,
    run: &RunConfig,
    data: &DataArgs,
    ckpt: Option<&Path>,
    pred_dir: Option<&Path>,
    split: &str,
    dump_masks: bool,
    prec_inclusive: bool,
    force: bool,
    m: &mut RunManifest,
) -> Result<(), Error> {
    let opts = FinalizeOptions {
        prec_inclusive,
        ..Default::default()
    };
    let (samples, masks, report, per_family) = match (ckpt, pred_dir) {
        (_, Some(dir)) => {
            let corpus = load_corpus(data, run)?;
            let samples = split_of(&corpus, split)?;
            let masks = (0..samples.len())
                .map(|i| read_mask_png(&dir.join(format!("{i}.png"))))
                .collect::<Result<Vec<BinaryMask>, Error>>()?;
            let (report, per_family, _) = score_masks(&samples, &masks, &opts)?;
            (samples, masks, report, per_family)
        }
        (Some(path), None) => {
            let (model, ck) = open_checkpoint(path, run, force)?;
            let corpus = load_corpus(data, &ck.manifest.run)?;
            let samples = split_of(&corpus, split)?;
            let out = evaluate(
                &model,
                &ck.params,
                &ck.buffers,
                &samples,
                &Vocab::synthetic(),
                &ck.manifest.normalization,
                ck.manifest.run.train.batch_size,
                &opts,
            )?;
            (samples, out.masks, out.report, out.per_family)
        }
        (None, None) => unreachable!("clap requires one of --ckpt and --pred-dir"),
    };
    create_dir(&g.out)?;
    if dump_masks {
        let dir = g.out.join("masks");
        create_dir(&dir)?;
        for (i, mask) in masks.iter().enumerate() {
            write_mask_png(&dir.join(format!("{i}.png")), mask)?;
        }
        m.artifacts.push(dir);
    }
    let value = json!({ "split": split, "n_samples": samples.len(), "metrics": report, "per_family": per_family });
    let path = g.out.join("metrics.json");
    write_json(&path, &value)?;
    m.artifacts.push(path);
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn cmd_ablate(
    g: &Global,
    run: &RunConfig,
    data: &DataArgs,
    sweep_name: Option<&str>,
    fpn: Option<SlotVariant>,
    decoder: Option<SlotVariant>,
    seeds: &[u64],
    steps: usize,
    m: &mut RunManifest,
) -> Result<(), Error> {
    let variants = match sweep_name {
        Some(name) => sweep(name)?,
        None => vec![Variant::new(
            fpn.unwrap_or(run.model.fpn_fusion),
            decoder.unwrap_or(run.model.decoder_fusion),
        )],
    };
    let corpus = load_corpus(data, run)?;
    let mut base = run.clone();
    base.train.max_steps = steps;
    base.train.epochs = base.train.epochs.max(steps.div_ceil(corpus.split(Split::Train).len().div_ceil(base.train.batch_size)));
    let mut rows: Vec<AblationRow> = Vec::new();
    for v in &variants {
        let row = run_variant(&base, v, seeds, corpus.split(Split::Train), corpus.split(Split::Val), |v, seed, miou| {
            eprintln!("{} seed {seed}: val mIoU {miou:.4}", v.name)
        })?;
        rows.push(row);
    }
    create_dir(&g.out)?;
    let path = g.out.join("ablation.json");
    write_json(&path, &serde_json::to_value(&rows)?)?;
    m.artifacts.push(path);
    print!("{}", table(&rows));
    Ok(())
}

fn cmd_count(g: &Global, run: &RunConfig, text_len: usize, assert_budgets: bool, m: &mut RunManifest) -> Result<bool, Error> {
    let model = SharedRis::new(run.model.validate()?, 0.0);
    let report = complexity_report(&model, text_len);
    print!("{}", report.to_table());
    let budgets = assert_budgets.then(|| check_paper_budgets(&report));
    let value = json!({ "report": report, "budgets": budgets });
    create_dir(&g.out)?;
    let path = g.out.join("complexity.json");
    write_json(&path, &value)?;
    m.artifacts.push(path);
    println!("{}", serde_json::to_string(&value)?);
    let mut ok = true;
    for b in budgets.iter().flatten() {
        println!(
            "{} {}: {:.4e} vs {:.4e} (±{:.0}%)",
            if b.pass { "PASS" } else { "FAIL" },
            b.what,
            b.value,
            b.reference,
            100.0 * b.tolerance
        );
        ok &= b.pass;
    }
    Ok(ok)
}

#[allow(clippy::too_many_arguments)]
fn cmd_probe(
    g: &Global,
    run: &RunConfig,
    data: &DataArgs,
    ckpt: &Path,
    source: &str,
    split: &str,
    limit: usize,
    force: bool,
    m: &mut RunManifest,
) -> Result<(), Error> {
    let sources: Vec<Source> = if source == "all" {
        Source::ALL.to_vec()
    } else {
        vec![source.parse().map_err(Error::Config)?]
    };
    let (model, ck) = open_checkpoint(ckpt, run, force)?;
    let corpus = load_corpus(data, &ck.manifest.run)?;
    let samples = split_of(&corpus, split)?;
    let vocab = Vocab::synthetic();
    create_dir(&g.out)?;
    for (i, s) in samples.iter().take(limit).enumerate() {
        let images = ck.manifest.normalization.batch::<f32>(&[s]);
        let (_, records) = forward_recorded(&model, &ck.params, &ck.buffers, &images, &[vocab.tokenize(&s.expression)])?;
        for &src in &sources {
            let map = probe(&records, &model.config, 0, src)?;
            let png = g.out.join(format!("{i}_{}.png", src.name()));
            render(&map, &s.pixels, s.height, s.width, &png)?;
            let values: Vec<f32> = map.values.iter().map(|&v| v as f32).collect();
            write_grid(&g.out.join(format!("{i}_{}.bin", src.name())), map.height, map.width, &values)?;
            m.artifacts.push(png);
        }
    }
    println!("wrote {} heatmaps to {}", limit.min(samples.len()) * sources.len(), g.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Error> {
    let g = &cli.global;
    let run = resolve_config(g)?;
    let mut manifest = RunManifest::start(cli.command.name(), &run, std::env::args().collect());
    let manifest_path = g.out.join("run.json");
    create_dir(&g.out)?;
    manifest.write(&manifest_path)?;
    let mut ok = true;
    match &cli.command {
        Command::Gen { train, val, canvas } => cmd_gen(g, &run, *train, *val, *canvas, &mut manifest)?,
        Command::Train {
            data,
            resume,
            force,
            steps,
        } => cmd_train(g, &run, data, resume.as_deref(), *force, *steps, &mut manifest)?,
        Command::Eval {
            data,
            ckpt,
            pred_dir,
            split,
            dump_masks,
            prec_inclusive,
            force,
        } => cmd_eval(
            g,
            &run,
            data,
            ckpt.as_deref(),
            pred_dir.as_deref(),
            split,
            *dump_masks,
            *prec_inclusive,
            *force,
            &mut manifest,
        )?,
        Command::Ablate {
            data,
            sweep,
            fpn,
            decoder,
            seeds,
            steps,
        } => cmd_ablate(g, &run, data, sweep.as_deref(), *fpn, *decoder, seeds, *steps, &mut manifest)?,
        Command::Count {
            text_len,
            assert_paper_budgets,
        } => ok = cmd_count(g, &run, *text_len, *assert_paper_budgets, &mut manifest)?,
        Command::ProbeAttn {
            data,
            ckpt,
            source,
            split,
            limit,
            force,
        } => cmd_probe(g, &run, data, ckpt, source, split, *limit, *force, &mut manifest)?,
    }
    manifest.finish(ok);
    manifest.write(&manifest_path)?;
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
