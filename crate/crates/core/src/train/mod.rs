//! Optimization loop: batching and augmentation, AdamW steps, periodic
//! evaluation, best-model retention and resumable checkpoints.

pub mod checkpoint;
pub mod optimizer;

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{check_model_config, config_difference, Checkpoint, CheckpointManifest, RawCheckpoint};
pub use optimizer::{clip_global_norm, global_norm, lr_schedule, warmup_steps, AdamW};

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::data::{Family, Normalization, SegSample};
use crate::embedding::Vocab;
use crate::error::{Error, Result};
use crate::losses::{downsample_target, seg_loss_var, LossBreakdown};
use crate::mask::{binarize_and_resize, BinaryMask, ProbabilityMap};
use crate::metrics::{FinalizeOptions, MetricAccumulator, MetricReport};
use crate::model::{probability_maps, SharedRis};
use crate::params::{BufferStore, Ctx, Mode, ParamStore};
use crate::rng::stream;

/// Model inputs and targets for one batch.
pub struct Batch {
    /// `[B, h, w, 3]` normalized images.
    pub images: ArrayD<f32>,
    pub texts: Vec<Vec<usize>>,
    /// `[B, H_l, W_l]` ground truth at the probability-map resolution.
    pub targets: Rc<ArrayD<f32>>,
}

impl Batch {
    pub fn new(samples: &[&SegSample], vocab: &Vocab, norm: &Normalization, map_h: usize, map_w: usize) -> Self {
        let mut targets = Vec::with_capacity(samples.len() * map_h * map_w);
        for s in samples {
            targets.extend(downsample_target(&s.mask, map_h, map_w).to_f32());
        }
        Batch {
            images: norm.batch(samples),
            texts: samples.iter().map(|s| vocab.tokenize(&s.expression)).collect(),
            targets: Rc::new(ArrayD::from_shape_vec(IxDyn(&[samples.len(), map_h, map_w]), targets).unwrap()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub epoch: usize,
    pub step: usize,
    pub report: MetricReport,
}

/// Everything that changes while training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub buffers: BufferStore<f32>,
    pub opt: AdamW<f32>,
    pub step: usize,
    pub best_miou: Option<f64>,
}

pub struct Trainer {
    pub run: RunConfig,
    pub model: SharedRis,
    pub vocab: Vocab,
    pub norm: Normalization,
    pub state: TrainState,
    /// Schedule length.
    pub total_steps: usize,
    pub n_train: usize,
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Optimizer steps for a run over `n_train` samples.
pub fn total_steps(run: &RunConfig, n_train: usize) -> usize {
    let all = run.train.epochs * steps_per_epoch(n_train, run.train.batch_size);
    if run.train.max_steps > 0 {
        all.min(run.train.max_steps)
    } else {
        all
    }
}

impl Trainer {
    /// Fresh parameters from the `init` stream of the run seed.
    pub fn new(run: RunConfig, norm: Normalization, n_train: usize) -> Result<Self> {
        run.train.validate()?;
        let model = SharedRis::new(run.model.validate()?, run.train.stochastic_depth_prob);
        let params = model.init_params(&mut stream(run.train.seed, "init", 0));
        let buffers = model.init_buffers();
        let opt = AdamW::new(&run.train, &params);
        Ok(Trainer {
            total_steps: total_steps(&run, n_train),
            n_train,
            vocab: Vocab::synthetic(),
            norm,
            state: TrainState {
                params,
                buffers,
                opt,
                step: 0,
                best_miou: None,
            },
            model,
            run,
        })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(ckpt: Checkpoint, n_train: usize) -> Result<Self> {
        let run = ckpt.manifest.run.clone();
        let model = SharedRis::new(run.model.validate()?, run.train.stochastic_depth_prob);
        let opt = ckpt
            .optimizer
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state to resume from".into()))?;
        Ok(Trainer {
            total_steps: total_steps(&run, n_train),
            n_train,
            vocab: Vocab::synthetic(),
            norm: ckpt.manifest.normalization,
            state: TrainState {
                params: ckpt.params,
                buffers: ckpt.buffers,
                opt,
                step: ckpt.manifest.step,
                best_miou: ckpt.manifest.best_miou,
            },
            model,
            run,
        })
    }

    pub fn batch(&self, samples: &[&SegSample]) -> Batch {
        let c = &self.model.config;
        Batch::new(samples, &self.vocab, &self.norm, c.map_h, c.map_w)
    }

    /// Forward, loss, backward, clip, and one AdamW update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLog> {
        if batch.texts.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let tc = &self.run.train;
        let step = self.state.step;
        let lr = lr_schedule(step, self.total_steps, tc.lr, tc.warmup_fraction);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.state.params, &self.state.buffers, Mode::Train)
            .with_drop_rng(stream(tc.seed, "dropout", step as u64));
        let out = self.model.forward(&cx, &batch.images, &batch.texts)?;
        let (loss, breakdown) = seg_loss_var(out.probs, batch.targets.clone(), tc.lambda_bce, tc.lambda_dice)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                bce: breakdown.bce,
                dice: breakdown.dice,
            });
        }
        let grads = tape.backward(loss);
        let mut g: Vec<ArrayD<f32>> = cx.param_vars().iter().map(|&v| grads.get(v)).collect();
        let grad_norm = clip_global_norm(&mut g, tc.grad_clip_norm);
        let updates = cx.take_buffer_updates();
        drop(cx);
        self.state.opt.update(&mut self.state.params, &g, lr);
        for (id, value) in updates {
            self.state.buffers.set(id, value);
        }
        self.state.step += 1;
        Ok(StepLog {
            step,
            epoch: step / self.steps_per_epoch_hint(),
            lr,
            loss: breakdown,
            grad_norm,
        })
    }

    fn steps_per_epoch_hint(&self) -> usize {
        steps_per_epoch(self.n_train, self.run.train.batch_size).max(1)
    }

    pub fn evaluate(&self, samples: &[SegSample], opts: &FinalizeOptions) -> Result<EvalOutput> {
        evaluate(
            &self.model,
            &self.state.params,
            &self.state.buffers,
            samples,
            &self.vocab,
            &self.norm,
            self.run.train.batch_size,
            opts,
        )
    }

    pub fn checkpoint(&self, metrics: Option<MetricReport>, with_optimizer: bool) -> Checkpoint {
        let spe = self.steps_per_epoch_hint();
        Checkpoint {
            manifest: CheckpointManifest {
                run: self.run.clone(),
                step: self.state.step,
                epoch: self.state.step / spe,
                best_miou: self.state.best_miou,
                metrics,
                normalization: self.norm,
                vocab_hash: self.vocab.hash(),
            },
            params: self.state.params.clone(),
            buffers: self.state.buffers.clone(),
            optimizer: with_optimizer.then(|| self.state.opt.clone()),
        }
    }
}

/// Eval-mode probability maps for `samples`, in order.
pub fn predict_samples(
    model: &SharedRis,
    params: &ParamStore<f32>,
    buffers: &BufferStore<f32>,
    samples: &[SegSample],
    vocab: &Vocab,
    norm: &Normalization,
    batch_size: usize,
) -> Result<Vec<ProbabilityMap>> {
    let mut maps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let texts: Vec<Vec<usize>> = chunk.iter().map(|s| vocab.tokenize(&s.expression)).collect();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, params, buffers, Mode::Eval);
        let out = model.forward(&cx, &norm.batch(&refs), &texts)?;
        maps.extend(probability_maps(&out.probs.value()));
    }
    Ok(maps)
}

/// Mean IoU over the samples of one template family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyScore {
    pub family: Family,
    pub miou: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: MetricReport,
    pub per_family: Vec<FamilyScore>,
    pub ious: Vec<f64>,
    pub maps: Vec<ProbabilityMap>,
    /// Thresholded predictions at the image resolution.
    pub masks: Vec<BinaryMask>,
}

/// Scores precomputed predictions against their samples.
pub fn score_masks(samples: &[SegSample], masks: &[BinaryMask], opts: &FinalizeOptions) -> Result<(MetricReport, Vec<FamilyScore>, Vec<f64>)> {
    let mut acc = MetricAccumulator::new();
    for (pred, s) in masks.iter().zip(samples) {
        acc.update(pred, &s.mask, s.height * s.width)?;
    }
    let ious = acc.per_sample_ious.clone();
    let per_family = Family::ALL
        .iter()
        .filter_map(|&family| {
            let v: Vec<f64> = samples.iter().zip(&ious).filter(|(s, _)| s.family == family).map(|(_, &i)| i).collect();
            (!v.is_empty()).then(|| FamilyScore {
                family,
                miou: v.iter().sum::<f64>() / v.len() as f64,
                count: v.len(),
            })
        })
        .collect();
    Ok((acc.finalize_with(opts)?, per_family, ious))
}

/// Metrics at the image resolution after thresholding and resizing.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &SharedRis,
    params: &ParamStore<f32>,
    buffers: &BufferStore<f32>,
    samples: &[SegSample],
    vocab: &Vocab,
    norm: &Normalization,
    batch_size: usize,
    opts: &FinalizeOptions,
) -> Result<EvalOutput> {
    let maps = predict_samples(model, params, buffers, samples, vocab, norm, batch_size)?;
    let masks: Vec<BinaryMask> = maps
        .iter()
        .zip(samples)
        .map(|(m, s)| binarize_and_resize(m, model.config.mask_threshold, s.height, s.width))
        .collect();
    let (report, per_family, ious) = score_masks(samples, &masks, opts)?;
    Ok(EvalOutput {
        report,
        per_family,
        ious,
        maps,
        masks,
    })
}

/// Sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "shuffle", epoch as u64));
    order
}

/// Per-sample horizontal-flip decisions for one step.
pub fn flip_decisions(seed: u64, step: usize, n: usize, prob: f64) -> Vec<bool> {
    let mut rng = stream(seed, "augment", step as u64);
    (0..n).map(|_| rng.random_bool(prob)).collect()
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Stop (without finishing the schedule) once this many steps are done.
    pub stop_at_step: Option<usize>,
    pub on_step: Option<&'a mut dyn FnMut(&StepLog)>,
    pub on_eval: Option<&'a mut dyn FnMut(&EvalLog)>,
    pub finalize: FinalizeOptions,
}

pub struct FitResult {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    /// Highest validation mIoU seen; the initialization if no eval ran.
    pub best: Checkpoint,
    /// State at the end, with optimizer moments.
    pub last: Checkpoint,
}

/// Runs the remaining schedule of `trainer` over `train`, evaluating on
/// `val` every `eval_every` epochs and at the end.
pub fn fit(trainer: &mut Trainer, train: &[SegSample], val: &[SegSample], mut opts: FitOptions<'_>) -> Result<FitResult> {
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let tc = trainer.run.train.clone();
    let spe = steps_per_epoch(train.len(), tc.batch_size);
    let total = trainer.total_steps;
    let stop = opts.stop_at_step.unwrap_or(total).min(total);
    let mut steps = Vec::new();
    let mut evals = Vec::new();
    let mut best = trainer.checkpoint(None, false);
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;

    while trainer.state.step < stop {
        let step = trainer.state.step;
        let (epoch, slot) = (step / spe, step % spe);
        if order_epoch != epoch {
            order = epoch_order(tc.seed, epoch, train.len());
            order_epoch = epoch;
        }
        let idx = &order[slot * tc.batch_size..((slot + 1) * tc.batch_size).min(train.len())];
        let flips = flip_decisions(tc.seed, step, idx.len(), tc.hflip_prob);
        let owned: Vec<SegSample> = idx
            .iter()
            .zip(&flips)
            .map(|(&i, &f)| if f { train[i].flip_horizontal() } else { train[i].clone() })
            .collect();
        let refs: Vec<&SegSample> = owned.iter().collect();
        let batch = trainer.batch(&refs);
        let mut log = trainer.train_step(&batch)?;
        log.epoch = epoch;
        if let Some(f) = opts.on_step.as_mut() {
            f(&log);
        }
        steps.push(log);

        let done = trainer.state.step;
        let epoch_end = done % spe == 0 || done == total;
        let finished_epochs = done.div_ceil(spe);
        if !val.is_empty() && epoch_end && (finished_epochs % tc.eval_every == 0 || done == total) {
            let report = trainer.evaluate(val, &opts.finalize)?.report;
            if trainer.state.best_miou.is_none_or(|b| report.miou > b) {
                trainer.state.best_miou = Some(report.miou);
                best = trainer.checkpoint(Some(report.clone()), false);
            }
            let e = EvalLog {
                epoch: finished_epochs,
                step: done,
                report,
            };
            if let Some(f) = opts.on_eval.as_mut() {
                f(&e);
            }
            evals.push(e);
        }
    }
    Ok(FitResult {
        steps,
        evals,
        best,
        last: trainer.checkpoint(None, true),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{toy_config, ModelConfig, TrainConfig};
    use crate::data::make_split;

    fn tiny_run(epochs: usize) -> RunConfig {
        RunConfig {
            model: ModelConfig {
                image_height: 32,
                image_width: 32,
                embed_dim: 16,
                encoder_layers: 2,
                tap_stages: vec![1, 2],
                fpn_dim: 8,
                ..toy_config()
            },
            train: TrainConfig {
                epochs,
                batch_size: 4,
                ..TrainConfig::toy()
            },
        }
    }

    fn data() -> (Vec<SegSample>, Vec<SegSample>) {
        make_split(11, 10, 4, 32, 32).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (train, val) = data();
        let mut t = Trainer::new(tiny_run(0), Normalization::fit(&train), train.len()).unwrap();
        let init = t.state.params.clone();
        let r = fit(&mut t, &train, &val, FitOptions::default()).unwrap();
        assert!(r.steps.is_empty());
        for ((_, a), (_, b)) in r.best.params.iter().zip(init.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn same_seed_same_losses_and_resume_matches() {
        let (train, val) = data();
        let norm = Normalization::fit(&train);
        let run = tiny_run(2);
        let full = {
            let mut t = Trainer::new(run.clone(), norm, train.len()).unwrap();
            fit(&mut t, &train, &val, FitOptions::default()).unwrap()
        };
        assert_eq!(full.steps.len(), 6);
        assert_eq!(full.evals.len(), 2);
        let again = {
            let mut t = Trainer::new(run.clone(), norm, train.len()).unwrap();
            fit(&mut t, &train, &val, FitOptions::default()).unwrap()
        };
        assert_eq!(full.steps, again.steps);

        // Interrupt after 4 steps, persist, reload and finish.
        let mut t = Trainer::new(run, norm, train.len()).unwrap();
        let first = fit(
            &mut t,
            &train,
            &val,
            FitOptions {
                stop_at_step: Some(4),
                ..Default::default()
            },
        )
        .unwrap();
        let bytes = first.last.to_bytes().unwrap();
        let raw = RawCheckpoint::from_bytes(&bytes).unwrap();
        let ckpt = raw.into_checkpoint(&t.model).unwrap();
        let mut resumed = Trainer::resume(ckpt, train.len()).unwrap();
        let rest = fit(&mut resumed, &train, &val, FitOptions::default()).unwrap();
        let joined: Vec<StepLog> = first.steps.iter().chain(&rest.steps).copied().collect();
        assert_eq!(joined, full.steps);
    }

    #[test]
    fn inert_stochastic_depth_ignores_its_rng() {
        let (train, _) = data();
        let mut run = tiny_run(1);
        run.train.stochastic_depth_prob = 0.0;
        let t = Trainer::new(run, Normalization::fit(&train), train.len()).unwrap();
        let refs: Vec<&SegSample> = train.iter().take(2).collect();
        let b = t.batch(&refs);
        let out = |seed: u64| {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &t.state.params, &t.state.buffers, Mode::Train).with_drop_rng(stream(seed, "dropout", 0));
            (*t.model.forward(&cx, &b.images, &b.texts).unwrap().probs.value()).clone()
        };
        assert_eq!(out(1), out(2));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (train, _) = data();
        let mut t = Trainer::new(tiny_run(1), Normalization::fit(&train), train.len()).unwrap();
        let id = t.state.params.id("decoder.head.fc2.bias").unwrap();
        t.state.params.get_mut(id).fill(f32::NAN);
        let refs: Vec<&SegSample> = train.iter().take(2).collect();
        let b = t.batch(&refs);
        assert!(matches!(t.train_step(&b), Err(Error::NonFiniteLoss { step: 0, .. })));
    }

    #[test]
    fn shuffles_are_permutations_seeded_by_epoch() {
        let a = epoch_order(3, 0, 50);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(3, 0, 50));
        assert_ne!(a, epoch_order(3, 1, 50));
        let flips = flip_decisions(1, 0, 1000, 0.5);
        let n = flips.iter().filter(|&&f| f).count();
        assert!((400..600).contains(&n));
    }
}
