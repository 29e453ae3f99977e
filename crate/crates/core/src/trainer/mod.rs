//! Pretraining and fine-tuning loops.
//!
//! Epochs are effective epochs (samples seen / dataset size, independent of
//! the repeat factor). Per-sample mask seeds are derived from
//! `(run seed, epoch, sample index)`, so a run is reproducible from its
//! configuration alone. Batch samples may be evaluated on several workers;
//! per-sample results are always reduced in sample order, which keeps the
//! arithmetic identical to the single-threaded mode.

mod metrics;
mod optim;

pub use metrics::{render_config_echo, write_metrics_csv, StepMetric};
pub use optim::{adamw_step, clip_gradients, LrSchedule, OptimHyper, OptimState};

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_model;
use crate::error::{MaeError, Result};
use crate::masking::{MaskPlan, MaskSchedule};
use crate::model::{
    forward_classify, forward_pretrain, ClassifierHead, MaeConfig, MaeModel,
};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tensor::Tensor;
use crate::video::{Dataset, Loader, SamplePipeline, VideoClip};

/// Run-level hyperparameters; serialized into manifests and the config echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub repeat_factor: usize,
    /// Global-norm clip threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Checkpoint every this many epochs (0 = final checkpoint only).
    pub eval_interval: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Worker cap for per-sample forward/backward; reduction order is fixed
    /// either way, and 1 is the fully deterministic reference mode.
    pub threads: usize,
    /// Write zeros for the timing columns of the metrics log so that
    /// re-runs produce byte-identical files.
    pub deterministic: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.repeat_factor == 0 {
            return Err(MaeError::Config(
                "epochs, batch_size, repeat_factor must be >= 1".to_string(),
            ));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(MaeError::Config(format!(
                "warmup_epochs {} must be < epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.base_lr <= 0.0 {
            return Err(MaeError::Config("base_lr must be positive".to_string()));
        }
        if self.threads == 0 {
            return Err(MaeError::Config("threads must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn optim_hyper(&self) -> OptimHyper {
        OptimHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.adam_eps,
        }
    }
}

/// Result of a pretraining run.
pub struct PretrainOutcome {
    pub model: MaeModel<f32>,
    pub metrics: Vec<StepMetric>,
}

/// Result of a fine-tuning run.
#[derive(Debug)]
pub struct FinetuneOutcome {
    pub model: MaeModel<f32>,
    pub head: ClassifierHead<f32>,
    /// Top-1 accuracy on the evaluation set (the training set when no
    /// separate evaluation set is given).
    pub accuracy: f64,
    pub metrics: Vec<StepMetric>,
    /// Encoder tokens per sample at each step (masked fine-tuning shrinks
    /// this as the schedule anneals).
    pub step_tokens: Vec<usize>,
    /// Measured per-step durations; real even in deterministic mode.
    pub step_wall_ms: Vec<f64>,
}

/// Evaluates per-sample jobs on up to `threads` workers, preserving the
/// input order of results.
fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut results: Vec<Result<Vec<R>>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for piece in items.chunks(chunk) {
            let f = &f;
            handles.push(scope.spawn(move || piece.iter().map(f).collect::<Result<Vec<R>>>()));
        }
        for handle in handles {
            results.push(handle.join().expect("trainer worker panicked"));
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Averages per-sample gradient lists in sample order.
fn average_gradients(
    per_sample: &[Vec<Option<Tensor<f32>>>],
) -> Vec<Option<Tensor<f32>>> {
    let n = per_sample.len();
    let scale = 1.0 / n as f32;
    let slots = per_sample[0].len();
    let mut out: Vec<Option<Tensor<f32>>> = (0..slots).map(|_| None).collect();
    for sample in per_sample {
        for (slot, grad) in sample.iter().enumerate() {
            let Some(grad) = grad else { continue };
            match &mut out[slot] {
                Some(acc) => {
                    for (a, &g) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += g;
                    }
                }
                None => out[slot] = Some(grad.clone()),
            }
        }
    }
    for acc in out.iter_mut().flatten() {
        for a in acc.data_mut() {
            *a *= scale;
        }
    }
    out
}

struct EpochSchedule {
    samples_per_epoch: usize,
    total_samples: usize,
    lr: LrSchedule,
}

impl EpochSchedule {
    fn new(run: &RunConfig, dataset_len: usize) -> Self {
        let samples_per_epoch = dataset_len;
        let total_samples = run.epochs * samples_per_epoch;
        let steps_per_epoch = samples_per_epoch as f64 / run.batch_size as f64;
        let total_steps = (run.epochs as f64 * steps_per_epoch).ceil() as u64;
        let warmup_steps = (run.warmup_epochs as f64 * steps_per_epoch).round() as u64;
        EpochSchedule {
            samples_per_epoch,
            total_samples,
            lr: LrSchedule {
                base_lr: run.base_lr,
                warmup_steps,
                total_steps,
            },
        }
    }
}

fn echo_common(
    config: &MaeConfig,
    run: &RunConfig,
    pipeline: &SamplePipeline,
    schedule: &EpochSchedule,
) -> Vec<(String, String)> {
    let mut entries = vec![
        ("batch_size".to_string(), run.batch_size.to_string()),
        ("epochs".to_string(), run.epochs.to_string()),
        ("warmup_epochs".to_string(), run.warmup_epochs.to_string()),
        ("learning_rate".to_string(), run.base_lr.to_string()),
        (
            "optimizer_momentum".to_string(),
            format!("{}, {}", run.beta1, run.beta2),
        ),
        ("weight_decay".to_string(), run.weight_decay.to_string()),
        ("adam_eps".to_string(), run.adam_eps.to_string()),
        (
            "gradient_clipping".to_string(),
            run.grad_clip.map_or("none".to_string(), |v| v.to_string()),
        ),
        (
            "repeated_sampling".to_string(),
            run.repeat_factor.to_string(),
        ),
        ("seed".to_string(), run.seed.to_string()),
        ("threads".to_string(), run.threads.to_string()),
        ("deterministic".to_string(), run.deterministic.to_string()),
        ("eval_interval".to_string(), run.eval_interval.to_string()),
        ("total_steps".to_string(), schedule.lr.total_steps.to_string()),
        (
            "warmup_steps".to_string(),
            schedule.lr.warmup_steps.to_string(),
        ),
        (
            "weight_decay_exclusions".to_string(),
            "biases, layer-norm parameters, positional tables, mask token".to_string(),
        ),
        (
            "patch".to_string(),
            format!(
                "{}x{}x{} ({} channels)",
                config.patch.t_patch, config.patch.p, config.patch.p, config.patch.in_channels
            ),
        ),
        (
            "encoder".to_string(),
            format!(
                "{}d x {} blocks x {} heads",
                config.d_enc, config.depth_enc, config.heads_enc
            ),
        ),
        (
            "decoder".to_string(),
            format!(
                "{}d x {} blocks x {} heads",
                config.d_dec, config.depth_dec, config.heads_dec
            ),
        ),
        ("mlp_ratio".to_string(), config.mlp_ratio.to_string()),
        ("mask_ratio".to_string(), config.mask_ratio.to_string()),
        ("mask_sampler".to_string(), config.sampler.to_string()),
        (
            "target_normalize".to_string(),
            config.target_normalize.to_string(),
        ),
        (
            "augmentation".to_string(),
            format!(
                "hflip {}, crop [{}, {}]",
                pipeline.hflip_prob, pipeline.scale_range.0, pipeline.scale_range.1
            ),
        ),
        (
            "frame_sampling".to_string(),
            format!("{}x{}", pipeline.num_frames, pipeline.stride),
        ),
        (
            "input_size".to_string(),
            format!("{}x{}x{}", pipeline.num_frames, pipeline.out_h, pipeline.out_w),
        ),
    ];
    entries.sort();
    entries
}

fn write_artifacts(
    out_dir: Option<&Path>,
    model: &MaeModel<f32>,
    extras: &[(String, Tensor<f32>)],
    metrics: &[StepMetric],
    echo: &[(String, String)],
) -> Result<()> {
    let Some(dir) = out_dir else { return Ok(()) };
    std::fs::create_dir_all(dir)?;
    save_model(&dir.join("final.ckpt"), model, extras)?;
    write_metrics_csv(&dir.join("metrics.csv"), metrics)?;
    std::fs::write(dir.join("config_echo.txt"), render_config_echo(echo))?;
    Ok(())
}

/// Pretrains a fresh model on the dataset; returns it with the per-step
/// metrics. With `out_dir` set, writes `final.ckpt`, `metrics.csv`,
/// `config_echo.txt`, and periodic checkpoints.
pub fn pretrain(
    dataset: &Dataset,
    config: MaeConfig,
    run: &RunConfig,
    pipeline: SamplePipeline,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    run.validate()?;
    let grid = config.patch.grid_for((
        pipeline.num_frames,
        pipeline.out_h,
        pipeline.out_w,
        config.patch.in_channels,
    ))?;
    let mut model = MaeModel::<f32>::init(config, grid, run.seed)?;
    let loader = Loader::new(dataset, pipeline, run.batch_size, run.repeat_factor, run.seed)?;
    let schedule = EpochSchedule::new(run, dataset.len());

    let mut optim = OptimState::new(run.optim_hyper(), model.named_params().len());
    let mut metrics: Vec<StepMetric> = Vec::new();
    let mut samples_seen = 0usize;
    let mut step = 0u64;
    let started = Instant::now();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    'training: for traversal in 0.. {
        for batch in loader.batches(traversal) {
            if samples_seen >= schedule.total_samples {
                break 'training;
            }
            let mut batch = batch?;
            let remaining = schedule.total_samples - samples_seen;
            if batch.len() > remaining {
                batch.clips.truncate(remaining);
                batch.seeds.truncate(remaining);
            }

            let jobs: Vec<(VideoClip, MaskPlan)> = batch
                .clips
                .iter()
                .enumerate()
                .map(|(i, clip)| {
                    let global = samples_seen + i;
                    let epoch = (global / schedule.samples_per_epoch) as u64;
                    let index = (global % schedule.samples_per_epoch) as u64;
                    let mask_seed = derive_seed(&[run.seed, stream::MASK, epoch, index]);
                    let plan = MaskPlan::sample(
                        config.sampler,
                        grid,
                        config.mask_ratio,
                        mask_seed,
                    )?;
                    Ok((clip.clone(), plan))
                })
                .collect::<Result<_>>()?;

            let step_started = Instant::now();
            let results = parallel_map(&jobs, run.threads, |(clip, plan)| {
                let pass = forward_pretrain(&model, clip, plan)?;
                let loss = pass.loss();
                let grads = pass.into_gradients()?;
                Ok((loss, grads))
            })?;
            let step_elapsed = step_started.elapsed().as_secs_f64();

            let batch_loss =
                results.iter().map(|(l, _)| *l as f64).sum::<f64>() / results.len() as f64;
            if !batch_loss.is_finite() {
                return Err(MaeError::NonFinite {
                    what: "loss",
                    name: format!("pretrain step {}", step + 1),
                });
            }
            let per_sample: Vec<Vec<Option<Tensor<f32>>>> =
                results.into_iter().map(|(_, g)| g).collect();
            let mut grads = average_gradients(&per_sample);
            if let Some(max_norm) = run.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            let lr_now = schedule.lr.lr_at(step);
            let mut params = model.flat_params_mut();
            adamw_step(&mut params, &grads, &mut optim, lr_now)?;
            drop(params);

            let epoch_before = samples_seen / schedule.samples_per_epoch;
            samples_seen += jobs.len();
            step += 1;

            let visible_tokens: usize = jobs.iter().map(|(_, p)| p.visible.len()).sum();
            let (tokens_per_sec, wall_ms) = if run.deterministic {
                (0.0, 0.0)
            } else {
                (
                    visible_tokens as f64 / step_elapsed.max(1e-9),
                    started.elapsed().as_secs_f64() * 1e3,
                )
            };
            metrics.push(StepMetric {
                step,
                epoch: epoch_before as u64,
                lr: lr_now,
                loss: batch_loss,
                tokens_per_sec,
                wall_ms,
            });

            // periodic checkpoints at epoch boundaries
            let epoch_after = samples_seen / schedule.samples_per_epoch;
            if let Some(dir) = out_dir {
                if run.eval_interval > 0
                    && epoch_after > epoch_before
                    && epoch_after % run.eval_interval == 0
                    && samples_seen < schedule.total_samples
                {
                    save_model(&dir.join(format!("ckpt_epoch{epoch_after:04}.ckpt")), &model, &[])?;
                }
            }
        }
    }

    let echo = echo_common(&config, run, &pipeline, &schedule);
    write_artifacts(out_dir, &model, &[], &metrics, &echo)?;
    Ok(PretrainOutcome { model, metrics })
}

/// Fine-tunes a classifier on a labeled dataset, from a pretrained model or
/// from scratch. The mask schedule controls per-step masked fine-tuning
/// (constant 0 = standard dense fine-tuning); it is sampled at the run's
/// step resolution.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    dataset: &Dataset,
    eval_dataset: Option<&Dataset>,
    init: Option<&MaeModel<f32>>,
    config: MaeConfig,
    run: &RunConfig,
    pipeline: SamplePipeline,
    mask_schedule: &MaskSchedule,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    run.validate()?;
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| MaeError::Config("fine-tuning needs a labeled dataset".to_string()))?;
    let mut num_classes = labels.iter().copied().max().map_or(0, |m| m + 1) as usize;
    if let Some(eval) = eval_dataset {
        let eval_max = eval
            .labels
            .as_ref()
            .ok_or_else(|| MaeError::Config("evaluation set has no labels".to_string()))?
            .iter()
            .copied()
            .max()
            .map_or(0, |m| m + 1) as usize;
        num_classes = num_classes.max(eval_max);
    }
    if num_classes < 2 {
        return Err(MaeError::Config(format!(
            "need at least two classes, found {num_classes}"
        )));
    }

    let grid = config.patch.grid_for((
        pipeline.num_frames,
        pipeline.out_h,
        pipeline.out_w,
        config.patch.in_channels,
    ))?;
    let mut model = match init {
        Some(m) => {
            if m.grid != grid || m.config.patch != config.patch {
                return Err(MaeError::Contract(format!(
                    "checkpoint geometry {:?} does not match run geometry {:?}",
                    m.grid, grid
                )));
            }
            m.clone()
        }
        None => MaeModel::<f32>::init(config, grid, run.seed)?,
    };
    let mut head = ClassifierHead::<f32>::init(model.config.d_enc, num_classes, run.seed);

    let loader = Loader::new(dataset, pipeline, run.batch_size, run.repeat_factor, run.seed)?;
    let schedule = EpochSchedule::new(run, dataset.len());
    let n_model_params = model.named_params().len();
    let mut optim = OptimState::new(run.optim_hyper(), n_model_params + 2);

    let mut metrics = Vec::new();
    let mut step_tokens = Vec::new();
    let mut step_wall_ms = Vec::new();
    let mut samples_seen = 0usize;
    let mut step = 0u64;
    let started = Instant::now();

    'training: for traversal in 0.. {
        for batch in loader.batches(traversal) {
            if samples_seen >= schedule.total_samples {
                break 'training;
            }
            let mut batch = batch?;
            let remaining = schedule.total_samples - samples_seen;
            if batch.len() > remaining {
                batch.clips.truncate(remaining);
                batch.seeds.truncate(remaining);
                if let Some(labels) = &mut batch.labels {
                    labels.truncate(remaining);
                }
            }
            let batch_labels = batch.labels.clone().expect("labeled loader");

            // mask ratio for this step, sampled at the schedule's resolution
            let sched_step = ((step * mask_schedule.total_steps as u64)
                / schedule.lr.total_steps.max(1)) as usize;
            let ratio_now = mask_schedule.ratio_at(sched_step.min(mask_schedule.total_steps))?;

            let jobs: Vec<(VideoClip, MaskPlan, usize)> = batch
                .clips
                .iter()
                .zip(&batch_labels)
                .enumerate()
                .map(|(i, (clip, &label))| {
                    let global = samples_seen + i;
                    let epoch = (global / schedule.samples_per_epoch) as u64;
                    let index = (global % schedule.samples_per_epoch) as u64;
                    let mask_seed = derive_seed(&[run.seed, stream::MASK, epoch, index]);
                    let plan =
                        MaskPlan::sample(model.config.sampler, grid, ratio_now, mask_seed)?;
                    Ok((clip.clone(), plan, label as usize))
                })
                .collect::<Result<_>>()?;

            let step_started = Instant::now();
            let results = parallel_map(&jobs, run.threads, |(clip, plan, label)| {
                let pass = forward_classify(&model, &head, clip, plan, Some(*label))?;
                let loss = pass.loss().expect("labeled pass has a loss");
                let grads = pass.into_gradients()?;
                Ok((loss, grads))
            })?;
            let step_elapsed = step_started.elapsed().as_secs_f64();

            let batch_loss =
                results.iter().map(|(l, _)| *l as f64).sum::<f64>() / results.len() as f64;
            if !batch_loss.is_finite() {
                return Err(MaeError::NonFinite {
                    what: "loss",
                    name: format!("finetune step {}", step + 1),
                });
            }
            let per_sample: Vec<Vec<Option<Tensor<f32>>>> =
                results.into_iter().map(|(_, g)| g).collect();
            let mut grads = average_gradients(&per_sample);
            if let Some(max_norm) = run.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            let lr_now = schedule.lr.lr_at(step);
            {
                let mut params = model.flat_params_mut();
                params.push(("classifier.weight".to_string(), &mut head.weight, true));
                params.push(("classifier.bias".to_string(), &mut head.bias, false));
                adamw_step(&mut params, &grads, &mut optim, lr_now)?;
            }

            let epoch_before = samples_seen / schedule.samples_per_epoch;
            samples_seen += jobs.len();
            step += 1;

            let tokens_per_sample = jobs.first().map_or(0, |(_, p, _)| p.visible.len());
            step_tokens.push(tokens_per_sample);
            step_wall_ms.push(step_elapsed * 1e3);
            let visible_tokens: usize = jobs.iter().map(|(_, p, _)| p.visible.len()).sum();
            let (tokens_per_sec, wall_ms) = if run.deterministic {
                (0.0, 0.0)
            } else {
                (
                    visible_tokens as f64 / step_elapsed.max(1e-9),
                    started.elapsed().as_secs_f64() * 1e3,
                )
            };
            metrics.push(StepMetric {
                step,
                epoch: epoch_before as u64,
                lr: lr_now,
                loss: batch_loss,
                tokens_per_sec,
                wall_ms,
            });
        }
    }

    let accuracy = evaluate_accuracy(&model, &head, eval_dataset.unwrap_or(dataset), &pipeline)?;

    let echo = {
        let mut entries = echo_common(&model.config, run, &pipeline, &schedule);
        entries.push(("final_accuracy".to_string(), accuracy.to_string()));
        entries.push((
            "mask_schedule".to_string(),
            format!(
                "{:?} {} -> {} over {} steps",
                mask_schedule.shape,
                mask_schedule.start_ratio,
                mask_schedule.end_ratio,
                mask_schedule.total_steps
            ),
        ));
        entries.push((
            "init".to_string(),
            if init.is_some() { "checkpoint" } else { "scratch" }.to_string(),
        ));
        entries.sort();
        entries
    };
    let extras = vec![
        ("classifier.weight".to_string(), head.weight.clone()),
        ("classifier.bias".to_string(), head.bias.clone()),
    ];
    write_artifacts(out_dir, &model, &extras, &metrics, &echo)?;
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("accuracy.txt"), format!("{accuracy}\n"))?;
    }

    Ok(FinetuneOutcome {
        model,
        head,
        accuracy,
        metrics,
        step_tokens,
        step_wall_ms,
    })
}

/// Top-1 accuracy with dense (ratio-0) classification. Clips pass through a
/// deterministic variant of the pipeline (no crop scaling, no flip).
pub fn evaluate_accuracy(
    model: &MaeModel<f32>,
    head: &ClassifierHead<f32>,
    dataset: &Dataset,
    pipeline: &SamplePipeline,
) -> Result<f64> {
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| MaeError::Config("evaluation needs labels".to_string()))?;
    let eval_pipeline = SamplePipeline {
        scale_range: (1.0, 1.0),
        hflip_prob: 0.0,
        ..*pipeline
    };
    let dense = MaskPlan::sample(model.config.sampler, model.grid, 0.0, 0)?;
    let mut correct = 0usize;
    for (i, (clip, &label)) in dataset.clips.iter().zip(labels).enumerate() {
        let mut rng = rng_for(&[stream::DATA, i as u64]);
        let sample = eval_pipeline.apply(clip, &mut rng)?;
        let logits = crate::model::classify(model, head, &sample, &dense)?;
        let row = logits.row(0);
        let predicted = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(c, _)| c)
            .unwrap();
        if predicted == label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}
