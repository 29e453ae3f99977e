//! Repeated-sampling batch loader.
//!
//! Each time a source clip is decoded it contributes `repeat_factor`
//! independently augmented samples, amortizing the decode. Epochs are
//! counted as effective epochs: one epoch means the number of samples seen
//! equals the dataset size, regardless of the repeat factor; one traversal
//! (every source decoded once) therefore covers `repeat_factor` epochs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MaeError, Result};
use crate::rng::{derive_seed, rng_for, stream};
use crate::video::{augment, sample_clip, Dataset, VideoClip};

/// Per-sample decode pipeline: temporal sampling followed by random
/// resized crop and flip.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplePipeline {
    pub num_frames: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
}

impl SamplePipeline {
    /// Pipeline that reproduces a clip of the given dims unchanged.
    pub fn identity(t: usize, h: usize, w: usize) -> Self {
        SamplePipeline {
            num_frames: t,
            stride: 1,
            out_h: h,
            out_w: w,
            scale_range: (1.0, 1.0),
            hflip_prob: 0.0,
        }
    }

    pub fn apply<R: Rng>(&self, clip: &VideoClip, rng: &mut R) -> Result<VideoClip> {
        let sampled = sample_clip(clip, self.num_frames, self.stride, rng)?;
        augment(
            &sampled,
            self.out_h,
            self.out_w,
            self.scale_range,
            self.hflip_prob,
            rng,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.num_frames == 0 || self.stride == 0 || self.out_h == 0 || self.out_w == 0 {
            return Err(MaeError::Config(
                "pipeline extents must be >= 1".to_string(),
            ));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(MaeError::Config(format!(
                "pipeline scale range invalid: ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// One batch of decoded, augmented samples.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub clips: Vec<VideoClip>,
    pub labels: Option<Vec<u32>>,
    /// Per-sample augmentation seeds, for reproducing any one sample.
    pub seeds: Vec<u64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Deterministic epoch-accounted loader over a dataset.
pub struct Loader<'a> {
    dataset: &'a Dataset,
    pipeline: SamplePipeline,
    batch_size: usize,
    repeat_factor: usize,
    seed: u64,
}

impl<'a> Loader<'a> {
    pub fn new(
        dataset: &'a Dataset,
        pipeline: SamplePipeline,
        batch_size: usize,
        repeat_factor: usize,
        seed: u64,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(MaeError::Config("dataset is empty".to_string()));
        }
        if repeat_factor == 0 || batch_size == 0 {
            return Err(MaeError::Config(
                "batch_size and repeat_factor must be >= 1".to_string(),
            ));
        }
        if batch_size % repeat_factor != 0 {
            return Err(MaeError::Config(format!(
                "batch_size {batch_size} not divisible by repeat_factor {repeat_factor}"
            )));
        }
        pipeline.validate()?;
        Ok(Loader {
            dataset,
            pipeline,
            batch_size,
            repeat_factor,
            seed,
        })
    }

    /// Samples per effective epoch: the dataset size.
    pub fn samples_per_epoch(&self) -> usize {
        self.dataset.len()
    }

    /// Effective epochs covered by one full traversal.
    pub fn epochs_per_traversal(&self) -> usize {
        self.repeat_factor
    }

    pub fn samples_per_traversal(&self) -> usize {
        self.dataset.len() * self.repeat_factor
    }

    /// Lazily decoded batches of one traversal. Source order is shuffled
    /// per traversal; each decoded source contributes `repeat_factor`
    /// consecutive samples.
    pub fn batches(&self, traversal: u64) -> TraversalBatches<'_> {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut rng_for(&[self.seed, stream::SHUFFLE, traversal]));
        TraversalBatches {
            loader: self,
            traversal,
            order,
            cursor: 0,
        }
    }
}

/// Iterator over the batches of one traversal.
pub struct TraversalBatches<'l> {
    loader: &'l Loader<'l>,
    traversal: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Iterator for TraversalBatches<'_> {
    type Item = Result<SampleBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let loader = self.loader;
        let sources_per_batch = loader.batch_size / loader.repeat_factor;
        let end = (self.cursor + sources_per_batch).min(self.order.len());

        let mut clips = Vec::new();
        let mut labels = loader.dataset.labels.as_ref().map(|_| Vec::new());
        let mut seeds = Vec::new();
        for pos in self.cursor..end {
            let source = self.order[pos];
            for rep in 0..loader.repeat_factor {
                let sample_index = (pos * loader.repeat_factor + rep) as u64;
                let sample_seed = derive_seed(&[
                    loader.seed,
                    stream::AUGMENT,
                    self.traversal,
                    sample_index,
                ]);
                let mut rng = rng_for(&[sample_seed]);
                match loader.pipeline.apply(&loader.dataset.clips[source], &mut rng) {
                    Ok(clip) => clips.push(clip),
                    Err(e) => return Some(Err(e)),
                }
                if let (Some(labels), Some(all)) = (&mut labels, &loader.dataset.labels) {
                    labels.push(all[source]);
                }
                seeds.push(sample_seed);
            }
        }
        self.cursor = end;
        Some(Ok(SampleBatch {
            clips,
            labels,
            seeds,
        }))
    }
}

/// One-off batch draw: picks `batch_size / repeat_factor` random sources and
/// augments each `repeat_factor` times.
pub fn load_batch<R: Rng>(
    dataset: &Dataset,
    pipeline: &SamplePipeline,
    batch_size: usize,
    repeat_factor: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    if dataset.is_empty() {
        return Err(MaeError::Config("dataset is empty".to_string()));
    }
    if repeat_factor == 0 || batch_size == 0 || batch_size % repeat_factor != 0 {
        return Err(MaeError::Config(format!(
            "batch_size {batch_size} must be a positive multiple of repeat_factor {repeat_factor}"
        )));
    }
    pipeline.validate()?;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let n_sources = (batch_size / repeat_factor).min(dataset.len());

    let mut clips = Vec::new();
    let mut labels = dataset.labels.as_ref().map(|_| Vec::new());
    let mut seeds = Vec::new();
    for &source in order.iter().take(n_sources) {
        for _ in 0..repeat_factor {
            let sample_seed: u64 = rng.gen();
            let mut sample_rng = rng_for(&[sample_seed]);
            clips.push(pipeline.apply(&dataset.clips[source], &mut sample_rng)?);
            if let (Some(labels), Some(all)) = (&mut labels, &dataset.labels) {
                labels.push(all[source]);
            }
            seeds.push(sample_seed);
        }
    }
    Ok(SampleBatch {
        clips,
        labels,
        seeds,
    })
}
