//! Analytic multiply-accumulate cost model and wall-clock benchmark for
//! the sparse-vs-dense encoder comparison.
//!
//! Counting convention: one MAC per multiply-add in the linear maps
//! (projections, attention scores and weighted sums, MLPs); norms, softmax,
//! and activations are excluded. Broadcasting the shared mask token costs
//! nothing. This convention reproduces the reference dense cost within a
//! fraction of a percent.

use std::time::Instant;

use crate::error::{MaeError, Result};
use crate::masking::{sample_agnostic, TokenGrid};
use crate::model::{forward_pretrain, forward_pretrain_dense, MaeConfig, MaeModel};
use crate::rng::{rng_for, stream};
use crate::video::VideoClip;

use rand::Rng;

/// Clip extents the cost model is evaluated at (channels come from the
/// model's patch spec).
#[derive(Debug, Clone, Copy)]
pub struct ClipGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipGeometry {
    pub fn reference_video() -> Self {
        ClipGeometry {
            frames: 16,
            height: 224,
            width: 224,
        }
    }

    pub fn dims_with(&self, channels: usize) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, channels)
    }
}

/// MACs of a `depth`-block ViT tower over `n` tokens:
/// `depth * (4 n d^2 + 2 n^2 d + 2 mlp_ratio n d^2)`
/// (QKV + output projections, scores + weighted sum, two MLP layers).
pub fn vit_flops(n_tokens: usize, d: usize, depth: usize, mlp_ratio: usize) -> u64 {
    let (n, d, m) = (n_tokens as u64, d as u64, mlp_ratio as u64);
    depth as u64 * (4 * n * d * d + 2 * n * n * d + 2 * m * n * d * d)
}

/// Per-stage MAC counts for one autoencoder pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageMacs {
    pub patch_embed: u64,
    pub encoder_blocks: u64,
    pub enc_to_dec: u64,
    pub decoder_blocks: u64,
    pub pred_head: u64,
}

impl StageMacs {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.encoder_blocks + self.enc_to_dec + self.decoder_blocks
            + self.pred_head
    }

    pub const STAGE_NAMES: [&'static str; 5] = [
        "patch_embed",
        "encoder_blocks",
        "enc_to_dec",
        "decoder_blocks",
        "pred_head",
    ];

    pub fn by_stage(&self) -> [u64; 5] {
        [
            self.patch_embed,
            self.encoder_blocks,
            self.enc_to_dec,
            self.decoder_blocks,
            self.pred_head,
        ]
    }
}

/// Dense (full-set encoder) vs sparse (visible-set encoder) cost report.
#[derive(Debug, Clone, Copy)]
pub struct FlopsReport {
    pub n_tokens: usize,
    pub visible_tokens: usize,
    pub mask_ratio: f64,
    pub dense: StageMacs,
    pub sparse: StageMacs,
}

impl FlopsReport {
    pub fn dense_total(&self) -> u64 {
        self.dense.total()
    }

    pub fn sparse_total(&self) -> u64 {
        self.sparse.total()
    }

    pub fn speedup(&self) -> f64 {
        self.dense_total() as f64 / self.sparse_total() as f64
    }

    /// CSV rows `stage,dense_macs,sparse_macs` plus a total row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,dense_macs,sparse_macs\n");
        for ((name, d), s) in StageMacs::STAGE_NAMES
            .iter()
            .zip(self.dense.by_stage())
            .zip(self.sparse.by_stage())
        {
            out.push_str(&format!("{name},{d},{s}\n"));
        }
        out.push_str(&format!(
            "total,{},{}\n",
            self.dense_total(),
            self.sparse_total()
        ));
        out
    }

    pub fn render_table(&self) -> String {
        let giga = 1e9;
        let mut out = format!(
            "tokens: {} total, {} visible (mask ratio {})\n",
            self.n_tokens, self.visible_tokens, self.mask_ratio
        );
        out.push_str(&format!(
            "{:<16} {:>14} {:>14}\n",
            "stage", "dense GMACs", "sparse GMACs"
        ));
        for ((name, d), s) in StageMacs::STAGE_NAMES
            .iter()
            .zip(self.dense.by_stage())
            .zip(self.sparse.by_stage())
        {
            out.push_str(&format!(
                "{name:<16} {:>14.3} {:>14.3}\n",
                d as f64 / giga,
                s as f64 / giga
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>14.1} {:>14.1}\n",
            "total",
            self.dense_total() as f64 / giga,
            self.sparse_total() as f64 / giga
        ));
        out.push_str(&format!("speedup: {:.1}x\n", self.speedup()));
        out
    }
}

/// Analytic cost of one autoencoder pass at the given geometry. The dense
/// arm runs every stage at the full token count; the sparse arm runs the
/// patch embed, encoder, and encoder-to-decoder projection at the visible
/// count, while the decoder and prediction head stay at the full count.
pub fn mae_flops(config: &MaeConfig, geometry: ClipGeometry) -> Result<FlopsReport> {
    config.validate()?;
    let grid = config
        .patch
        .grid_for(geometry.dims_with(config.patch.in_channels))?;
    let n = grid.n_tokens();
    let visible = ((n as f64) * (1.0 - config.mask_ratio)).floor() as usize;

    let in_dim = config.patch.row_len() as u64;
    let slice = config.patch.slice_len() as u64;
    let (d_enc, d_dec) = (config.d_enc as u64, config.d_dec as u64);

    let stages = |encoder_tokens: usize| StageMacs {
        patch_embed: encoder_tokens as u64 * in_dim * d_enc,
        encoder_blocks: vit_flops(encoder_tokens, config.d_enc, config.depth_enc, config.mlp_ratio),
        enc_to_dec: encoder_tokens as u64 * d_enc * d_dec,
        decoder_blocks: vit_flops(n, config.d_dec, config.depth_dec, config.mlp_ratio),
        pred_head: n as u64 * d_dec * slice,
    };

    Ok(FlopsReport {
        n_tokens: n,
        visible_tokens: visible,
        mask_ratio: config.mask_ratio,
        dense: stages(n),
        sparse: stages(visible),
    })
}

/// One measured benchmark row.
#[derive(Debug, Clone, Copy)]
pub struct BenchRow {
    pub rho: f64,
    /// Median forward+backward wall time per step, milliseconds.
    pub measured_ms: f64,
    /// Median including one sample decode+augment, when a dataset was given.
    pub load_plus_compute_ms: Option<f64>,
    pub analytic_macs: u64,
    /// Measured dense-time / this-row-time.
    pub speedup: f64,
    /// Analytic dense MACs / this row's MACs.
    pub analytic_speedup: f64,
}

/// Benchmark results: one dense reference row (rho = 0) and one row per
/// requested sparse ratio.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// CSV rows `rho,measured_ms,analytic_macs,speedup`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rho,measured_ms,analytic_macs,speedup\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{:.3},{},{:.3}\n",
                row.rho, row.measured_ms, row.analytic_macs, row.speedup
            ));
        }
        out
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:>6} {:>14} {:>18} {:>14} {:>10} {:>10}\n",
            "rho", "compute ms", "load+compute ms", "GMACs", "speedup", "analytic"
        );
        for row in &self.rows {
            let load = row
                .load_plus_compute_ms
                .map_or("-".to_string(), |v| format!("{v:.2}"));
            out.push_str(&format!(
                "{:>6} {:>14.2} {:>18} {:>14.3} {:>9.2}x {:>9.2}x\n",
                row.rho,
                row.measured_ms,
                load,
                row.analytic_macs as f64 / 1e9,
                row.speedup,
                row.analytic_speedup
            ));
        }
        out
    }
}

fn median(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

/// Measures median forward+backward wall time for the dense path and for
/// each sparse ratio, with identical parameters and objective. With a
/// dataset, also reports the time including one sample decode+augment per
/// step (the load+compute split). Single-threaded.
pub fn benchmark_step(
    config: &MaeConfig,
    geometry: ClipGeometry,
    rho_list: &[f64],
    repetitions: usize,
    dataset: Option<&crate::video::Dataset>,
) -> Result<BenchReport> {
    if rho_list.is_empty() {
        return Err(MaeError::Config("benchmark needs at least one ratio".to_string()));
    }
    for &rho in rho_list {
        if !(0.0 < rho && rho < 1.0) {
            return Err(MaeError::Config(format!(
                "benchmark ratios must lie in (0, 1), got {rho}"
            )));
        }
    }
    let repetitions = repetitions.max(1);
    let grid = config
        .patch
        .grid_for(geometry.dims_with(config.patch.in_channels))?;
    let model = MaeModel::<f32>::init(*config, grid, 0)?;
    let clip = random_clip(geometry, config.patch.in_channels)?;
    let pipeline = crate::video::SamplePipeline {
        num_frames: geometry.frames,
        stride: 1,
        out_h: geometry.height,
        out_w: geometry.width,
        scale_range: (0.5, 1.0),
        hflip_prob: 0.5,
    };

    // dense reference: encoder over the full set; the loss still needs a
    // masked subset, so it borrows the first requested ratio's plan
    let dense_plan = sample_agnostic(grid, rho_list[0], 1)?;
    let dense_report = mae_flops(config, geometry)?;
    let mut dense_times = Vec::with_capacity(repetitions);
    let mut dense_load_times = Vec::with_capacity(repetitions);
    for rep in 0..repetitions {
        if let Some(data) = dataset {
            let started = Instant::now();
            let source = &data.clips[rep % data.len()];
            let mut rng = rng_for(&[stream::DATA, rep as u64]);
            let sample = pipeline.apply(source, &mut rng)?;
            let pass = forward_pretrain_dense(&model, &sample, &dense_plan)?;
            pass.into_gradients()?;
            dense_load_times.push(started.elapsed().as_secs_f64() * 1e3);
        }
        let started = Instant::now();
        let pass = forward_pretrain_dense(&model, &clip, &dense_plan)?;
        pass.into_gradients()?;
        dense_times.push(started.elapsed().as_secs_f64() * 1e3);
    }
    let dense_ms = median(dense_times);
    let dense_macs = dense_report.dense_total();
    let mut rows = vec![BenchRow {
        rho: 0.0,
        measured_ms: dense_ms,
        load_plus_compute_ms: dataset.map(|_| median(dense_load_times.clone())),
        analytic_macs: dense_macs,
        speedup: 1.0,
        analytic_speedup: 1.0,
    }];

    for &rho in rho_list {
        let plan = sample_agnostic(grid, rho, 1)?;
        let sparse_macs = {
            let mut c = *config;
            c.mask_ratio = rho;
            mae_flops(&c, geometry)?.sparse_total()
        };
        let mut times = Vec::with_capacity(repetitions);
        let mut load_times = Vec::with_capacity(repetitions);
        for rep in 0..repetitions {
            if let Some(data) = dataset {
                let started = Instant::now();
                let source = &data.clips[rep % data.len()];
                let mut rng = rng_for(&[stream::DATA, 1000 + rep as u64]);
                let sample = pipeline.apply(source, &mut rng)?;
                let pass = forward_pretrain(&model, &sample, &plan)?;
                pass.into_gradients()?;
                load_times.push(started.elapsed().as_secs_f64() * 1e3);
            }
            let started = Instant::now();
            let pass = forward_pretrain(&model, &clip, &plan)?;
            pass.into_gradients()?;
            times.push(started.elapsed().as_secs_f64() * 1e3);
        }
        let measured_ms = median(times);
        rows.push(BenchRow {
            rho,
            measured_ms,
            load_plus_compute_ms: dataset.map(|_| median(load_times.clone())),
            analytic_macs: sparse_macs,
            speedup: dense_ms / measured_ms,
            analytic_speedup: dense_macs as f64 / sparse_macs as f64,
        });
    }
    Ok(BenchReport { rows })
}

fn random_clip(geometry: ClipGeometry, channels: usize) -> Result<VideoClip> {
    let (t, h, w) = (geometry.frames, geometry.height, geometry.width);
    let mut rng = rng_for(&[stream::DATA, 0xbe7c]);
    let frames: Vec<f32> = (0..t * h * w * channels).map(|_| rng.gen::<f32>()).collect();
    VideoClip::new(frames, (t, h, w, channels), "bench", 1)
}
