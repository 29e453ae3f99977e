//! Mask-plan construction over the token grid.
//!
//! Four sampling strategies: structure-agnostic random sampling, space-only
//! ("tube") and time-only ("frame") sampling broadcast over the remaining
//! axes, and block-wise ("cube") sampling that removes random spacetime
//! boxes. Plans are pure functions of `(grid, ratio, seed, sampler)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MaeError, Result};

/// Token-grid extents `(T', H', W')` after patchification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        TokenGrid { t, h, w }
    }

    pub fn n_tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn spatial_cells(&self) -> usize {
        self.h * self.w
    }

    /// Row-major token index: time-major, then height, then width.
    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }

    /// Inverse of [`TokenGrid::index`].
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let w = index % self.w;
        let h = (index / self.w) % self.h;
        let t = index / (self.h * self.w);
        (t, h, w)
    }
}

/// Mask sampling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSampler {
    Agnostic,
    SpaceOnly,
    TimeOnly,
    Block,
}

impl fmt::Display for MaskSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MaskSampler::Agnostic => "agnostic",
            MaskSampler::SpaceOnly => "space_only",
            MaskSampler::TimeOnly => "time_only",
            MaskSampler::Block => "block",
        };
        f.write_str(name)
    }
}

impl FromStr for MaskSampler {
    type Err = MaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agnostic" => Ok(MaskSampler::Agnostic),
            "space_only" => Ok(MaskSampler::SpaceOnly),
            "time_only" => Ok(MaskSampler::TimeOnly),
            "block" => Ok(MaskSampler::Block),
            other => Err(MaeError::Config(format!(
                "unknown sampler {other:?}; expected agnostic|space_only|time_only|block"
            ))),
        }
    }
}

/// Half-open spacetime box drawn by the block sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskBox {
    pub t0: usize,
    pub t1: usize,
    pub h0: usize,
    pub h1: usize,
    pub w0: usize,
    pub w1: usize,
}

impl MaskBox {
    pub fn volume(&self) -> usize {
        (self.t1 - self.t0) * (self.h1 - self.h0) * (self.w1 - self.w0)
    }

    pub fn contains(&self, t: usize, h: usize, w: usize) -> bool {
        t >= self.t0 && t < self.t1 && h >= self.h0 && h < self.h1 && w >= self.w0 && w < self.w1
    }
}

/// A partition of the token grid into visible and masked index sets,
/// together with the sampler inputs that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub grid: TokenGrid,
    /// Sorted visible token indices.
    pub visible: Vec<usize>,
    /// Sorted masked token indices; complement of `visible`.
    pub masked: Vec<usize>,
    pub ratio: f64,
    pub sampler: MaskSampler,
    pub seed: u64,
    /// Boxes drawn by the block sampler, logged for auditability; empty for
    /// the other samplers.
    pub boxes: Vec<MaskBox>,
}

impl MaskPlan {
    /// Builds a plan with the requested strategy.
    pub fn sample(sampler: MaskSampler, grid: TokenGrid, ratio: f64, seed: u64) -> Result<Self> {
        match sampler {
            MaskSampler::Agnostic => sample_agnostic(grid, ratio, seed),
            MaskSampler::SpaceOnly => sample_space_only(grid, ratio, seed),
            MaskSampler::TimeOnly => sample_time_only(grid, ratio, seed),
            MaskSampler::Block => sample_block(grid, ratio, seed),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.n_tokens()
    }

    /// Stable one-line text form used for goldens:
    /// `sampler ratio seed grid=T,H,W visible=i1,i2,...`
    pub fn to_line(&self) -> String {
        let visible: Vec<String> = self.visible.iter().map(|i| i.to_string()).collect();
        format!(
            "{} {} {} grid={},{},{} visible={}",
            self.sampler,
            self.ratio,
            self.seed,
            self.grid.t,
            self.grid.h,
            self.grid.w,
            visible.join(",")
        )
    }

    /// Parses the [`MaskPlan::to_line`] format, reconstructing the masked
    /// complement. Box logs are not part of the format.
    pub fn from_line(line: &str) -> Result<Self> {
        let bad = |detail: &str| MaeError::Format {
            format: "mask plan line",
            detail: detail.to_string(),
        };
        let mut fields = line.split_whitespace();
        let sampler: MaskSampler = fields.next().ok_or_else(|| bad("missing sampler"))?.parse()?;
        let ratio: f64 = fields
            .next()
            .ok_or_else(|| bad("missing ratio"))?
            .parse()
            .map_err(|_| bad("unparseable ratio"))?;
        let seed: u64 = fields
            .next()
            .ok_or_else(|| bad("missing seed"))?
            .parse()
            .map_err(|_| bad("unparseable seed"))?;
        let grid_field = fields.next().ok_or_else(|| bad("missing grid"))?;
        let dims: Vec<usize> = grid_field
            .strip_prefix("grid=")
            .ok_or_else(|| bad("expected grid=T,H,W"))?
            .split(',')
            .map(|v| v.parse().map_err(|_| bad("unparseable grid extent")))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(bad("grid needs exactly three extents"));
        }
        let grid = TokenGrid::new(dims[0], dims[1], dims[2]);
        let visible_field = fields.next().ok_or_else(|| bad("missing visible list"))?;
        let body = visible_field
            .strip_prefix("visible=")
            .ok_or_else(|| bad("expected visible=i1,i2,..."))?;
        let visible: Vec<usize> = if body.is_empty() {
            Vec::new()
        } else {
            body.split(',')
                .map(|v| v.parse().map_err(|_| bad("unparseable index")))
                .collect::<Result<_>>()?
        };
        let n = grid.n_tokens();
        let mut keep = vec![false; n];
        for &i in &visible {
            if i >= n {
                return Err(bad(&format!("visible index {i} outside grid of {n}")));
            }
            keep[i] = true;
        }
        Ok(from_keep_flags(grid, &keep, ratio, sampler, seed, Vec::new()))
    }

    /// `#`/`.` grids per time slice, matching the masked/visible layout.
    pub fn render_text_grid(&self) -> String {
        let mut keep = vec![false; self.grid.n_tokens()];
        for &i in &self.visible {
            keep[i] = true;
        }
        let mut out = String::new();
        for t in 0..self.grid.t {
            out.push_str(&format!("t={t}\n"));
            for h in 0..self.grid.h {
                for w in 0..self.grid.w {
                    out.push(if keep[self.grid.index(t, h, w)] { '.' } else { '#' });
                }
                out.push('\n');
            }
            if t + 1 < self.grid.t {
                out.push('\n');
            }
        }
        out
    }
}

fn validate_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) || !ratio.is_finite() {
        return Err(MaeError::Config(format!(
            "masking ratio must lie in [0, 1), got {ratio}"
        )));
    }
    Ok(())
}

fn from_keep_flags(
    grid: TokenGrid,
    keep: &[bool],
    ratio: f64,
    sampler: MaskSampler,
    seed: u64,
    boxes: Vec<MaskBox>,
) -> MaskPlan {
    let mut visible = Vec::new();
    let mut masked = Vec::new();
    for (i, &k) in keep.iter().enumerate() {
        if k {
            visible.push(i);
        } else {
            masked.push(i);
        }
    }
    MaskPlan {
        grid,
        visible,
        masked,
        ratio,
        sampler,
        seed,
        boxes,
    }
}

/// Uniform sample without replacement of `n_keep` out of `n` indices;
/// partial Fisher-Yates over a seeded stream.
fn choose_without_replacement(rng: &mut ChaCha8Rng, n: usize, n_keep: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..n_keep.min(n) {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    indices.truncate(n_keep);
    indices
}

fn keep_count(extent: usize, ratio: f64) -> usize {
    ((extent as f64) * (1.0 - ratio)).floor() as usize
}

/// Structure-agnostic uniform sampling over all tokens; keeps exactly
/// `floor(N * (1 - ratio))` tokens visible.
pub fn sample_agnostic(grid: TokenGrid, ratio: f64, seed: u64) -> Result<MaskPlan> {
    validate_ratio(ratio)?;
    let n = grid.n_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = choose_without_replacement(&mut rng, n, keep_count(n, ratio));
    let mut keep = vec![false; n];
    for i in chosen {
        keep[i] = true;
    }
    Ok(from_keep_flags(grid, &keep, ratio, MaskSampler::Agnostic, seed, Vec::new()))
}

/// Samples spatial cells only and broadcasts the choice to every time step
/// ("tube" masking). The ratio applies to the spatial axis.
pub fn sample_space_only(grid: TokenGrid, ratio: f64, seed: u64) -> Result<MaskPlan> {
    validate_ratio(ratio)?;
    let s = grid.spatial_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = choose_without_replacement(&mut rng, s, keep_count(s, ratio));
    let mut keep_cell = vec![false; s];
    for c in chosen {
        keep_cell[c] = true;
    }
    let mut keep = vec![false; grid.n_tokens()];
    for t in 0..grid.t {
        for (c, &k) in keep_cell.iter().enumerate() {
            keep[t * s + c] = k;
        }
    }
    Ok(from_keep_flags(grid, &keep, ratio, MaskSampler::SpaceOnly, seed, Vec::new()))
}

/// Samples time steps only and broadcasts to all spatial locations
/// ("frame" masking). The ratio applies to the time axis.
pub fn sample_time_only(grid: TokenGrid, ratio: f64, seed: u64) -> Result<MaskPlan> {
    validate_ratio(ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = choose_without_replacement(&mut rng, grid.t, keep_count(grid.t, ratio));
    let mut keep_t = vec![false; grid.t];
    for t in chosen {
        keep_t[t] = true;
    }
    let s = grid.spatial_cells();
    let mut keep = vec![false; grid.n_tokens()];
    for (t, &k) in keep_t.iter().enumerate() {
        if k {
            for c in 0..s {
                keep[t * s + c] = true;
            }
        }
    }
    Ok(from_keep_flags(grid, &keep, ratio, MaskSampler::TimeOnly, seed, Vec::new()))
}

// Block sampler parameters: boxes span at least MIN_SPATIAL_AREA spatial
// cells (clamped to the grid), at most a quarter of the spatial grid,
// with aspect ratio in [0.5, 2] and temporal extent uniform in [1, T'].
const MIN_SPATIAL_AREA: f64 = 4.0;
const ASPECT_LO: f64 = 0.5;
const ASPECT_HI: f64 = 2.0;

/// Removes random spacetime boxes until at least `ceil(N * ratio)` tokens
/// are masked ("cube" masking). The drawn boxes are logged on the plan.
pub fn sample_block(grid: TokenGrid, ratio: f64, seed: u64) -> Result<MaskPlan> {
    validate_ratio(ratio)?;
    let n = grid.n_tokens();
    let target = ((n as f64) * ratio).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked_flags = vec![false; n];
    let mut masked_count = 0usize;
    let mut boxes = Vec::new();

    let s = grid.spatial_cells() as f64;
    let area_lo = MIN_SPATIAL_AREA.min(s);
    let area_hi = (s / 4.0).max(area_lo);

    let mut draws = 0usize;
    while masked_count < target {
        draws += 1;
        if draws > 100 * n + 100 {
            return Err(MaeError::Contract(format!(
                "block sampler stalled after {draws} draws on a {n}-token grid"
            )));
        }
        let dt = rng.gen_range(1..=grid.t);
        let area = if area_hi > area_lo {
            (rng.gen_range(area_lo.ln()..area_hi.ln())).exp()
        } else {
            area_lo
        };
        let aspect = rng.gen_range(ASPECT_LO.ln()..=ASPECT_HI.ln()).exp();
        let bh = ((area / aspect).sqrt().round() as usize).clamp(1, grid.h);
        let bw = ((area * aspect).sqrt().round() as usize).clamp(1, grid.w);
        let t0 = rng.gen_range(0..=grid.t - dt);
        let h0 = rng.gen_range(0..=grid.h - bh);
        let w0 = rng.gen_range(0..=grid.w - bw);
        let b = MaskBox {
            t0,
            t1: t0 + dt,
            h0,
            h1: h0 + bh,
            w0,
            w1: w0 + bw,
        };
        for t in b.t0..b.t1 {
            for h in b.h0..b.h1 {
                for w in b.w0..b.w1 {
                    let idx = grid.index(t, h, w);
                    if !masked_flags[idx] {
                        masked_flags[idx] = true;
                        masked_count += 1;
                    }
                }
            }
        }
        boxes.push(b);
    }

    let keep: Vec<bool> = masked_flags.iter().map(|&m| !m).collect();
    Ok(from_keep_flags(grid, &keep, ratio, MaskSampler::Block, seed, boxes))
}

/// Masking-ratio schedule used during fine-tuning.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub start_ratio: f64,
    pub end_ratio: f64,
    pub total_steps: usize,
    pub shape: ScheduleShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    Constant,
    Cosine,
}

impl MaskSchedule {
    pub fn constant(ratio: f64) -> Self {
        MaskSchedule {
            start_ratio: ratio,
            end_ratio: ratio,
            total_steps: 1,
            shape: ScheduleShape::Constant,
        }
    }

    pub fn cosine(start_ratio: f64, end_ratio: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(MaeError::Config(
                "cosine mask schedule needs total_steps >= 1".to_string(),
            ));
        }
        Ok(MaskSchedule {
            start_ratio,
            end_ratio,
            total_steps,
            shape: ScheduleShape::Cosine,
        })
    }

    /// Ratio at `step`; constant schedules return the start ratio, cosine
    /// schedules anneal `start -> end` over `total_steps`.
    pub fn ratio_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(MaeError::Contract(format!(
                "schedule step {step} beyond total {}",
                self.total_steps
            )));
        }
        Ok(match self.shape {
            ScheduleShape::Constant => self.start_ratio,
            ScheduleShape::Cosine => {
                let progress = step as f64 / self.total_steps as f64;
                self.end_ratio
                    + (self.start_ratio - self.end_ratio)
                        * (1.0 + (std::f64::consts::PI * progress).cos())
                        / 2.0
            }
        })
    }
}
