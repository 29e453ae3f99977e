//! Tubelet tokenization and its inverses.
//!
//! A clip is cut into non-overlapping `t_patch x p x p` tubelets, flattened
//! time-major (then rows, then columns, channel-last) and embedded by a
//! linear projection plus separable space/time positional tables.
//! Reconstruction targets take the first temporal slice of each tubelet,
//! optionally standardized per patch.

use serde::{Deserialize, Serialize};

use crate::error::{MaeError, Result};
use crate::masking::{MaskPlan, TokenGrid};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::video::VideoClip;

/// Tubelet extents: temporal size, square spatial size, input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub t_patch: usize,
    pub p: usize,
    pub in_channels: usize,
}

impl PatchSpec {
    pub fn new(t_patch: usize, p: usize, in_channels: usize) -> Result<Self> {
        if t_patch == 0 || p == 0 || in_channels == 0 {
            return Err(MaeError::Config(format!(
                "patch extents must be >= 1, got {t_patch}x{p}x{p}x{in_channels}"
            )));
        }
        Ok(PatchSpec {
            t_patch,
            p,
            in_channels,
        })
    }

    /// Flattened tubelet length: `t_patch * p * p * C`.
    pub fn row_len(&self) -> usize {
        self.t_patch * self.p * self.p * self.in_channels
    }

    /// One temporal slice of a tubelet: `p * p * C`.
    pub fn slice_len(&self) -> usize {
        self.p * self.p * self.in_channels
    }

    /// Token grid for a clip of the given dims; every axis must divide.
    pub fn grid_for(&self, (t, h, w, c): (usize, usize, usize, usize)) -> Result<TokenGrid> {
        if c != self.in_channels {
            return Err(MaeError::Config(format!(
                "clip has {c} channels, patch spec expects {}",
                self.in_channels
            )));
        }
        for (axis, extent, patch) in [("T", t, self.t_patch), ("H", h, self.p), ("W", w, self.p)] {
            if extent % patch != 0 {
                return Err(MaeError::Config(format!(
                    "axis {axis}: extent {extent} not divisible by patch size {patch}"
                )));
            }
        }
        Ok(TokenGrid::new(t / self.t_patch, h / self.p, w / self.p))
    }
}

/// Embedded tokens plus their grid; coordinates are the row-major
/// enumeration of the grid (time-major, then height, then width).
#[derive(Debug, Clone)]
pub struct TokenSequence<S> {
    pub embeddings: Tensor<S>,
    pub grid: TokenGrid,
}

impl<S: Scalar> TokenSequence<S> {
    pub fn n_tokens(&self) -> usize {
        self.grid.n_tokens()
    }

    /// `(t, h, w)` coordinate of token `index`.
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        self.grid.coords(index)
    }
}

/// Separable positional embedding: the full embedding of token `(t, s)` is
/// exactly `time_table[t] + space_table[s]`, so storage is
/// `(T' + H'*W') * d` instead of `T' * H' * W' * d`.
#[derive(Debug, Clone)]
pub struct PositionalEmbedding<S> {
    /// `[T', d]`
    pub time_table: Tensor<S>,
    /// `[H'*W', d]`
    pub space_table: Tensor<S>,
    pub learnable: bool,
}

impl<S: Scalar> PositionalEmbedding<S> {
    pub fn zeros(grid: TokenGrid, dim: usize) -> Self {
        PositionalEmbedding {
            time_table: Tensor::zeros(vec![grid.t, dim]),
            space_table: Tensor::zeros(vec![grid.spatial_cells(), dim]),
            learnable: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.time_table.cols()
    }

    /// Full `[N, d]` table; each row is `time_table[t] + space_table[s]`.
    pub fn materialize(&self, grid: TokenGrid) -> Tensor<S> {
        let d = self.dim();
        let s = grid.spatial_cells();
        let mut data = Vec::with_capacity(grid.n_tokens() * d);
        for token in 0..grid.n_tokens() {
            let (t, sp) = (token / s, token % s);
            let trow = self.time_table.row(t);
            let srow = self.space_table.row(sp);
            for k in 0..d {
                data.push(trow[k] + srow[k]);
            }
        }
        Tensor::from_vec(vec![grid.n_tokens(), d], data).unwrap()
    }
}

/// Cuts a clip into flattened tubelets: one row per token.
pub fn patchify<S: Scalar>(
    clip: &VideoClip,
    spec: &PatchSpec,
) -> Result<(Tensor<S>, TokenGrid)> {
    let grid = spec.grid_for(clip.dims())?;
    let (p, tp, c) = (spec.p, spec.t_patch, spec.in_channels);
    let mut data = Vec::with_capacity(grid.n_tokens() * spec.row_len());
    for gt in 0..grid.t {
        for gh in 0..grid.h {
            for gw in 0..grid.w {
                for dt in 0..tp {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                let v = clip.pixel(
                                    gt * tp + dt,
                                    gh * p + dy,
                                    gw * p + dx,
                                    ch,
                                );
                                data.push(S::from_f64c(v as f64));
                            }
                        }
                    }
                }
            }
        }
    }
    let patches = Tensor::from_vec(vec![grid.n_tokens(), spec.row_len()], data)?;
    Ok((patches, grid))
}

/// Exact inverse of [`patchify`] back into pixel space (clamped to `[0,1]`).
pub fn unpatchify<S: Scalar>(
    patches: &Tensor<S>,
    grid: TokenGrid,
    spec: &PatchSpec,
    source_id: &str,
) -> Result<VideoClip> {
    if patches.shape() != [grid.n_tokens(), spec.row_len()] {
        return Err(MaeError::Dimension {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![grid.n_tokens(), spec.row_len()],
        });
    }
    let (p, tp, c) = (spec.p, spec.t_patch, spec.in_channels);
    let (t, h, w) = (grid.t * tp, grid.h * p, grid.w * p);
    let mut frames = vec![0.0f32; t * h * w * c];
    for token in 0..grid.n_tokens() {
        let (gt, gh, gw) = grid.coords(token);
        let row = patches.row(token);
        let mut idx = 0;
        for dt in 0..tp {
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        let off = (((gt * tp + dt) * h + gh * p + dy) * w + gw * p + dx) * c + ch;
                        frames[off] = (row[idx].to_f64c() as f32).clamp(0.0, 1.0);
                        idx += 1;
                    }
                }
            }
        }
    }
    VideoClip::new(frames, (t, h, w, c), source_id, 1)
}

/// Linear patch embedding plus separable positional embedding:
/// `out[i] = raw[i] . W_embed + time_table[t_i] + space_table[s_i]`.
pub fn embed<S: Scalar>(
    raw_patches: &Tensor<S>,
    w_embed: &Tensor<S>,
    pos: &PositionalEmbedding<S>,
    grid: TokenGrid,
) -> Result<TokenSequence<S>> {
    let mut tape = Tape::new();
    let raw = tape.constant(raw_patches.clone());
    let w = tape.constant(w_embed.clone());
    let time = tape.constant(pos.time_table.clone());
    let space = tape.constant(pos.space_table.clone());
    let projected = tape.matmul(raw, w)?;
    let ids = embed_positions(&mut tape, time, space, grid, None)?;
    let out = tape.add(projected, ids)?;
    Ok(TokenSequence {
        embeddings: tape.value(out).clone(),
        grid,
    })
}

/// Tape-level positional rows for the listed tokens (all tokens when
/// `subset` is `None`); shared by the standalone embed and the model.
pub(crate) fn embed_positions<S: Scalar>(
    tape: &mut Tape<S>,
    time_table: crate::tensor::TapeId,
    space_table: crate::tensor::TapeId,
    grid: TokenGrid,
    subset: Option<&[usize]>,
) -> Result<crate::tensor::TapeId> {
    let s = grid.spatial_cells();
    let (time_idx, space_idx): (Vec<usize>, Vec<usize>) = match subset {
        Some(tokens) => tokens.iter().map(|&i| (i / s, i % s)).unzip(),
        None => (0..grid.n_tokens()).map(|i| (i / s, i % s)).unzip(),
    };
    let trows = tape.gather_rows(time_table, &time_idx)?;
    let srows = tape.gather_rows(space_table, &space_idx)?;
    tape.add(trows, srows)
}

/// Reconstruction target: the first temporal slice of each tubelet,
/// standardized per patch when `normalize` is set (`(x - mean) / (std + eps)`,
/// population std).
pub fn build_target<S: Scalar>(
    raw_patches: &Tensor<S>,
    spec: &PatchSpec,
    normalize: bool,
    eps: S,
) -> Tensor<S> {
    let n = raw_patches.rows();
    let slice_len = spec.slice_len();
    let mut data = Vec::with_capacity(n * slice_len);
    for row in 0..n {
        let slice = &raw_patches.row(row)[..slice_len];
        if normalize {
            let (mean, std) = slice_stats(slice);
            for &v in slice {
                data.push((v - mean) / (std + eps));
            }
        } else {
            data.extend_from_slice(slice);
        }
    }
    Tensor::from_vec(vec![n, slice_len], data).unwrap()
}

fn slice_stats<S: Scalar>(slice: &[S]) -> (S, S) {
    let inv_n = S::one() / S::from_f64c(slice.len() as f64);
    let mut mean = S::zero();
    for &v in slice {
        mean = mean + v;
    }
    mean = mean * inv_n;
    let mut var = S::zero();
    for &v in slice {
        let c = v - mean;
        var = var + c * c;
    }
    (mean, (var * inv_n).sqrt())
}

/// Composites predictions into pixel space: visible tubelets come from the
/// original clip; masked tubelets show the predicted slice (denormalized
/// with the original patch's statistics when targets were normalized)
/// broadcast across the tubelet's `t_patch` frames.
///
/// `predictions` must cover exactly the masked set; pass `None` when the
/// plan masks nothing, which reproduces the original clip.
pub fn stitch_visualization(
    original: &VideoClip,
    spec: &PatchSpec,
    plan: &MaskPlan,
    predictions: Option<&Tensor<f32>>,
    normalized: bool,
    eps: f32,
) -> Result<VideoClip> {
    let (raw, grid) = patchify::<f32>(original, spec)?;
    if grid != plan.grid {
        return Err(MaeError::Contract(format!(
            "plan grid {:?} does not match clip grid {:?}",
            plan.grid, grid
        )));
    }
    let pred_shape = predictions.map(|p| p.shape().to_vec()).unwrap_or_default();
    let expected = [plan.masked.len(), spec.slice_len()];
    let count_ok = match predictions {
        Some(p) => p.shape() == expected,
        None => plan.masked.is_empty(),
    };
    if !count_ok {
        return Err(MaeError::Contract(format!(
            "predictions shape {:?}, expected [{}, {}]",
            pred_shape, expected[0], expected[1]
        )));
    }

    let mut patches = raw.clone();
    let row_len = spec.row_len();
    let slice_len = spec.slice_len();
    for (r, &token) in plan.masked.iter().enumerate() {
        let pred = predictions.unwrap().row(r);
        let (mean, std) = slice_stats(&raw.row(token)[..slice_len]);
        let restored: Vec<f32> = pred
            .iter()
            .map(|&v| {
                if normalized {
                    v * (std + eps) + mean
                } else {
                    v
                }
            })
            .collect();
        let dst = &mut patches.data_mut()[token * row_len..(token + 1) * row_len];
        for t_slice in dst.chunks_mut(slice_len) {
            t_slice.copy_from_slice(&restored);
        }
    }
    unpatchify(&patches, grid, spec, &format!("{}-stitched", original.source_id))
}

/// Original clip with masked tubelets filled by a constant gray value.
pub fn masked_view(
    original: &VideoClip,
    spec: &PatchSpec,
    plan: &MaskPlan,
    fill: f32,
) -> Result<VideoClip> {
    let (mut patches, grid) = patchify::<f32>(original, spec)?;
    if grid != plan.grid {
        return Err(MaeError::Contract(format!(
            "plan grid {:?} does not match clip grid {:?}",
            plan.grid, grid
        )));
    }
    let row_len = spec.row_len();
    for &token in &plan.masked {
        for v in &mut patches.data_mut()[token * row_len..(token + 1) * row_len] {
            *v = fill;
        }
    }
    unpatchify(&patches, grid, spec, &format!("{}-masked", original.source_id))
}

/// Collapses a temporal patch projection to a 2-D one by summing its
/// `t_patch` temporal sub-blocks, so a static image repeated `t_patch`
/// times embeds the same through either path.
pub fn deflate_patch_embed<S: Scalar>(w_embed: &Tensor<S>, spec: &PatchSpec) -> Result<Tensor<S>> {
    let slice_len = spec.slice_len();
    if w_embed.rows() != spec.row_len() {
        return Err(MaeError::Dimension {
            op: "deflate_patch_embed",
            lhs: w_embed.shape().to_vec(),
            rhs: vec![spec.row_len()],
        });
    }
    let d = w_embed.cols();
    let mut data = vec![S::zero(); slice_len * d];
    for t in 0..spec.t_patch {
        for j in 0..slice_len {
            let src = w_embed.row(t * slice_len + j);
            let dst = &mut data[j * d..(j + 1) * d];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = *o + v;
            }
        }
    }
    Tensor::from_vec(vec![slice_len, d], data)
}
