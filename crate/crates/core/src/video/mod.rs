//! Clip representation, on-disk clip format, temporal/spatial sampling,
//! synthetic data generation, and the repeated-sampling loader.

mod clip_file;
mod loader;
mod sampling;
mod synthetic;

pub use clip_file::{read_clip, write_clip, CLIP_MAGIC, CLIP_VERSION};
pub use loader::{load_batch, Loader, SampleBatch, SamplePipeline};
pub use sampling::{augment, sample_clip};
pub use synthetic::{generate_synthetic, SyntheticKind, COMPASS_DIRECTIONS};

use std::fs;
use std::path::Path;

use crate::error::{MaeError, Result};

/// Dense `T x H x W x C` pixel block with values in `[0, 1]`, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<f32>,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    pub source_id: String,
    pub frame_stride: u32,
}

impl VideoClip {
    pub fn new(
        frames: Vec<f32>,
        (t, h, w, c): (usize, usize, usize, usize),
        source_id: impl Into<String>,
        frame_stride: u32,
    ) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(MaeError::Config(format!(
                "clip dims must be >= 1, got {t}x{h}x{w}x{c}"
            )));
        }
        if frames.len() != t * h * w * c {
            return Err(MaeError::Dimension {
                op: "VideoClip::new",
                lhs: vec![t, h, w, c],
                rhs: vec![frames.len()],
            });
        }
        if frame_stride == 0 {
            return Err(MaeError::Config("frame_stride must be >= 1".to_string()));
        }
        if !frames.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(MaeError::Config(
                "clip values must be finite and in [0, 1]".to_string(),
            ));
        }
        Ok(VideoClip {
            frames,
            t,
            h,
            w,
            c,
            source_id: source_id.into(),
            frame_stride,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.t, self.h, self.w, self.c)
    }

    pub fn num_frames(&self) -> usize {
        self.t
    }

    pub fn pixels(&self) -> &[f32] {
        &self.frames
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.frames[self.offset(t, y, x, c)]
    }

    /// Flat offset of `(t, y, x, c)`: frame-major, then rows, channel-last.
    pub fn offset(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.h + y) * self.w + x) * self.c + c
    }

    /// One `H x W x C` frame as a flat slice.
    pub fn frame(&self, t: usize) -> &[f32] {
        let stride = self.h * self.w * self.c;
        &self.frames[t * stride..(t + 1) * stride]
    }
}

/// An in-memory collection of clips with optional class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clips: Vec<VideoClip>,
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn from_clips(clips: Vec<VideoClip>, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(labels) = &labels {
            if labels.len() != clips.len() {
                return Err(MaeError::Config(format!(
                    "{} labels for {} clips",
                    labels.len(),
                    clips.len()
                )));
            }
        }
        Ok(Dataset { clips, labels })
    }

    /// Loads every `.vmae` file in a directory (sorted by file name), plus
    /// labels from `labels.tsv` (`filename TAB integer`) when present.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().map_or(false, |e| e == "vmae"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(MaeError::Config(format!(
                "no .vmae clips found in {}",
                dir.display()
            )));
        }
        let clips: Vec<VideoClip> = files
            .iter()
            .map(|p| read_clip(p))
            .collect::<Result<_>>()?;

        let label_path = dir.join("labels.tsv");
        let labels = if label_path.exists() {
            let text = fs::read_to_string(&label_path)?;
            let mut by_name = std::collections::BTreeMap::new();
            for (lineno, line) in text.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let (name, value) = line.split_once('\t').ok_or_else(|| MaeError::Format {
                    format: "labels.tsv",
                    detail: format!("line {}: expected filename TAB integer", lineno + 1),
                })?;
                let label: u32 = value.trim().parse().map_err(|_| MaeError::Format {
                    format: "labels.tsv",
                    detail: format!("line {}: unparseable label {value:?}", lineno + 1),
                })?;
                by_name.insert(name.to_string(), label);
            }
            let labels: Vec<u32> = files
                .iter()
                .map(|p| {
                    let name = p.file_name().unwrap().to_string_lossy().to_string();
                    by_name.get(&name).copied().ok_or_else(|| MaeError::Format {
                        format: "labels.tsv",
                        detail: format!("no label for {name}"),
                    })
                })
                .collect::<Result<_>>()?;
            Some(labels)
        } else {
            None
        };

        Dataset::from_clips(clips, labels)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn num_classes(&self) -> Option<u32> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_validates_range_and_numel() {
        assert!(VideoClip::new(vec![0.5; 8], (2, 2, 2, 1), "a", 1).is_ok());
        assert!(VideoClip::new(vec![0.5; 7], (2, 2, 2, 1), "a", 1).is_err());
        assert!(VideoClip::new(vec![1.5; 8], (2, 2, 2, 1), "a", 1).is_err());
        assert!(VideoClip::new(vec![f32::NAN; 8], (2, 2, 2, 1), "a", 1).is_err());
    }

    #[test]
    fn offset_is_channel_last_row_major() {
        let clip = VideoClip::new(
            (0..24).map(|i| i as f32 / 24.0).collect(),
            (2, 2, 3, 2),
            "a",
            1,
        )
        .unwrap();
        assert_eq!(clip.offset(0, 0, 0, 0), 0);
        assert_eq!(clip.offset(0, 0, 0, 1), 1);
        assert_eq!(clip.offset(0, 0, 1, 0), 2);
        assert_eq!(clip.offset(0, 1, 0, 0), 6);
        assert_eq!(clip.offset(1, 0, 0, 0), 12);
    }
}
