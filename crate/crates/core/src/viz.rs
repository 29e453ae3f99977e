//! Binary PPM (P6, 8-bit) frame export.
//!
//! Frames are written one file per time step as `{stem}_f{index:03}.ppm`.
//! Triptych mode lays original / masked / reconstruction side by side in a
//! single image per frame.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{MaeError, Result};
use crate::video::VideoClip;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB bytes for one frame; grayscale clips replicate their channel.
fn frame_rgb(clip: &VideoClip, t: usize) -> Result<Vec<u8>> {
    let (_, h, w, c) = clip.dims();
    if c != 1 && c != 3 {
        return Err(MaeError::Config(format!(
            "PPM export supports 1 or 3 channels, clip has {c}"
        )));
    }
    let mut rgb = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            if c == 1 {
                let v = to_byte(clip.pixel(t, y, x, 0));
                rgb.extend_from_slice(&[v, v, v]);
            } else {
                for ch in 0..3 {
                    rgb.push(to_byte(clip.pixel(t, y, x, ch)));
                }
            }
        }
    }
    Ok(rgb)
}

fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{width} {height}\n255\n")?;
    out.write_all(rgb)?;
    out.flush()?;
    Ok(())
}

/// Writes every frame of a clip; returns the created paths in frame order.
pub fn write_frames(dir: &Path, stem: &str, clip: &VideoClip) -> Result<Vec<PathBuf>> {
    let (t, h, w, _) = clip.dims();
    let mut paths = Vec::with_capacity(t);
    for ft in 0..t {
        let rgb = frame_rgb(clip, ft)?;
        let path = dir.join(format!("{stem}_f{ft:03}.ppm"));
        write_ppm(&path, w, h, &rgb)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes per-frame triptychs (original | masked | reconstruction).
pub fn write_triptych_frames(
    dir: &Path,
    stem: &str,
    original: &VideoClip,
    masked: &VideoClip,
    reconstruction: &VideoClip,
) -> Result<Vec<PathBuf>> {
    if original.dims() != masked.dims() || original.dims() != reconstruction.dims() {
        return Err(MaeError::Contract(format!(
            "triptych panels disagree: {:?} / {:?} / {:?}",
            original.dims(),
            masked.dims(),
            reconstruction.dims()
        )));
    }
    let (t, h, w, _) = original.dims();
    let mut paths = Vec::with_capacity(t);
    for ft in 0..t {
        let panels = [
            frame_rgb(original, ft)?,
            frame_rgb(masked, ft)?,
            frame_rgb(reconstruction, ft)?,
        ];
        let mut rgb = Vec::with_capacity(h * w * 9);
        for y in 0..h {
            for panel in &panels {
                rgb.extend_from_slice(&panel[y * w * 3..(y + 1) * w * 3]);
            }
        }
        let path = dir.join(format!("{stem}_f{ft:03}.ppm"));
        write_ppm(&path, 3 * w, h, &rgb)?;
        paths.push(path);
    }
    Ok(paths)
}
