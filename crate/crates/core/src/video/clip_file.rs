//! Binary clip format.
//!
//! Layout: magic `VMAE`, version u32, then T, H, W, C as u32, then
//! `T*H*W*C` little-endian f32 values, frame-major then row-major then
//! channel-last. Write -> read roundtrips are bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MaeError, Result};
use crate::video::VideoClip;

pub const CLIP_MAGIC: &[u8; 4] = b"VMAE";
pub const CLIP_VERSION: u32 = 1;

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CLIP_MAGIC)?;
    out.write_all(&CLIP_VERSION.to_le_bytes())?;
    let (t, h, w, c) = clip.dims();
    for dim in [t, h, w, c] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    for &v in clip.pixels() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a clip; the source id is the file stem and the stride defaults to 1
/// (neither is part of the format).
pub fn read_clip(path: &Path) -> Result<VideoClip> {
    let mut input = BufReader::new(File::open(path)?);
    let bad = |detail: String| MaeError::Format {
        format: "clip file",
        detail,
    };

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CLIP_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CLIP_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        input.read_exact(&mut word)?;
        *d = u32::from_le_bytes(word) as usize;
    }
    let numel = dims.iter().product::<usize>();
    let mut payload = vec![0u8; numel * 4];
    input.read_exact(&mut payload)?;
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after payload".to_string()));
    }
    let frames: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    VideoClip::new(frames, (dims[0], dims[1], dims[2], dims[3]), stem, 1)
}
