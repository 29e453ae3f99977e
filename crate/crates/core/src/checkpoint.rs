//! Binary checkpoint format.
//!
//! Layout: magic `MAECKPT1`, u32 record count, then per-tensor records
//! `{name_len u32, name bytes, rank u32, extents u32 x rank, payload f32 LE}`.
//! Write -> read roundtrips are bit-identical.
//!
//! Model checkpoints carry a leading `meta.config` record that encodes the
//! architecture, grid, and masking defaults as small integers, so a model
//! can be rebuilt from its checkpoint alone.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MaeError, Result};
use crate::masking::{MaskSampler, TokenGrid};
use crate::model::{MaeConfig, MaeModel};
use crate::tensor::Tensor;
use crate::tokenizer::PatchSpec;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MAECKPT1";

/// Name of the model-description record.
pub const META_RECORD: &str = "meta.config";

const META_VERSION: u32 = 1;

/// Writes named tensors in the given order.
pub fn save_checkpoint(path: &Path, records: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, tensor) in records {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &extent in tensor.shape() {
            out.write_all(&(extent as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads back every record, in file order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut input = BufReader::new(File::open(path)?);
    let bad = |detail: String| MaeError::Format {
        format: "checkpoint",
        detail,
    };

    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let count = u32::from_le_bytes(word) as usize;

    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        input.read_exact(&mut word)?;
        let name_len = u32::from_le_bytes(word) as usize;
        let mut name_bytes = vec![0u8; name_len];
        input.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| bad("record name is not UTF-8".to_string()))?;

        input.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            input.read_exact(&mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        input.read_exact(&mut payload)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push((name, Tensor::from_vec(shape, data)?));
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after last record".to_string()));
    }
    Ok(records)
}

fn sampler_code(sampler: MaskSampler) -> f32 {
    match sampler {
        MaskSampler::Agnostic => 0.0,
        MaskSampler::SpaceOnly => 1.0,
        MaskSampler::TimeOnly => 2.0,
        MaskSampler::Block => 3.0,
    }
}

fn sampler_from_code(code: f32) -> Result<MaskSampler> {
    match code as u32 {
        0 => Ok(MaskSampler::Agnostic),
        1 => Ok(MaskSampler::SpaceOnly),
        2 => Ok(MaskSampler::TimeOnly),
        3 => Ok(MaskSampler::Block),
        other => Err(MaeError::Format {
            format: "checkpoint",
            detail: format!("unknown sampler code {other}"),
        }),
    }
}

fn meta_record(config: &MaeConfig, grid: TokenGrid) -> Tensor<f32> {
    let values = vec![
        META_VERSION as f32,
        config.patch.t_patch as f32,
        config.patch.p as f32,
        config.patch.in_channels as f32,
        config.d_enc as f32,
        config.depth_enc as f32,
        config.heads_enc as f32,
        config.d_dec as f32,
        config.depth_dec as f32,
        config.heads_dec as f32,
        config.mlp_ratio as f32,
        grid.t as f32,
        grid.h as f32,
        grid.w as f32,
        // ratio stored in millionths so the f32 record reproduces the f64
        (config.mask_ratio * 1e6).round() as f32,
        sampler_code(config.sampler),
        if config.target_normalize { 1.0 } else { 0.0 },
    ];
    Tensor::from_vec(vec![values.len()], values).unwrap()
}

fn parse_meta(meta: &Tensor<f32>) -> Result<(MaeConfig, TokenGrid)> {
    let bad = |detail: String| MaeError::Format {
        format: "checkpoint",
        detail,
    };
    let v = meta.data();
    if v.len() != 17 {
        return Err(bad(format!("meta.config has {} fields, expected 17", v.len())));
    }
    if v[0] as u32 != META_VERSION {
        return Err(bad(format!("unsupported meta version {}", v[0])));
    }
    let config = MaeConfig {
        patch: PatchSpec {
            t_patch: v[1] as usize,
            p: v[2] as usize,
            in_channels: v[3] as usize,
        },
        d_enc: v[4] as usize,
        depth_enc: v[5] as usize,
        heads_enc: v[6] as usize,
        d_dec: v[7] as usize,
        depth_dec: v[8] as usize,
        heads_dec: v[9] as usize,
        mlp_ratio: v[10] as usize,
        mask_ratio: v[14] as f64 / 1e6,
        sampler: sampler_from_code(v[15])?,
        target_normalize: v[16] != 0.0,
    };
    let grid = TokenGrid::new(v[11] as usize, v[12] as usize, v[13] as usize);
    config.validate()?;
    Ok((config, grid))
}

/// Saves a model (meta record first, parameters in canonical order), plus
/// any extra records such as a classifier head.
pub fn save_model(
    path: &Path,
    model: &MaeModel<f32>,
    extras: &[(String, Tensor<f32>)],
) -> Result<()> {
    let mut records = vec![(META_RECORD.to_string(), meta_record(&model.config, model.grid))];
    model.visit_params(&mut |name, tensor, _| {
        records.push((name, tensor.clone()));
    });
    records.extend_from_slice(extras);
    save_checkpoint(path, &records)
}

/// Rebuilds a model from its checkpoint; unknown records are returned as
/// extras in file order.
pub fn load_model(path: &Path) -> Result<(MaeModel<f32>, Vec<(String, Tensor<f32>)>)> {
    let records = load_checkpoint(path)?;
    let mut by_name: std::collections::BTreeMap<String, Tensor<f32>> = records
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let meta = by_name.remove(META_RECORD).ok_or_else(|| MaeError::Format {
        format: "checkpoint",
        detail: "missing meta.config record".to_string(),
    })?;
    let (config, grid) = parse_meta(&meta)?;
    let mut model = MaeModel::<f32>::init(config, grid, 0)?;

    let mut missing = Vec::new();
    model.visit_params_mut(&mut |name, tensor, _| {
        match by_name.remove(&name) {
            Some(stored) if stored.shape() == tensor.shape() => {
                *tensor = stored.with_grad();
            }
            Some(stored) => missing.push(format!(
                "{name}: stored shape {:?} vs expected {:?}",
                stored.shape(),
                tensor.shape()
            )),
            None => missing.push(format!("{name}: record missing")),
        }
    });
    if !missing.is_empty() {
        return Err(MaeError::Format {
            format: "checkpoint",
            detail: missing.join("; "),
        });
    }

    // remaining records are extras; preserve file order
    let extras: Vec<(String, Tensor<f32>)> = records
        .into_iter()
        .filter(|(n, _)| by_name.contains_key(n))
        .collect();
    Ok((model, extras))
}
