//! Grayscale attention images.

use std::path::{Path, PathBuf};

use crate::env::Image;
use crate::error::{Error, Result};
use crate::idem::LayerAttention;
use crate::model::EvoDepth;
use crate::nn::ParamStore;

/// Maps `values` linearly onto 0..=255. A constant input maps to all zeros.
pub fn min_max_bytes(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Invalid(format!(
            "pgm payload has {} bytes, expected {width}x{height}",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Parses a P5 file written by [`encode_pgm`].
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Invalid("malformed pgm".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?;
    if data.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, data.to_vec()))
}

pub fn attention_file_name(layer: usize, head: usize, view: usize) -> String {
    format!("layer{layer}_head{head}_view{view}.pgm")
}

/// Writes one image per layer, head and key view: the mean attention each
/// patch receives from all queries, min-max scaled.
pub fn write_attention_maps(maps: &[LayerAttention], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(Error::io(format!("creating {}", out_dir.display())))?;
    let mut written = Vec::new();
    for m in maps {
        for head in 0..m.heads {
            for view in 0..m.num_views {
                let pixels = min_max_bytes(&m.received(head, view, None));
                let bytes = encode_pgm(m.per_side, m.per_side, &pixels)?;
                let path = out_dir.join(attention_file_name(m.layer, head, view));
                std::fs::write(&path, bytes).map_err(Error::io(format!("writing {}", path.display())))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

pub fn export_attention(model: &EvoDepth, store: &ParamStore, views: &[Image], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let idem = model
        .idem
        .as_ref()
        .ok_or_else(|| Error::Config("model has no IDEM, so there is no attention to export".into()))?;
    let maps = idem.attention_maps(store, views)?;
    write_attention_maps(&maps, out_dir)
}
