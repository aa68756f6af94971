//! KMT binary tensor files and 8-bit PNG ingestion.
//!
//! Layout: the magic `KMTENSR1`, a dtype byte (0 = f32, 1 = u8), a rank byte,
//! one little-endian u64 per extent, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::NdTensor;

pub const KMT_MAGIC: &[u8; 8] = b"KMTENSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
        }
    }
}

pub fn encode_kmt(t: &NdTensor, dtype: DType) -> Vec<u8> {
    let elem = if dtype == DType::F32 { 4 } else { 1 };
    let mut out = Vec::with_capacity(10 + 8 * t.ndim() + elem * t.len());
    out.extend_from_slice(KMT_MAGIC);
    out.push(dtype.code());
    out.push(t.ndim() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::U8 => out.extend(t.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8)),
    }
    out
}

pub fn decode_kmt(bytes: &[u8]) -> Result<(NdTensor, DType)> {
    if bytes.len() < 10 || &bytes[..8] != KMT_MAGIC {
        return Err(Error::Format("missing KMTENSR1 magic".into()));
    }
    let dtype = match bytes[8] {
        0 => DType::F32,
        1 => DType::U8,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    let ndim = bytes[9] as usize;
    let header = 10 + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[10..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let payload = &bytes[header..];
    let data: Vec<f64> = match dtype {
        DType::F32 => {
            if payload.len() != 4 * numel {
                return Err(Error::Format(format!(
                    "payload has {} bytes, expected {}",
                    payload.len(),
                    4 * numel
                )));
            }
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        DType::U8 => {
            if payload.len() != numel {
                return Err(Error::Format(format!(
                    "payload has {} bytes, expected {numel}",
                    payload.len()
                )));
            }
            payload.iter().map(|&b| b as f64).collect()
        }
    };
    Ok((NdTensor::new(shape, data)?, dtype))
}

pub fn write_kmt(path: impl AsRef<Path>, t: &NdTensor, dtype: DType) -> Result<()> {
    fs::write(path, encode_kmt(t, dtype))?;
    Ok(())
}

pub fn read_kmt(path: impl AsRef<Path>) -> Result<NdTensor> {
    let bytes = fs::read(path)?;
    Ok(decode_kmt(&bytes)?.0)
}

/// Loads an 8-bit grayscale PNG as an `[H, W]` tensor scaled to `[0, 1]`.
pub fn read_png_gray(path: impl AsRef<Path>) -> Result<NdTensor> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    NdTensor::new(vec![h as usize, w as usize], data)
}

/// Encodes an `[H, W]` tensor with values in `[0, 1]` as an 8-bit PNG.
pub fn encode_png_gray(t: &NdTensor) -> Result<Vec<u8>> {
    if t.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!("PNG needs a 2D tensor, got {:?}", t.shape())));
    }
    let (h, w) = t.dims2();
    let raw: Vec<u8> =
        t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Format("PNG buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_png_gray(path: impl AsRef<Path>, t: &NdTensor) -> Result<()> {
    fs::write(path, encode_png_gray(t)?)?;
    Ok(())
}
