//! Image and raw tensor files.
//!
//! Raw tensor layout (little-endian): `"SCWT" | u32 rank | rank × u32 extent |
//! f32 data, row-major`.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::weights::Reader;

pub const TENSOR_MAGIC: &[u8; 4] = b"SCWT";

pub fn tensor_to_bytes<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TENSOR_MAGIC {
        return Err(Error::Corrupt("not a tensor file (bad magic)".into()));
    }
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Corrupt(format!("tensor rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::Corrupt("tensor extents overflow".into()))?;
    let raw = r.take(n.checked_mul(4).ok_or(Error::Truncated)?)?;
    if !r.rest().is_empty() {
        return Err(Error::Corrupt("trailing bytes after tensor data".into()));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| S::of(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    std::fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn read_tensor<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    tensor_from_bytes(&std::fs::read(path)?)
}

/// Reads a binary PPM or a `(3, H, W)` raw tensor as an image in `[0, 1]`.
pub fn read_image<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(TENSOR_MAGIC) {
        let t: Tensor<S> = tensor_from_bytes(&bytes)?;
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(Error::Corrupt(format!("image tensor has shape {:?}", t.shape())));
        }
        return Ok(t);
    }
    if !bytes.starts_with(b"P6") {
        return Err(Error::Corrupt("expected a binary (P6) PPM or a tensor file".into()));
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| Error::Corrupt(format!("PPM: {e}")))?;
    if img.color() != image::ColorType::Rgb8 {
        return Err(Error::Corrupt(format!("PPM must be 8-bit RGB, found {:?}", img.color())));
    }
    Ok(from_rgb(&img.to_rgb8()))
}

pub fn from_rgb<S: Scalar>(img: &RgbImage) -> Tensor<S> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        S::of(f64::from(raw[3 * p + c]) / 255.0)
    })
}

/// Rounds a `(3, H, W)` image in `[0, 1]` to 8-bit RGB, clamping.
pub fn to_rgb<S: Scalar>(t: &Tensor<S>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("to_rgb", format!("{s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut raw = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            let v = (t.data()[c * h * w + p].as_f64() * 255.0).round().clamp(0.0, 255.0);
            raw.push(v as u8);
        }
    }
    RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::shape("to_rgb", "buffer size"))
}

/// Binary (P6) PPM bytes of a `(3, H, W)` image in `[0, 1]`.
pub fn ppm_bytes<S: Scalar>(t: &Tensor<S>) -> Result<Vec<u8>> {
    let img = to_rgb(t)?;
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| Error::Corrupt(format!("PPM: {e}")))?;
    Ok(out)
}

pub fn write_ppm<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    std::fs::write(path, ppm_bytes(t)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_and_errors() {
        let t = Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.5);
        let b = tensor_to_bytes(&t);
        assert_eq!(b.len(), 4 + 4 + 8 + 24);
        assert_eq!(tensor_from_bytes::<f32>(&b).unwrap(), t);
        assert!(matches!(tensor_from_bytes::<f32>(&b[..b.len() - 1]), Err(Error::Truncated)));
        let mut c = b.clone();
        c[0] = b'X';
        assert!(matches!(tensor_from_bytes::<f32>(&c), Err(Error::Corrupt(_))));
    }

    #[test]
    fn rgb_roundtrip_is_exact_on_8bit_values() {
        let t: Tensor<f64> = Tensor::from_fn(vec![3, 2, 5], |i| ((i * 37) % 256) as f64 / 255.0);
        assert_eq!(from_rgb::<f64>(&to_rgb(&t).unwrap()), t);
    }

    #[test]
    fn ppm_file_roundtrip() {
        let t: Tensor<f64> = Tensor::from_fn(vec![3, 4, 6], |i| ((i * 11) % 256) as f64 / 255.0);
        let b = ppm_bytes(&t).unwrap();
        assert!(b.starts_with(b"P6\n6 4 255\n"), "{:?}", &b[..12]);
        assert_eq!(b.len(), 11 + 3 * 24);
        let path = std::env::temp_dir().join(format!("scwa-io-{}.ppm", std::process::id()));
        write_ppm(&path, &t).unwrap();
        let back: Tensor<f64> = read_image(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(back, t);
    }
}
