//! PNG (8-bit sRGB), single-channel mask PNG and linear PFM files.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Codec {
        path: String,
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}: malformed PFM")]
    Pfm(String),
    #[error("buffer of {got} values does not match {width}×{height}×{channels}")]
    Size {
        width: usize,
        height: usize,
        channels: usize,
        got: usize,
    },
}

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn check(width: usize, height: usize, channels: usize, got: usize) -> Result<(), ImageError> {
    if width * height * channels != got {
        return Err(ImageError::Size {
            width,
            height,
            channels,
            got,
        });
    }
    Ok(())
}

/// Encodes a linear RGB buffer to 8-bit sRGB.
pub fn encode_srgb8(color: &[f64], width: usize, height: usize) -> Result<RgbImage, ImageError> {
    check(width, height, 3, color.len())?;
    let raw: Vec<u8> = color.iter().map(|&v| quantize(linear_to_srgb(v))).collect();
    Ok(ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, raw).expect("sized buffer"))
}

/// Linear values a written PNG decodes back to.
pub fn round_trip_srgb8(color: &[f64]) -> Vec<f64> {
    color.iter().map(|&v| srgb_to_linear(quantize(linear_to_srgb(v)) as f64 / 255.0)).collect()
}

pub fn save_png(path: &Path, color: &[f64], width: usize, height: usize) -> Result<(), ImageError> {
    encode_srgb8(color, width, height)?.save(path).map_err(|source| ImageError::Codec {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an RGB PNG as linear values; returns `(pixels, width, height)`.
pub fn load_png(path: &Path) -> Result<(Vec<f64>, usize, usize), ImageError> {
    let img = image::open(path)
        .map_err(|source| ImageError::Codec {
            path: path.display().to_string(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let px = img.into_raw().into_iter().map(|b| srgb_to_linear(b as f64 / 255.0)).collect();
    Ok((px, w as usize, h as usize))
}

/// Binary mask: 255 where `alpha > 0.5`.
pub fn save_mask(path: &Path, alpha: &[f64], width: usize, height: usize) -> Result<(), ImageError> {
    check(width, height, 1, alpha.len())?;
    let raw: Vec<u8> = alpha.iter().map(|&a| if a > 0.5 { 255 } else { 0 }).collect();
    let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, raw).expect("sized buffer");
    img.save(path).map_err(|source| ImageError::Codec {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a mask PNG as 0/1 values.
pub fn load_mask(path: &Path) -> Result<(Vec<f64>, usize, usize), ImageError> {
    let img = image::open(path)
        .map_err(|source| ImageError::Codec {
            path: path.display().to_string(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let px = img.into_raw().into_iter().map(|b| if b >= 128 { 1.0 } else { 0.0 }).collect();
    Ok((px, w as usize, h as usize))
}

/// Little-endian color PFM, rows stored bottom to top.
pub fn save_pfm(path: &Path, color: &[f64], width: usize, height: usize) -> Result<(), ImageError> {
    check(width, height, 3, color.len())?;
    let io = |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    write!(f, "PF\n{width} {height}\n-1.0\n").map_err(io)?;
    for y in (0..height).rev() {
        for v in &color[3 * y * width..3 * (y + 1) * width] {
            f.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    f.flush().map_err(io)
}

pub fn load_pfm(path: &Path) -> Result<(Vec<f64>, usize, usize), ImageError> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| ImageError::Io {
        path: name.clone(),
        source,
    })?;
    let mut r = BufReader::new(file);
    let line = |r: &mut BufReader<std::fs::File>| -> Result<String, ImageError> {
        let mut s = String::new();
        r.read_line(&mut s).map_err(|_| ImageError::Pfm(name.clone()))?;
        Ok(s.trim().to_string())
    };
    if line(&mut r)? != "PF" {
        return Err(ImageError::Pfm(name));
    }
    let dims = line(&mut r)?;
    let mut it = dims.split_whitespace().map(|v| v.parse::<usize>());
    let (w, h) = match (it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h))) => (w, h),
        _ => return Err(ImageError::Pfm(name)),
    };
    let scale: f64 = line(&mut r)?.parse().map_err(|_| ImageError::Pfm(name.clone()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|_| ImageError::Pfm(name.clone()))?;
    if bytes.len() != 12 * w * h {
        return Err(ImageError::Pfm(name));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            (if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
        })
        .collect();
    let mut out = vec![0.0; 3 * w * h];
    for y in 0..h {
        let src = &vals[3 * (h - 1 - y) * w..3 * (h - y) * w];
        out[3 * y * w..3 * (y + 1) * w].copy_from_slice(src);
    }
    Ok((out, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_round_trip() {
        for i in 0..=100 {
            let v = i as f64 / 100.0;
            assert!((srgb_to_linear(linear_to_srgb(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (w, h) = (5, 3);
        let color: Vec<f64> = (0..3 * w * h).map(|i| i as f64 / 45.0).collect();
        let png = dir.path().join("a.png");
        save_png(&png, &color, w, h).unwrap();
        let (back, bw, bh) = load_png(&png).unwrap();
        assert_eq!((bw, bh), (w, h));
        assert_eq!(back, round_trip_srgb8(&color));
        let pfm = dir.path().join("a.pfm");
        save_pfm(&pfm, &color, w, h).unwrap();
        let (back, _, _) = load_pfm(&pfm).unwrap();
        for (a, b) in back.iter().zip(&color) {
            assert!((a - b).abs() < 1e-7);
        }
        let mask = dir.path().join("m.png");
        let alpha: Vec<f64> = (0..w * h).map(|i| i as f64 / 14.0).collect();
        save_mask(&mask, &alpha, w, h).unwrap();
        let (m, _, _) = load_mask(&mask).unwrap();
        assert_eq!(m, alpha.iter().map(|&a| if a > 0.5 { 1.0 } else { 0.0 }).collect::<Vec<_>>());
    }
}
