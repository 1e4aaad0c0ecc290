//! File formats: 8-bit PNG frames, 16-bit PNG transmission maps, PFM depth
//! maps, a double-precision float-map container for inspection dumps, and
//! plain key-value manifests.
//!
//! All writers go through a write-then-rename step so a failed command
//! never leaves partial output behind.

use crate::error::{DehazeError, Result};
use crate::haze::{DepthMap, Frame, TransmissionMap};
use image::{ImageBuffer, Luma, Rgb};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// Writes `bytes` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

fn quantize_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round_ties_even() as u16
}

/// Encodes a frame as 8-bit RGB PNG (half-to-even rounding).
pub fn frame_to_png_bytes(frame: &Frame) -> Result<Vec<u8>> {
    let n = frame.pixels();
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(frame.width as u32, frame.height as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let p = y as usize * frame.width + x as usize;
        *px = Rgb([
            quantize_u8(frame.rgb[p]),
            quantize_u8(frame.rgb[n + p]),
            quantize_u8(frame.rgb[2 * n + p]),
        ]);
    }
    let mut bytes = Vec::new();
    buf.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    Ok(bytes)
}

pub fn write_frame_png(path: &Path, frame: &Frame) -> Result<()> {
    write_atomic(path, &frame_to_png_bytes(frame)?)
}

pub fn read_frame_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut rgb = vec![0.0; 3 * n];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        rgb[p] = px[0] as f64 / 255.0;
        rgb[n + p] = px[1] as f64 / 255.0;
        rgb[2 * n + p] = px[2] as f64 / 255.0;
    }
    Frame::new(h, w, rgb)
}

/// 16-bit grayscale PNG with fixed-point scale 1/65535.
pub fn write_transmission_png(path: &Path, t: &TransmissionMap) -> Result<()> {
    let mut buf =
        ImageBuffer::<Luma<u16>, Vec<u16>>::new(t.width as u32, t.height as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        *px = Luma([quantize_u16(t.t[y as usize * t.width + x as usize])]);
    }
    let mut bytes = Vec::new();
    buf.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    write_atomic(path, &bytes)
}

pub fn read_transmission_png(path: &Path) -> Result<TransmissionMap> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = vec![0.0; w * h];
    for (x, y, px) in img.enumerate_pixels() {
        t[y as usize * w + x as usize] = px[0] as f64 / 65535.0;
    }
    Ok(TransmissionMap {
        height: h,
        width: w,
        t,
    })
}

/// Reads a grayscale PFM ("Pf") depth map; invalid pixels are filled with
/// the per-frame maximum valid depth.
pub fn read_depth_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path)?;
    let (h, w, data) = parse_pfm(&bytes)
        .map_err(|e| DehazeError::Format(format!("{}: {e}", path.display())))?;
    DepthMap::from_raw_filled(h, w, data)
}

/// Writes a grayscale PFM (little-endian, bottom-up rows per convention).
pub fn write_depth_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).as_bytes());
    for row in (0..depth.height).rev() {
        for x in 0..depth.width {
            out.extend_from_slice(&(depth.d[row * depth.width + x] as f32).to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

fn parse_pfm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let mut cursor = std::io::Cursor::new(bytes);
    let mut token = || -> std::result::Result<String, String> {
        let mut s = String::new();
        let mut b = [0u8; 1];
        // skip whitespace
        loop {
            cursor.read_exact(&mut b).map_err(|_| "truncated header")?;
            if !b[0].is_ascii_whitespace() {
                break;
            }
        }
        loop {
            s.push(b[0] as char);
            if cursor.read_exact(&mut b).is_err() || b[0].is_ascii_whitespace() {
                break;
            }
        }
        Ok(s)
    };
    let magic = token()?;
    if magic != "Pf" {
        return Err(format!("unsupported PFM magic {magic:?} (grayscale Pf only)"));
    }
    let w: usize = token()?.parse().map_err(|_| "bad width")?;
    let h: usize = token()?.parse().map_err(|_| "bad height")?;
    let scale: f64 = token()?.parse().map_err(|_| "bad scale")?;
    let little_endian = scale < 0.0;
    let offset = cursor.position() as usize;
    let need = w * h * 4;
    if bytes.len() < offset + need {
        return Err("truncated pixel data".to_string());
    }
    let mut data = vec![0.0; w * h];
    for row in 0..h {
        for x in 0..w {
            let i = offset + (row * w + x) * 4;
            let raw: [u8; 4] = bytes[i..i + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            } as f64;
            // PFM rows run bottom-up
            data[(h - 1 - row) * w + x] = v;
        }
    }
    Ok((h, w, data))
}

/// Double-precision float map for inspection dumps.
/// Layout: `DFM1\n<channels> <height> <width>\n` then little-endian f64
/// values in row-major [C, H, W] order.
pub fn write_dfm(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let (c, h, w) = match shape {
        [c, h, w] => (*c, *h, *w),
        [h, w] => (1, *h, *w),
        [c] => (*c, 1, 1),
        _ => {
            return Err(DehazeError::dim(format!(
                "dfm supports up to 3 axes, got {shape:?}"
            )))
        }
    };
    if c * h * w != data.len() {
        return Err(DehazeError::dim("dfm shape/data mismatch".to_string()));
    }
    let mut out = Vec::with_capacity(data.len() * 8 + 32);
    out.extend_from_slice(format!("DFM1\n{c} {h} {w}\n").as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_dfm(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == b'\n')
        .nth(1)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| DehazeError::Format("dfm header truncated".to_string()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| DehazeError::Format("dfm header not utf-8".to_string()))?;
    let mut lines = header.lines();
    if lines.next() != Some("DFM1") {
        return Err(DehazeError::Format("bad dfm magic".to_string()));
    }
    let dims: Vec<usize> = lines
        .next()
        .unwrap_or("")
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| DehazeError::Format("bad dfm dims".to_string())))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(DehazeError::Format("dfm needs 3 dims".to_string()));
    }
    let n: usize = dims.iter().product();
    if bytes.len() < header_end + 8 * n {
        return Err(DehazeError::Format("dfm data truncated".to_string()));
    }
    let data = (0..n)
        .map(|i| {
            let o = header_end + i * 8;
            f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap())
        })
        .collect();
    Ok((dims, data))
}

/// Writes `key = value` lines.
pub fn write_manifest(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(&format!("{k} = {v}\n"));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            DehazeError::Format(format!("manifest line without '=': {line:?}"))
        })?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(entries)
}
