//! File formats: 8-bit PNG for images (linear [0,1] mapping, no gamma
//! transform), Middlebury .flo for flows, little-endian PFM for sigma maps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::grid::{FlowField, Image, SigmaMap};

/// Middlebury .flo magic: the bytes "PIEH" interpreted as a little-endian f32.
pub const FLO_MAGIC: f32 = 202021.25;

pub fn load_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path)?;
    match dynimg {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.into_raw().iter().map(|p| *p as f64 / 255.0).collect();
            Ok(Image::from_data(w, h, 1, data))
        }
        other => {
            let rgb = other.into_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            let n = w * h;
            let mut data = vec![0.0; n * 3];
            for i in 0..n {
                for c in 0..3 {
                    data[c * n + i] = raw[i * 3 + c] as f64 / 255.0;
                }
            }
            Ok(Image::from_data(w, h, 3, data))
        }
    }
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let w = img.width() as u32;
    let h = img.height() as u32;
    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match img.channels() {
        1 => {
            let buf: Vec<u8> = img.plane(0).iter().map(|v| quantize(*v)).collect();
            let g = image::GrayImage::from_raw(w, h, buf)
                .ok_or_else(|| Error::Format("png buffer size".into()))?;
            g.save(path)?;
        }
        _ => {
            let n = img.num_pixels();
            let mut buf = vec![0u8; n * 3];
            for i in 0..n {
                for c in 0..3 {
                    buf[i * 3 + c] = quantize(img.data()[c * n + i]);
                }
            }
            let rgb = image::RgbImage::from_raw(w, h, buf)
                .ok_or_else(|| Error::Format("png buffer size".into()))?;
            rgb.save(path)?;
        }
    }
    Ok(())
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_f32::<LittleEndian>(FLO_MAGIC)?;
    w.write_i32::<LittleEndian>(flow.width() as i32)?;
    w.write_i32::<LittleEndian>(flow.height() as i32)?;
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            let (u, v) = flow.at(x, y);
            w.write_f32::<LittleEndian>(u as f32)?;
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = r.read_f32::<LittleEndian>()?;
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!(
            "bad .flo magic {magic}, expected {FLO_MAGIC}"
        )));
    }
    let w = r.read_i32::<LittleEndian>()?;
    let h = r.read_i32::<LittleEndian>()?;
    if w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(Error::Format(format!("bad .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let mut flow = FlowField::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let u = r.read_f32::<LittleEndian>()? as f64;
            let v = r.read_f32::<LittleEndian>()? as f64;
            flow.set(x, y, u, v);
        }
    }
    Ok(flow)
}

/// Single-channel PFM, little-endian (negative scale), rows bottom-to-top
/// per the format convention.
pub fn write_pfm(path: &Path, map: &SigmaMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{} {}\n-1.0\n", map.width(), map.height())?;
    for y in (0..map.height()).rev() {
        for x in 0..map.width() {
            w.write_f32::<LittleEndian>(map.at(x, y) as f32)?;
        }
    }
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<SigmaMap> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    // three whitespace-terminated tokens: type, "w h", scale
    let mut tokens = Vec::new();
    let mut cur = Vec::new();
    while tokens.len() < 4 {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        header.push(byte[0]);
        if byte[0].is_ascii_whitespace() {
            if !cur.is_empty() {
                tokens.push(String::from_utf8_lossy(&cur).to_string());
                cur.clear();
            }
        } else {
            cur.push(byte[0]);
        }
    }
    if tokens[0] != "Pf" {
        return Err(Error::Format(format!("bad PFM type {}", tokens[0])));
    }
    let w: usize = tokens[1]
        .parse()
        .map_err(|_| Error::Format("bad PFM width".into()))?;
    let h: usize = tokens[2]
        .parse()
        .map_err(|_| Error::Format("bad PFM height".into()))?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".into()))?;
    if scale >= 0.0 {
        return Err(Error::Format("big-endian PFM not supported".into()));
    }
    let mut sigma = vec![0.0; w * h];
    for y in (0..h).rev() {
        for x in 0..w {
            sigma[y * w + x] = r.read_f32::<LittleEndian>()? as f64;
        }
    }
    Ok(SigmaMap::from_vec(w, h, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn flo_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let mut flow = FlowField::new(7, 5);
        for y in 0..5 {
            for x in 0..7 {
                flow.set(x, y, x as f64 * 0.25 - 1.0, y as f64 * 0.5);
            }
        }
        write_flo(&path, &flow).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(flow, back);
        // byte-level: rewriting the parsed flow reproduces the file exactly
        let path2 = dir.path().join("g.flo");
        write_flo(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.pfm");
        let map = SigmaMap::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.125).collect());
        write_pfm(&path, &map).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(map, back);
        let path2 = dir.path().join("t.pfm");
        write_pfm(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("i.png");
        let img = Image::from_fn(16, 10, |x, y| ((x + y) as f64 / 26.0).min(1.0));
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.channels(), 1);
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn png_rgb_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.png");
        let n = 8 * 6;
        let data: Vec<f64> = (0..3 * n).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = Image::from_data(8, 6, 3, data);
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.channels(), 3);
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn bad_flo_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        std::fs::write(&path, [0u8; 32]).unwrap();
        assert!(read_flo(&path).is_err());
    }
}
