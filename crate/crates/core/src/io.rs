//! PNG and raw float-grid file formats.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const GRID_MAGIC: &str = "SRISPM1";

pub fn write_rgb_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let img = RgbImage::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| Error::Shape(format!("{} bytes for a {width}x{height} RGB image", pixels.len())))?;
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// `(width, height, pixels)`.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.to_rgb8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

/// Single-channel 8-bit PNG with foreground 255.
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let data = mask.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(mask.width as u32, mask.height as u32, data).unwrap();
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Any pixel value of 128 or more is foreground.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMask::new(h, w, img.into_raw().into_iter().map(|v| v >= 128).collect())
}

/// `SRISPM1\n{H} {W}\n` followed by row-major little-endian `f32`.
pub fn write_grid(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Shape(format!("{} values for a {height}x{width} grid", values.len())));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = format!("{GRID_MAGIC}\n{height} {width}\n").into_bytes();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(GRID_MAGIC.as_bytes()) {
        return Err(bad("missing SRISPM1 magic"));
    }
    let dims = std::str::from_utf8(lines.next().ok_or_else(|| bad("missing dimensions"))?).map_err(|_| bad("bad dimensions"))?;
    let (h, w) = dims
        .split_once(' ')
        .and_then(|(h, w)| Some((h.parse::<usize>().ok()?, w.parse::<usize>().ok()?)))
        .ok_or_else(|| bad("bad dimensions"))?;
    let payload = lines.next().unwrap_or(&[]);
    if payload.len() != 4 * h * w {
        return Err(bad("payload length does not match dimensions"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((h, w, values))
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        let values: Vec<f32> = (0..6).map(|i| i as f32 * 0.25 - 0.3).collect();
        write_grid(&p, 2, 3, &values).unwrap();
        assert_eq!(read_grid(&p).unwrap(), (2, 3, values));
        let raw = std::fs::read(&p).unwrap();
        assert!(raw.starts_with(b"SRISPM1\n2 3\n"));
        std::fs::write(&p, &raw[..raw.len() - 1]).unwrap();
        assert!(matches!(read_grid(&p), Err(Error::Format(_))));

        let m = BinaryMask::new(2, 3, vec![true, false, true, false, false, true]).unwrap();
        let mp = dir.path().join("m.png");
        write_mask_png(&mp, &m).unwrap();
        assert_eq!(read_mask_png(&mp).unwrap(), m);
        let img = image::open(&mp).unwrap();
        assert_eq!(img.color(), image::ColorType::L8);
    }

    #[test]
    fn rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let px: Vec<u8> = (0..2 * 4 * 3).map(|i| (i * 11) as u8).collect();
        write_rgb_png(&p, 4, 2, &px).unwrap();
        assert_eq!(read_rgb_png(&p).unwrap(), (4, 2, px));
    }
}
