//! 16-bit binary PGM images mapping `[-1, 1]` onto `[0, 65535]`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array3, Axis};

use crate::denoiser::{check_finite, Grid};
use crate::error::{Error, Result};

const MAX16: f64 = 65535.0;

fn to_level(v: f64) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * MAX16).round()) as u16
}

/// Channel-averaged image as a binary PGM (maxval 65535, big-endian samples).
pub fn encode_pgm(image: &Grid) -> Result<Vec<u8>> {
    check_finite(image, "image")?;
    let mean = image
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::InvalidArgument("image has no channels".into()))?;
    let (h, w) = mean.dim();
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(2 * h * w);
    for v in &mean {
        out.extend_from_slice(&to_level(*v).to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Grid) -> Result<()> {
    let bytes = encode_pgm(image)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parses a binary PGM with any maxval up to 65535 into a `(1, H, W)` grid.
pub fn decode_pgm(bytes: &[u8], origin: &str) -> Result<Grid> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(origin, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::parse(origin, format!("expected P5 magic, got `{}`", fields[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::parse(origin, format!("bad {what} `{s}`")))
    };
    let (w, h, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::parse(origin, format!("unsupported geometry {w}x{h} maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let bpp = if maxval > 255 { 2 } else { 1 };
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < w * h * bpp {
        return Err(Error::parse(origin, "raster shorter than header implies"));
    }
    let m = maxval as f64;
    Ok(Array3::from_shape_fn((1, h, w), |(_, y, x)| {
        let i = (y * w + x) * bpp;
        let level = if bpp == 2 {
            u16::from_be_bytes([raster[i], raster[i + 1]]) as f64
        } else {
            raster[i] as f64
        };
        level / m * 2.0 - 1.0
    }))
}

pub fn read_pgm(path: &Path) -> Result<Grid> {
    decode_pgm(&fs::read(path)?, &path.display().to_string())
}

#[cfg(feature = "png")]
pub fn write_png(path: &Path, image: &Grid) -> Result<()> {
    let mean = image
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::InvalidArgument("image has no channels".into()))?;
    let (h, w) = mean.dim();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_level(mean[[y as usize, x as usize]])])
    });
    buf.save(path)
        .map_err(|e| Error::InvalidArgument(format!("png write failed: {e}")))
}
