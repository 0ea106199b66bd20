//! Binary PPM (P6) images and PGM (P5) masks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "PNM file",
        detail: detail.into(),
    }
}

/// `[0,1]` float to byte, rounding to nearest.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(malformed(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = image.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(to_byte(d[ch * h * w + i]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&v| v * 255));
    out
}

/// Parses `magic width height maxval` and returns the raster bytes.
fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("header ends early"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let m = token()?;
    if m != magic {
        return Err(malformed(format!("expected {magic}, found `{m}`")));
    }
    let num = |t: String| {
        t.parse::<usize>()
            .map_err(|_| malformed(format!("bad header number `{t}`")))
    };
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(malformed(format!("maxval {maxval}, only 255 is supported")));
    }
    if w == 0 || h == 0 {
        return Err(malformed("zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed("missing raster separator"));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, raster) = parse_header(bytes, "P6")?;
    if raster.len() != 3 * w * h {
        return Err(malformed(format!(
            "{w}×{h} PPM needs {} raster bytes, found {}",
            3 * w * h,
            raster.len()
        )));
    }
    let n = w * h;
    Tensor::new(
        vec![3, h, w],
        (0..3 * n).map(|j| raster[(j % n) * 3 + j / n] as f32 / 255.0).collect(),
    )
}

pub fn decode_pgm_mask(bytes: &[u8]) -> Result<Mask> {
    let (w, h, raster) = parse_header(bytes, "P5")?;
    if raster.len() != w * h {
        return Err(malformed(format!(
            "{w}×{h} PGM needs {} raster bytes, found {}",
            w * h,
            raster.len()
        )));
    }
    let data = raster
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(malformed(format!("mask value {other} is not 0 or 255"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(h, w, data)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    decode_ppm(&read(path)?).map_err(|e| with_path(e, path))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    decode_pgm_mask(&read(path)?).map_err(|e| with_path(e, path))
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    write(path, &encode_ppm(image)?)
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    write(path, &encode_pgm(mask))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { what, detail } => Error::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    }
}
