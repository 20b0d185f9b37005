//! Grayscale image decoding, resizing and the raw tensor container.

use std::io::Write;

use crate::error::{Error, Result};

/// A binary PGM image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Pixels divided by `maxval`.
    pub fn to_unit(&self) -> Image {
        let m = self.maxval as f32;
        Image {
            height: self.height,
            width: self.width,
            data: self.pixels.iter().map(|&p| (p as f32 / m).min(1.0)).collect(),
        }
    }
}

/// A single-channel floating point image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Format(format!(
                "{} pixels do not fill {height}x{width}",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Image {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Quantizes `[0,1]` values to 8 bits.
    pub fn to_pgm(&self) -> Pgm {
        Pgm {
            width: self.width,
            height: self.height,
            maxval: 255,
            pixels: self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' && bytes[*pos] != b'\r' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format(format!("missing {what} in PGM header")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad {what} in PGM header")))
}

/// Decodes a binary ("P5") PGM with `maxval <= 255`.
pub fn load_pgm(bytes: &[u8]) -> Result<Pgm> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (expected P5 magic)".into()));
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty PGM {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("PGM header not terminated".into())),
    }
    let len = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("PGM dimensions overflow".into()))?;
    let raster = &bytes[pos..];
    if raster.len() < len {
        return Err(Error::Format(format!(
            "truncated PGM: {} of {len} pixels",
            raster.len()
        )));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u8,
        pixels: raster[..len].to_vec(),
    })
}

pub fn write_pgm<W: Write>(img: &Pgm, mut w: W) -> Result<()> {
    write!(w, "P5\n{} {}\n{}\n", img.width, img.height, img.maxval)?;
    w.write_all(&img.pixels)?;
    Ok(())
}

/// Bilinear resampling with corner-aligned sampling: output corners land
/// exactly on input corners.
pub fn resize_bilinear(img: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if img.height < 2 || img.width < 2 {
        return Err(Error::Format(format!(
            "cannot resample a {}x{} image",
            img.height, img.width
        )));
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::Format("empty resize target".into()));
    }
    if (img.height, img.width) == (target_h, target_w) {
        return Ok(img.clone());
    }
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if dst == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 2);
        (lo, lo + 1, pos - lo as f64)
    };
    let cols: Vec<_> = (0..target_w).map(|j| coord(j, img.width, target_w)).collect();
    let mut data = Vec::with_capacity(target_h * target_w);
    for i in 0..target_h {
        let (r0, r1, fy) = coord(i, img.height, target_h);
        for &(c0, c1, fx) in &cols {
            let top = img.at(r0, c0) as f64 * (1.0 - fx) + img.at(r0, c1) as f64 * fx;
            let bottom = img.at(r1, c0) as f64 * (1.0 - fx) + img.at(r1, c1) as f64 * fx;
            data.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Image::new(target_h, target_w, data)
}

const VTEN_MAGIC: &[u8; 4] = b"VTEN";

/// Decodes a raw tensor: `"VTEN"`, rank u32, extents u32..., f32 data, all
/// little-endian.
pub fn read_vten(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < 8 || &bytes[..4] != VTEN_MAGIC {
        return Err(Error::Format("not a raw tensor (expected VTEN magic)".into()));
    }
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format("truncated raw tensor header".into()))
    };
    let rank = word(4)? as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::Format(format!("raw tensor rank {rank} not in 1..=4")));
    }
    let dims = (0..rank)
        .map(|k| word(8 + 4 * k).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("raw tensor extents overflow".into()))?;
    let body = &bytes[8 + 4 * rank..];
    if body.len() != count * 4 {
        return Err(Error::Format(format!(
            "raw tensor holds {} bytes, extents need {}",
            body.len(),
            count * 4
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((dims, data))
}

pub fn write_vten<W: Write>(dims: &[usize], data: &[f32], mut w: W) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Format("raw tensor extents do not match data".into()));
    }
    w.write_all(VTEN_MAGIC)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Interprets a raw tensor as one grayscale image; every extent except the
/// last two must be 1.
pub fn vten_image(dims: &[usize], data: Vec<f32>) -> Result<Image> {
    let rank = dims.len();
    if rank < 2 || dims[..rank - 2].iter().any(|&d| d != 1) {
        return Err(Error::Format(format!(
            "raw tensor {dims:?} is not a single grayscale image"
        )));
    }
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Format("raw tensor pixels must lie in [0,1]".into()));
    }
    Image::new(dims[rank - 2], dims[rank - 1], data)
}
