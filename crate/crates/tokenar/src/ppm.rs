//! Binary PPM (P6, 8-bit) image I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TokenArError};
use crate::tokenizer::ImageGrid;

/// Writes `image` as binary P6 with maxval 255. Channels are scaled by 255
/// and rounded.
pub fn write_ppm(path: &Path, image: &ImageGrid) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + image.pixels.len());
    write!(buf, "P6\n{} {}\n255\n", image.width, image.height)
        .map_err(|e| TokenArError::io(path, e))?;
    for &v in &image.pixels {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, buf).map_err(|e| TokenArError::io(path, e))
}

/// Reads a binary P6 file; channels are converted to [0,1] as value/255.
pub fn read_ppm(path: &Path) -> Result<ImageGrid> {
    let bytes = fs::read(path).map_err(|e| TokenArError::io(path, e))?;
    parse_ppm(&bytes).map_err(|detail| TokenArError::format(path, detail))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<ImageGrid, String> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or("missing magic")?;
    if magic != b"P6" {
        return Err(format!(
            "expected P6 magic, found {:?}",
            String::from_utf8_lossy(magic)
        ));
    }
    let width = parse_usize(bytes, &mut pos, "width")?;
    let height = parse_usize(bytes, &mut pos, "height")?;
    let maxval = parse_usize(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(format!("only maxval 255 supported, found {maxval}"));
    }
    // Exactly one whitespace byte separates the header from raster data.
    pos += 1;
    let need = width * height * 3;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("truncated raster: need {need} bytes"))?;
    Ok(ImageGrid {
        width,
        height,
        pixels: data.iter().map(|&u| u as f32 / 255.0).collect(),
    })
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    // Skip whitespace and `#` comments.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

fn parse_usize(bytes: &[u8], pos: &mut usize, what: &str) -> std::result::Result<usize, String> {
    let tok = next_token(bytes, pos).ok_or_else(|| format!("missing {what}"))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("bad {what}: {:?}", String::from_utf8_lossy(tok)))
}
