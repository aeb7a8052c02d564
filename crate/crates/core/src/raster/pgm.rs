// Binary PGM (P5, maxval 255).

use std::fs;
use std::path::Path;

use super::{EcgImage, RasterError, Result};

pub fn encode_pgm(image: &EcgImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_bytes());
    out
}

pub fn write_pgm(image: &EcgImage, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(image))?;
    Ok(())
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(RasterError::Format("header ended early".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<EcgImage> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != "P5" {
        return Err(RasterError::Format(format!("magic {magic:?} is not binary PGM (P5)")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let tok = header_token(bytes, &mut pos)?;
        tok.parse()
            .map_err(|_| RasterError::Format(format!("{what} {tok:?} is not a number")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(RasterError::Format(format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(RasterError::Format(format!("empty image {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    let payload = bytes.get(pos + 1..).unwrap_or(&[]);
    let expected = width * height;
    if payload.len() < expected {
        return Err(RasterError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(RasterError::Format(format!(
            "{} bytes after the {expected}-byte payload",
            payload.len() - expected
        )));
    }
    EcgImage::from_bytes(height, width, payload)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<EcgImage> {
    decode_pgm(&fs::read(path)?)
}
