//! Binary PPM (P6, maxval 255).

use std::path::Path;

use super::idx::to_byte;
use super::DataError;
use crate::patchify::Image;

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, DataError> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(DataError::Unsupported(format!("PPM variant `{magic}`")));
    }
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(DataError::Unsupported(format!("PPM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height * 3;
    if bytes.len() < pos + n {
        return Err(DataError::Truncated {
            what: "ppm",
            field: "raster",
            offset: bytes.len(),
            needed: pos + n,
        });
    }
    let pixels = bytes[pos..pos + n]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Image::new(height, width, pixels).map_err(|e| DataError::Invalid(e.to_string()))
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn token(bytes: &[u8], pos: &mut usize) -> Result<String, DataError> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(DataError::Truncated {
            what: "ppm",
            field: "header",
            offset: *pos,
            needed: *pos + 1,
        });
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn number(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize, DataError> {
    let t = token(bytes, pos)?;
    t.parse()
        .map_err(|_| DataError::Invalid(format!("PPM {field} `{t}` is not a number")))
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|&v| to_byte(v)));
    out
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image, DataError> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_ppm(image: &Image, path: impl AsRef<Path>) -> Result<(), DataError> {
    std::fs::write(path, encode_ppm(image))?;
    Ok(())
}
