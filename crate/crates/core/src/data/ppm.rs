//! Binary PPM (`P6`, maxval 255).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a `P6` image into an `H x W x 3` tensor of raw 0-255 values.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    match magic {
        b"P6" => {}
        b"P3" => return Err(Error::UnsupportedFormat("ASCII PPM (P3) is not supported".into())),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "expected P6 magic, found {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    }
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval}, only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(Error::UnsupportedFormat(format!("degenerate size {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::TruncatedImage("missing raster after header".into()));
    }
    pos += 1;
    let needed = width * height * 3;
    let raster = bytes
        .get(pos..pos + needed)
        .ok_or_else(|| {
            Error::TruncatedImage(format!(
                "{width}x{height} needs {needed} raster bytes, found {}",
                bytes.len().saturating_sub(pos)
            ))
        })?;
    Tensor::new(vec![height, width, 3], raster.iter().map(|&b| b as f32).collect())
}

/// Encodes an `H x W x 3` tensor as `P6`, rounding and clamping to 0-255.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [h, w, c] = <[usize; 3]>::try_from(image.shape())
        .map_err(|_| Error::ShapeMismatch(format!("expected H x W x 3, got {:?}", image.shape())))?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::TruncatedImage("header ended early".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            Error::UnsupportedFormat(format!("bad {what} `{}`", String::from_utf8_lossy(tok)))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_encoded_fixture() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.shape(), &[1, 2, 3]);
        assert_eq!(img.data(), &[255.0, 0.0, 0.0, 0.0, 0.0, 255.0]);
        assert_eq!(encode_ppm(&img).unwrap(), bytes);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n1 1 # size\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode_ppm(&bytes).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn unsupported_variants() {
        assert!(matches!(
            decode_ppm(b"P3\n1 1\n255\n0 0 0\n"),
            Err(Error::UnsupportedFormat(_))
        ));
        let mut wide = b"P6\n1 1\n65535\n".to_vec();
        wide.extend_from_slice(&[0; 6]);
        assert!(matches!(decode_ppm(&wide), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn truncated_raster() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0; 11]);
        assert!(matches!(decode_ppm(&bytes), Err(Error::TruncatedImage(_))));
        assert!(matches!(decode_ppm(b"P6\n2"), Err(Error::TruncatedImage(_))));
    }
}
