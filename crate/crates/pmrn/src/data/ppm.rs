//! Binary PPM (P6) decoding for dataset import, and PGM (P5) encoding for
//! mask dumps.

use crate::error::{Error, Result};

/// Decodes a binary P6 image with 8-bit samples. Returns (width, height,
/// interleaved RGB bytes).
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;

    let mut token = |pos: &mut usize| -> Result<(usize, String)> {
        // Skip whitespace and '#' comments between header fields.
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
            return Err(Error::Format {
                offset: start,
                msg: "truncated header".into(),
            });
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };

    let (off, magic) = token(&mut pos)?;
    if magic != "P6" {
        return Err(Error::Format {
            offset: off,
            msg: format!("expected P6, got {magic:?}"),
        });
    }
    let mut field = |what: &str, pos: &mut usize| -> Result<usize> {
        let (off, tok) = token(pos)?;
        tok.parse().map_err(|_| Error::Format {
            offset: off,
            msg: format!("bad {what} {tok:?}"),
        })
    };
    let width = field("width", &mut pos)?;
    let height = field("height", &mut pos)?;
    let maxval = field("maxval", &mut pos)?;
    if width == 0 || height == 0 {
        return Err(Error::Format {
            offset: pos,
            msg: format!("degenerate size {width}x{height}"),
        });
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format {
            offset: pos,
            msg: format!("unsupported maxval {maxval}"),
        });
    }
    // Single whitespace byte separates header from raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format {
            offset: pos,
            msg: "missing raster separator".into(),
        });
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or(Error::Format {
            offset: pos,
            msg: "raster size overflows".into(),
        })?;
    if bytes.len() < pos + need {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("raster truncated: need {need} bytes"),
        });
    }
    let mut rgb = bytes[pos..pos + need].to_vec();
    if maxval != 255 {
        for v in &mut rgb {
            *v = ((*v as usize * 255) / maxval) as u8;
        }
    }
    Ok((width, height, rgb))
}

/// Encodes an 8-bit grayscale image as binary P5.
pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    debug_assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_minimal_p6() {
        let mut bytes = b"P6\n# demo\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30, 40, 50, 60]);
        let (w, h, rgb) = decode_ppm(&bytes).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(rgb, vec![10, 20, 30, 40, 50, 60]);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(decode_ppm(b"P5\n1 1\n255\nxxx").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x01\x02").is_err());
    }

    #[test]
    fn rescales_small_maxval() {
        let mut bytes = b"P6\n1 1\n15\n".to_vec();
        bytes.extend_from_slice(&[15, 0, 5]);
        let (_, _, rgb) = decode_ppm(&bytes).unwrap();
        assert_eq!(rgb, vec![255, 0, 85]);
    }

    #[test]
    fn pgm_header_shape() {
        let out = encode_pgm(2, 2, &[0, 128, 200, 255]);
        assert!(out.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&out[out.len() - 4..], &[0, 128, 200, 255]);
    }
}
