//! Binary PPM (P6) reading and writing.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::image::CHANNELS;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PpmError {
    #[error("ppm io: {0}")]
    Io(#[from] io::Error),
    #[error("invalid ppm: {0}")]
    Format(String),
}

fn header_token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a [u8], PpmError> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PpmError::Format("truncated header".into()));
    }
    Ok(&buf[start..*pos])
}

fn header_number(buf: &[u8], pos: &mut usize, what: &str) -> Result<usize, PpmError> {
    let tok = header_token(buf, pos)?;
    std::str::from_utf8(tok).ok().and_then(|s| s.parse().ok()).ok_or_else(|| PpmError::Format(format!("bad {what}")))
}

/// Decodes a P6 image into a `[h, w, 3]` tensor scaled to `[0, 1]`.
pub fn decode<T: Scalar>(buf: &[u8]) -> Result<Tensor<T>, PpmError> {
    let mut pos = 0;
    if header_token(buf, &mut pos)? != b"P6" {
        return Err(PpmError::Format("missing P6 magic".into()));
    }
    let w = header_number(buf, &mut pos, "width")?;
    let h = header_number(buf, &mut pos, "height")?;
    let maxval = header_number(buf, &mut pos, "maxval")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(PpmError::Format(format!("unsupported dimensions {w}x{h} maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w * h * CHANNELS;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let raster = buf.get(pos..pos + n * bytes_per).ok_or_else(|| PpmError::Format("truncated raster".into()))?;
    let scale = T::of(maxval as f64);
    let data = if bytes_per == 1 {
        raster.iter().map(|&b| T::of(b as f64) / scale).collect()
    } else {
        raster.chunks(2).map(|c| T::of(u16::from_be_bytes([c[0], c[1]]) as f64) / scale).collect()
    };
    Tensor::new(vec![h, w, CHANNELS], data).map_err(|e| PpmError::Format(e.to_string()))
}

/// Encodes `[h, w, 3]` values in `[0, 1]` as 8-bit P6 (clamped, rounded).
pub fn encode<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>, PpmError> {
    let [h, w, c] = image.shape()[..] else {
        return Err(PpmError::Format(format!("cannot encode shape {:?}", image.shape())));
    };
    if c != CHANNELS {
        return Err(PpmError::Format(format!("cannot encode {c} channels")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.to_f64_lossless().clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>, PpmError> {
    decode(&fs::read(path)?)
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<(), PpmError> {
    fs::write(path, encode(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_with_comments() {
        let mut buf = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        buf.extend_from_slice(&[0, 51, 255, 255, 0, 102]);
        let t: Tensor<f64> = decode(&buf).unwrap();
        assert_eq!(t.shape(), [1, 2, 3]);
        assert_eq!(t.data(), &[0.0, 0.2, 1.0, 1.0, 0.0, 0.4]);
    }

    #[test]
    fn byte_round_trip() {
        let bytes: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let mut buf = b"P6\n4 3\n255\n".to_vec();
        buf.extend_from_slice(&bytes);
        let t: Tensor<f64> = decode(&buf).unwrap();
        assert_eq!(encode(&t).unwrap(), buf);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(decode::<f64>(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode::<f64>(b"P6\n2 2\n255\n\0\0").is_err());
    }

    #[test]
    fn sixteen_bit() {
        let mut buf = b"P6 1 1 65535\n".to_vec();
        buf.extend_from_slice(&[0xff, 0xff, 0, 0, 0x80, 0x00]);
        let t: Tensor<f64> = decode(&buf).unwrap();
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
    }
}
