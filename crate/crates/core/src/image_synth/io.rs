//! 8-bit PNG and binary PPM (P6) decoding and encoding.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use super::ImageBuffer;
use crate::error::{Error, Result};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    /// Chosen from the file extension; anything but `.ppm` is written as PNG.
    pub fn from_path(path: &Path) -> ImageFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("ppm") => ImageFormat::Ppm,
            _ => ImageFormat::Png,
        }
    }
}

pub fn decode_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes)
}

/// Decodes PNG or P6 data, told apart by signature.
pub fn decode_bytes(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(Error::Decode {
            offset: 0,
            detail: "unrecognized signature (expected PNG or binary PPM)".into(),
        })
    }
}

pub fn encode_image(image: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path) {
        ImageFormat::Png => encode_png(&image.to_bytes(), image.width(), image.height(), png::ColorType::Rgb)?,
        ImageFormat::Ppm => encode_ppm(image),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a single-channel map in [0, 1] as an 8-bit grayscale PNG.
pub fn encode_gray_png(values: &[f32], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if values.len() != width * height {
        return Err(Error::dim("data", format!("{} values for {width}x{height}", values.len())));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    let png = encode_png(&bytes, width, height, png::ColorType::Grayscale)?;
    fs::write(path, png).map_err(|e| Error::io(path, e))
}

/// Round-half-to-even onto 0..=255 after clamping to [0, 1].
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut cursor = Cursor::new(bytes);
    let decode_err = |cursor: &Cursor<&[u8]>, e: png::DecodingError| Error::Decode {
        offset: cursor.position(),
        detail: e.to_string(),
    };
    let mut reader = match png::Decoder::new(&mut cursor).read_info() {
        Ok(r) => r,
        Err(e) => {
            return Err(decode_err(&cursor, e));
        }
    };
    let info = reader.info();
    if info.interlaced {
        return Err(Error::Unsupported("interlaced (Adam7) PNG".into()));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Unsupported(format!("{:?}-bit PNG samples", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Indexed => {
            return Err(Error::Unsupported("palette PNG".into()));
        }
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        offset: 0,
        detail: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = match reader.next_frame(&mut buf) {
        Ok(f) => f,
        Err(e) => {
            drop(reader);
            return Err(decode_err(&cursor, e));
        }
    };
    let stride = frame.line_size;
    let mut rgb = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let row = &buf[y * stride..y * stride + width * channels];
        for px in row.chunks(channels) {
            match channels {
                1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
    }
    Ok(ImageBuffer::from_bytes(width, height, &rgb))
}

fn encode_png(bytes: &[u8], width: usize, height: usize, color: png::ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let fail = |e: png::EncodingError| Error::Decode {
        offset: 0,
        detail: format!("PNG encoding failed: {e}"),
    };
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(fail)?;
        writer.write_image_data(bytes).map_err(fail)?;
    }
    Ok(out)
}

fn encode_ppm(image: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_bytes());
    out
}

/// Header fields of a P6 file: whitespace separated, `#` comments allowed,
/// exactly one whitespace byte before the raster.
fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Decode {
                offset: pos as u64,
                detail: format!("expected header field {} (width, height, maxval)", i + 1),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode {
                offset: start as u64,
                detail: "header number out of range".into(),
            })?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::Decode {
                offset: pos as u64,
                detail: "missing whitespace after header".into(),
            })
        }
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Unsupported(format!("PPM maxval {maxval} (only 8-bit, maxval 255)")));
    }
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Decode {
            offset: bytes.len() as u64,
            detail: format!("truncated raster: {} of {need} bytes", raster.len()),
        });
    }
    Ok(ImageBuffer::from_bytes(width, height, &raster[..need]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_to_even() {
        // 0.5 / 255 sits exactly between 0 and 1 in f32 arithmetic here.
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(128.0 / 255.0), 128);
        assert_eq!(quantize(0.5), 128); // 127.5 rounds to even
        assert_eq!(quantize(1.5 / 255.0), 2);
    }

    #[test]
    fn known_ppm_bytes_decode_to_scaled_values() {
        let mut bytes = b"P6\n# comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 255, 102, 153, 204, 255, 0, 0, 1, 2, 3]);
        let img = decode_bytes(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.pixel(0, 0), [0.0, 0.2, 1.0]);
        assert_eq!(img.pixel(1, 0), [0.4, 0.6, 0.8]);
        assert_eq!(img.pixel(0, 1), [1.0, 0.0, 0.0]);
        assert_eq!(img.to_bytes(), bytes[bytes.len() - 12..].to_vec());
    }

    #[test]
    fn truncated_ppm_reports_offset() {
        let mut bytes = b"P6 2 2 255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5]);
        match decode_bytes(&bytes) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("{other:?}"),
        }
        match decode_bytes(b"P6 2") {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sixteen_bit_ppm_is_unsupported() {
        assert!(matches!(decode_bytes(b"P6 1 1 65535\n\0\0\0\0\0\0"), Err(Error::Unsupported(_))));
    }

    #[test]
    fn unknown_signature_is_a_decode_error() {
        assert!(matches!(decode_bytes(b"GIF89a"), Err(Error::Decode { offset: 0, .. })));
    }

    #[test]
    fn truncated_png_is_a_decode_error() {
        let img = ImageBuffer::from_bytes(4, 3, &(0..36).map(|v| v as u8 * 7).collect::<Vec<_>>());
        let png = encode_png(&img.to_bytes(), 4, 3, png::ColorType::Rgb).unwrap();
        assert_eq!(decode_bytes(&png).unwrap(), img);
        let cut = &png[..png.len() - 20];
        match decode_bytes(cut) {
            Err(Error::Decode { offset, .. }) => assert!(offset <= cut.len() as u64),
            other => panic!("{other:?}"),
        }
    }
}
