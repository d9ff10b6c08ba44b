//! Binary PPM (`P6`) images and PGM (`P5`) label maps, 8 bits per sample.
//!
//! Writers emit the canonical header `P6\n<w> <h>\n255\n`; readers accept any
//! whitespace and `#` comments in the header.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

struct Header {
    width: usize,
    height: usize,
    /// Offset of the first pixel byte.
    data_start: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        let mut value: usize = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((self.bytes[self.pos] - b'0') as usize))
                .ok_or_else(|| Error::format(start, format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::format(start, format!("expected {what}")));
        }
        Ok(value)
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::format(bytes.len(), "truncated magic"));
    }
    if &bytes[..2] != magic {
        return Err(Error::format(
            0,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            maxval_at,
            format!("maxval {maxval} unsupported, need 255"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(2, "zero image extent"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        Some(_) => return Err(Error::format(cur.pos, "missing whitespace after maxval")),
        None => return Err(Error::format(cur.pos, "truncated header")),
    }
    Ok(Header {
        width,
        height,
        data_start: cur.pos + 1,
    })
}

fn raster<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = header
        .width
        .checked_mul(header.height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::format(2, "image extents overflow"))?;
    let available = bytes.len() - header.data_start;
    if available < need {
        return Err(Error::format(
            bytes.len(),
            format!("truncated raster: need {need} bytes, found {available}"),
        ));
    }
    if available > need {
        return Err(Error::format(
            header.data_start + need,
            "trailing bytes after raster",
        ));
    }
    Ok(&bytes[header.data_start..])
}

/// Decode a `P6` image into a `[3,H,W]` tensor with values `byte / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let header = parse_header(bytes, b"P6")?;
    let px = raster(bytes, &header, 3)?;
    let plane = header.width * header.height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for (c, &v) in rgb.iter().enumerate() {
            data[c * plane + i] = v as f32 / 255.0;
        }
    }
    Tensor::new(&[3, header.height, header.width], data)
}

/// Quantize a `[3,H,W]` tensor (values clamped to `[0,1]`) into `P6` bytes.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        _ => {
            return Err(Error::shape(format!(
                "PPM needs a [3,H,W] tensor, got {:?}",
                image.shape()
            )))
        }
    };
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    let data = image.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(data[c * plane + i]));
        }
    }
    Ok(out)
}

/// `[0,1]` to a byte, rounding to nearest; NaN maps to 0.
pub fn quantize(v: f32) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// Decode a `P5` map; bytes are passed through as raw labels.
pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let header = parse_header(bytes, b"P5")?;
    let px = raster(bytes, &header, 1)?;
    LabelMap::new(header.height, header.width, px.to_vec())
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend_from_slice(map.data());
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&read(path.as_ref())?)
}

pub fn write_image(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_ppm(image)?)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_pgm(&read(path.as_ref())?)
}

pub fn write_labels(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_pgm(map))
}

/// Grayscale rendering of an uncertainty map: min-max normalized to `[0,255]`
/// and inverted so high uncertainty is dark. A constant map renders as 128.
pub fn uncertainty_to_gray(values: &[f32], height: usize, width: usize) -> Result<LabelMap> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "uncertainty map has non-finite values".into(),
        ));
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let bytes = if hi <= lo {
        vec![128u8; values.len()]
    } else {
        let span = (hi - lo) as f64;
        values
            .iter()
            .map(|&v| 255 - ((v - lo) as f64 / span * 255.0).round() as u8)
            .collect()
    };
    LabelMap::new(height, width, bytes)
}

/// Write an `[H,W]` uncertainty map as an inverted-gray `P5`; optionally the
/// raw values as a CSV sidecar (`row,col,value`).
pub fn write_uncertainty_map(
    values: &Tensor,
    path: impl AsRef<Path>,
    sidecar: Option<&Path>,
) -> Result<()> {
    let (h, w) = match *values.shape() {
        [h, w] | [1, h, w] => (h, w),
        _ => {
            return Err(Error::shape(format!(
                "uncertainty map must be [H,W], got {:?}",
                values.shape()
            )))
        }
    };
    let gray = uncertainty_to_gray(values.data(), h, w)?;
    write_labels(&gray, path)?;
    if let Some(csv) = sidecar {
        let mut text = String::from("row,col,value\n");
        for (i, v) in values.data().iter().enumerate() {
            text.push_str(&format!("{},{},{}\n", i / w, i % w, v));
        }
        write(csv, text.as_bytes())?;
    }
    Ok(())
}

/// Parse a sidecar written by [`write_uncertainty_map`] back into values.
pub fn read_uncertainty_sidecar(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let value = line
            .rsplit(',')
            .next()
            .and_then(|v| v.parse::<f32>().ok())
            .ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                message: "expected row,col,value".into(),
            })?;
        out.push(value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn white_pixel() {
        let t = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn void_byte_passes_through() {
        let m = decode_pgm(b"P5 2 1 255\n\x03\xff").unwrap();
        assert_eq!(m.data(), &[3, 255]);
    }

    #[test]
    fn header_comments_and_spacing() {
        let m = decode_pgm(b"P5\n# made by hand\n2  1\n# max\n255\n\x01\x02").unwrap();
        assert_eq!(m.data(), &[1, 2]);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        match decode_ppm(b"P3\n1 1\n255\n\0\0\0") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = b"P6\n2 2\n255\n\x01\x02\x03";
        match decode_ppm(bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, bytes.len());
                assert!(message.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
        assert!(decode_pgm(b"P5\n2 2").is_err());
        assert!(decode_pgm(b"P5\n2 2\n65535\n").is_err());
        assert!(decode_pgm(b"P5\n0 2\n255\n").is_err());
        assert!(decode_pgm(b"").is_err());
    }

    #[test]
    fn random_round_trip_is_byte_identical() {
        let mut rng = Rng::new(16);
        let mut ppm = b"P6\n16 16\n255\n".to_vec();
        ppm.extend((0..16 * 16 * 3).map(|_| rng.below(256) as u8));
        assert_eq!(encode_ppm(&decode_ppm(&ppm).unwrap()).unwrap(), ppm);

        let mut pgm = b"P5\n16 16\n255\n".to_vec();
        pgm.extend((0..256).map(|_| rng.below(256) as u8));
        assert_eq!(encode_pgm(&decode_pgm(&pgm).unwrap()), pgm);
    }

    #[test]
    fn constant_uncertainty_is_mid_gray() {
        let g = uncertainty_to_gray(&[0.3; 6], 2, 3).unwrap();
        assert!(g.data().iter().all(|&b| b == 128));
    }

    #[test]
    fn uncertainty_endpoints_invert() {
        let g = uncertainty_to_gray(&[0.0, 0.7, 0.0, 0.7], 2, 2).unwrap();
        assert_eq!(g.data(), &[255, 0, 255, 0]);
    }

    #[test]
    fn sidecar_parses_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(2);
        let values = Tensor::new(&[3, 5], (0..15).map(|_| rng.uniform() * 1e-3).collect()).unwrap();
        let (png, csv) = (dir.path().join("u.pgm"), dir.path().join("u.csv"));
        write_uncertainty_map(&values, &png, Some(&csv)).unwrap();
        assert_eq!(read_uncertainty_sidecar(&csv).unwrap(), values.data());
        assert_eq!(read_labels(&png).unwrap().data().len(), 15);
    }
}
