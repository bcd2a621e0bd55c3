//! Binary PPM (P6) images and PGM (P5) label maps. Readers demand the
//! exact well-formed header shape; writers emit the canonical form, so
//! read -> write round-trips are byte-identical.

use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderParser { bytes, pos: 0 }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn expect_magic(&mut self, magic: &[u8; 2]) -> Result<()> {
        if self.bytes.len() < 2 || &self.bytes[..2] != magic {
            return self.err(format!(
                "expected magic {:?}",
                std::str::from_utf8(magic).unwrap_or("?")
            ));
        }
        self.pos = 2;
        Ok(())
    }

    fn skip_whitespace(&mut self) -> Result<()> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err("expected whitespace");
        }
        Ok(())
    }

    fn integer(&mut self) -> Result<usize> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err("expected decimal integer");
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| self.err("integer out of range"), Ok)
    }

    /// magic, width, height, maxval, then exactly one whitespace byte before
    /// the raster. Returns `(width, height, data_offset)`.
    fn header(&mut self, magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
        self.expect_magic(magic)?;
        self.skip_whitespace()?;
        let w = self.integer()?;
        self.skip_whitespace()?;
        let h = self.integer()?;
        self.skip_whitespace()?;
        let maxval = self.integer()?;
        if maxval != 255 {
            return Err(Error::UnsupportedFormat(format!(
                "maxval {maxval}; only 255 is supported"
            )));
        }
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return self.err("expected single whitespace before raster data");
        }
        self.pos += 1;
        if w == 0 || h == 0 {
            return self.err("zero image dimension");
        }
        Ok((w, h, self.pos))
    }
}

/// Read a binary P6 image as a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let (w, h, start) = HeaderParser::new(&bytes).header(b"P6")?;
    let need = w * h * 3;
    let raster = &bytes[start..];
    if raster.len() < need {
        return Err(Error::Parse {
            offset: start + raster.len(),
            message: format!("truncated raster: {} of {need} bytes", raster.len()),
        });
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = f32::from(raster[p * 3 + c]) / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Write a `[3, H, W]` tensor as binary P6, rounding to 8-bit.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidShape(format!(
            "write_ppm expects [3,H,W], got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(quantize(data[c * h * w + p]));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a binary P5 map of raw class ids (255 = ignore).
pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = std::fs::read(path)?;
    let (w, h, start) = HeaderParser::new(&bytes).header(b"P5")?;
    let need = w * h;
    let raster = &bytes[start..];
    if raster.len() < need {
        return Err(Error::Parse {
            offset: start + raster.len(),
            message: format!("truncated raster: {} of {need} bytes", raster.len()),
        });
    }
    LabelMap::new(h, w, raster[..need].to_vec())
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = (labels.height(), labels.width());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(labels.values());
    std::fs::write(path, out)?;
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Nearest-neighbor resize of a `[3, H, W]` image.
pub fn resize_nearest(image: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidShape(format!(
            "resize expects [3,H,W], got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let data = image.data();
    let mut out = vec![0.0f32; 3 * new_h * new_w];
    for y in 0..new_h {
        let sy = (y * h) / new_h;
        for x in 0..new_w {
            let sx = (x * w) / new_w;
            for c in 0..3 {
                out[(c * new_h + y) * new_w + x] = data[(c * h + sy) * w + sx];
            }
        }
    }
    drop(data);
    Tensor::from_vec(vec![3, new_h, new_w], out)
}

/// Nearest-neighbor resize of a label map.
pub fn resize_labels_nearest(labels: &LabelMap, new_h: usize, new_w: usize) -> Result<LabelMap> {
    let (h, w) = (labels.height(), labels.width());
    let mut out = vec![0u8; new_h * new_w];
    for y in 0..new_h {
        let sy = (y * h) / new_h;
        for x in 0..new_w {
            out[y * new_w + x] = labels.get(sy, (x * w) / new_w);
        }
    }
    LabelMap::new(new_h, new_w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::IGNORE;

    #[test]
    fn white_pixel_reads_as_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ppm");
        std::fs::write(&path, b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        let t = read_ppm(&path).unwrap();
        assert_eq!(t.shape(), vec![3, 1, 1]);
        assert_eq!(t.to_vec(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn ppm_read_write_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let back = dir.path().join("b.ppm");
        let bytes: Vec<u8> = b"P6\n3 2\n255\n"
            .iter()
            .copied()
            .chain((0..18).map(|i| (i * 13 + 7) as u8))
            .collect();
        std::fs::write(&path, &bytes).unwrap();
        let t = read_ppm(&path).unwrap();
        write_ppm(&back, &t).unwrap();
        assert_eq!(std::fs::read(&back).unwrap(), bytes);
    }

    #[test]
    fn pgm_255_is_ignore() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        std::fs::write(&path, b"P5\n2 1\n255\n\x03\xff").unwrap();
        let l = read_pgm(&path).unwrap();
        assert_eq!(l.get(0, 0), 3);
        assert_eq!(l.get(0, 1), IGNORE);
    }

    #[test]
    fn malformed_header_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P6\nxx 2\n255\n").unwrap();
        match read_ppm(&path).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 3),
            e => panic!("expected parse error, got {e:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_parse_error_at_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P5\n1 1\n255\n\x00").unwrap();
        match read_ppm(&path).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 0),
            e => panic!("expected parse error, got {e:?}"),
        }
    }

    #[test]
    fn non_255_maxval_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P6\n1 1\n128\n\x00\x00\x00").unwrap();
        assert_eq!(
            read_ppm(&path).unwrap_err().category(),
            "unsupported-format"
        );
    }

    #[test]
    fn truncated_raster_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P6\n2 2\n255\n\x01\x02").unwrap();
        assert_eq!(read_ppm(&path).unwrap_err().category(), "parse");
    }

    #[test]
    fn resize_nearest_picks_nearest_source() {
        let img = Tensor::from_vec(
            vec![3, 1, 2],
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        let up = resize_nearest(&img, 2, 4).unwrap();
        assert_eq!(up.shape(), vec![3, 2, 4]);
        let d = up.to_vec();
        assert_eq!(&d[..4], &[0.0, 0.0, 1.0, 1.0]);
    }
}
