//! 8-bit RGB PNG I/O and the `[-1, 1]` <-> `[0, 255]` mapping.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB bytes, row-major.
    pub data: Vec<u8>,
}

/// `[-1, 1]` to `[0, 255]`, rounded and clamped.
pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Batch item `index` of a 3-channel tensor in `[-1, 1]`.
    pub fn from_tensor<F: Real>(t: &Tensor<F>, index: usize) -> Result<Self> {
        let [b, c, h, w] = t.shape().0;
        if c != 3 && c != 1 {
            return Err(Error::Shape(format!("image tensor needs 1 or 3 channels, got {}", t.shape())));
        }
        if index >= b {
            return Err(Error::InvalidArgument(format!("batch index {index} out of range for {}", t.shape())));
        }
        let mut img = Self::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let ch = |k: usize| to_byte(t.at(index, if c == 3 { k } else { 0 }, y, x).as_f64());
                img.put(x, y, [ch(0), ch(1), ch(2)]);
            }
        }
        Ok(img)
    }

    /// Single-channel map in `[0, 1]` rendered as gray.
    pub fn from_unit_map<F: Real>(t: &Tensor<F>, index: usize) -> Self {
        let [_, _, h, w] = t.shape().0;
        let mut img = Self::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = (t.at(index, 0, y, x).as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put(x, y, [v, v, v]);
            }
        }
        img
    }

    /// `(1, 3, h, w)` tensor in `[-1, 1]`.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let (w, h) = (self.width, self.height);
        let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
        for y in 0..h {
            for x in 0..w {
                let px = self.pixel(x, y);
                for (k, &b) in px.iter().enumerate() {
                    t.set(0, k, y, x, F::lit(from_byte(b)));
                }
            }
        }
        t
    }

    /// Places `tiles` side by side (equal heights).
    pub fn hstack(tiles: &[RgbImage]) -> Result<Self> {
        let h = tiles.first().map_or(0, |t| t.height);
        if tiles.iter().any(|t| t.height != h) {
            return Err(Error::Shape("hstack needs equal tile heights".into()));
        }
        let w: usize = tiles.iter().map(|t| t.width).sum();
        let mut out = Self::new(w, h);
        let mut x0 = 0;
        for t in tiles {
            for y in 0..h {
                for x in 0..t.width {
                    out.put(x0 + x, y, t.pixel(x, y));
                }
            }
            x0 += t.width;
        }
        Ok(out)
    }

    /// Places `rows` top to bottom (equal widths).
    pub fn vstack(rows: &[RgbImage]) -> Result<Self> {
        let w = rows.first().map_or(0, |t| t.width);
        if rows.iter().any(|t| t.width != w) {
            return Err(Error::Shape("vstack needs equal row widths".into()));
        }
        Ok(RgbImage {
            width: w,
            height: rows.iter().map(|t| t.height).sum(),
            data: rows.iter().flat_map(|t| t.data.iter().copied()).collect(),
        })
    }

    /// Tile `(col, row)` of a grid of equal `size x size` tiles.
    pub fn tile(&self, col: usize, row: usize, size: usize) -> Result<Self> {
        if (col + 1) * size > self.width || (row + 1) * size > self.height {
            return Err(Error::InvalidArgument(format!(
                "tile ({col}, {row}) of size {size} is outside a {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Self::new(size, size);
        for y in 0..size {
            for x in 0..size {
                out.put(x, y, self.pixel(col * size + x, row * size + y));
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn scaled(&self, factor: usize) -> Self {
        let mut out = Self::new(self.width * factor, self.height * factor);
        for y in 0..out.height {
            for x in 0..out.width {
                out.put(x, y, self.pixel(x / factor, y / factor));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format(path, e.to_string()))?;
        writer
            .write_image_data(&self.data)
            .map_err(|e| Error::format(path, e.to_string()))?;
        writer.finish().map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(std::io::BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let data = match info.color_type {
            png::ColorType::Rgb => bytes.to_vec(),
            png::ColorType::Rgba => bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => bytes.iter().flat_map(|&v| [v, v, v]).collect(),
            png::ColorType::GrayscaleAlpha => bytes.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(Error::format(path, format!("unsupported PNG color type {other:?}"))),
        };
        Ok(RgbImage { width: w, height: h, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_roundtrip_within_one_step() {
        for i in 0..=200 {
            let v = -1.0 + i as f64 / 100.0;
            assert!((from_byte(to_byte(v)) - v).abs() <= 1.0 / 255.0 + 1e-12);
        }
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let mut img = RgbImage::new(3, 2);
        img.put(1, 1, [10, 200, 30]);
        img.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), img);
    }
}
