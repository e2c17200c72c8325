//! Pixel grids (color images, masks, depth rasters) and their on-disk encodings.
//!
//! Colors are linear RGB in `[0, 1]`. Pixel `(row, col)` sits at continuous
//! image coordinate `(u = col, v = row)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{ensure_input, Error, Result};

/// Row-major `height × width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type Rgb = [f64; 3];
pub type RgbImage = Grid<Rgb>;
pub type Mask = Grid<bool>;
pub type DepthMap = Grid<f64>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        ensure_input!(
            data.len() == width * height,
            "grid {width}x{height} needs {} values, got {}",
            width * height,
            data.len()
        );
        Ok(Grid { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self
    where
        T: Clone,
    {
        Grid::from_fn(self.width, self.height, |r, c| {
            self.get(r, self.width - 1 - c).clone()
        })
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Intersection-over-union; two empty masks have IoU 1.
    pub fn iou(&self, other: &Mask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Tight bounding box `(row0, col0, row1, col1)` (inclusive) of set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if *self.get(r, c) {
                    bb = Some(match bb {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        bb
    }
}

impl RgbImage {
    /// Replaces every pixel outside `mask` with `background`.
    pub fn masked(&self, mask: &Mask, background: Rgb) -> RgbImage {
        let mut out = self.clone();
        for (px, &m) in out.data.iter_mut().zip(&mask.data) {
            if !m {
                *px = background;
            }
        }
        out
    }

    /// Channel-planar `[3, H, W]` copy for network input.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.data.len();
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.iter().enumerate() {
            for ch in 0..3 {
                out[ch * n + i] = px[ch];
            }
        }
        out
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encoder<'a>(w: BufWriter<File>, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth) -> png::Encoder<'a, BufWriter<File>> {
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    enc
}

/// Writes an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = encoder(BufWriter::new(file), img.width, img.height, png::ColorType::Rgb, png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data.iter().flat_map(|p| p.map(to_u8)).collect();
    let mut w = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    w.write_image_data(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    w.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a 1-bit grayscale PNG (set pixels white).
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = encoder(BufWriter::new(file), mask.width, mask.height, png::ColorType::Grayscale, png::BitDepth::One);
    let stride = mask.width.div_ceil(8);
    let mut bytes = vec![0u8; stride * mask.height];
    for r in 0..mask.height {
        for c in 0..mask.width {
            if *mask.get(r, c) {
                bytes[r * stride + c / 8] |= 0x80 >> (c % 8);
            }
        }
    }
    let mut w = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    w.write_image_data(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    w.finish().map_err(|e| Error::format(path, e.to_string()))
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    /// One byte per sample after expansion to 8 bits.
    samples: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette")),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let mut samples = Vec::with_capacity(width * height * channels);
    for r in 0..height {
        samples.extend_from_slice(&buf[r * stride..r * stride + width * channels]);
    }
    Ok(Decoded {
        width,
        height,
        channels,
        samples,
    })
}

/// Reads an 8-bit PNG as RGB (gray is replicated, alpha dropped).
pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let d = decode_png(path)?;
    let data = d
        .samples
        .chunks(d.channels)
        .map(|s| match d.channels {
            1 | 2 => [s[0] as f64 / 255.0; 3],
            _ => [s[0] as f64 / 255.0, s[1] as f64 / 255.0, s[2] as f64 / 255.0],
        })
        .collect();
    Grid::from_vec(d.width, d.height, data)
}

/// Reads a PNG mask; a pixel is set when its first channel is ≥ 128.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let d = decode_png(path)?;
    let data = d.samples.chunks(d.channels).map(|s| s[0] >= 128).collect();
    Grid::from_vec(d.width, d.height, data)
}

/// Magic prefix of depth rasters: 4 bytes, then height and width as little-endian u16.
pub const DEPTH_MAGIC: &[u8; 4] = b"DF32";

/// Writes `depth` as little-endian f32 after the 8-byte header.
pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    ensure_input!(
        depth.width <= u16::MAX as usize && depth.height <= u16::MAX as usize,
        "depth raster too large"
    );
    let mut bytes = Vec::with_capacity(8 + 4 * depth.data.len());
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&(depth.height as u16).to_le_bytes());
    bytes.extend_from_slice(&(depth.width as u16).to_le_bytes());
    for &d in &depth.data {
        bytes.extend_from_slice(&(d as f32).to_le_bytes());
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::format(path, "missing depth header"));
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if bytes.len() != 8 + 4 * w * h {
        return Err(Error::format(path, format!("expected {} payload bytes", 4 * w * h)));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Grid::from_vec(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_depth_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Grid::from_fn(5, 3, |r, c| [r as f64 / 2.0, c as f64 / 4.0, 0.5]);
        let p = dir.path().join("a.png");
        write_rgb_png(&p, &img).unwrap();
        let back = read_rgb_png(&p).unwrap();
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            for ch in 0..3 {
                assert!((a[ch] - b[ch]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }

        let mask = Grid::from_fn(11, 4, |r, c| (r + c) % 3 == 0);
        let p = dir.path().join("m.png");
        write_mask_png(&p, &mask).unwrap();
        assert_eq!(read_mask_png(&p).unwrap(), mask);

        let depth = Grid::from_fn(7, 2, |r, c| if c == 0 { 0.0 } else { 1.0 + 0.1 * (r * 7 + c) as f64 });
        let p = dir.path().join("d.f32");
        write_depth(&p, &depth).unwrap();
        let back = read_depth(&p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 8 + 4 * 14);
        for (a, b) in depth.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn iou_and_bbox() {
        let a = Grid::from_fn(4, 4, |r, c| r < 2 && c < 2);
        let b = Grid::from_fn(4, 4, |r, _| r < 2);
        assert!((a.iou(&b) - 0.5).abs() < 1e-12);
        assert_eq!(a.bounding_box(), Some((0, 0, 1, 1)));
        assert_eq!(Grid::filled(3, 3, false).bounding_box(), None);
    }
}
