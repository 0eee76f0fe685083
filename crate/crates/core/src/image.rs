//! RGB rasters, binary masks, resampling and PNG I/O.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};

/// Real-valued image in [0,1], stored channel-planar (C×H×W).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument("image extents must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape("Image::new", "numel", height * width * channels, data.len()));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in color {
            data.extend(std::iter::repeat(c).take(height * width));
        }
        Image::new(height, width, 3, data).expect("positive extents")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// 1×C×H×W tensor view for the network.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone())
            .expect("consistent extents")
    }

    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| self.plane(c).iter().sum::<f64>() / (self.height * self.width) as f64)
            .collect()
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            data.extend(bilinear_resize(self.plane(c), self.height, self.width, height, width));
        }
        Image::new(height, width, self.channels, data).expect("positive extents")
    }

    /// Crop `[top, top+h) × [left, left+w)` then resize to `out_h × out_w`.
    pub fn crop_resize(&self, top: usize, left: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Image {
        debug_assert!(top + h <= self.height && left + w <= self.width);
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for y in top..top + h {
                data.extend_from_slice(&plane[y * self.width + left..y * self.width + left + w]);
            }
        }
        let cropped = Image::new(h, w, self.channels, data).expect("positive crop");
        if h == out_h && w == out_w {
            cropped
        } else {
            cropped.resize(out_h, out_w)
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.height * self.width * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = self.get(c.min(self.channels - 1), y, x);
                    buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        write_png(path, self.width as u32, self.height as u32, png::ColorType::Rgb, png::BitDepth::Eight, &buf)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let (info, bytes) = read_png(path)?;
        let (h, w) = (info.height as usize, info.width as usize);
        if info.bit_depth != png::BitDepth::Eight {
            return Err(png_err(path, "expected 8-bit samples"));
        }
        let stride = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            other => return Err(png_err(path, &format!("unsupported color type {other:?}"))),
        };
        let mut img = Image::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let px = &bytes[(y * w + x) * stride..];
                let rgb = if stride >= 3 {
                    [px[0], px[1], px[2]]
                } else {
                    [px[0]; 3]
                };
                img.set_pixel(y, x, rgb.map(|v| v as f64 / 255.0));
            }
        }
        Ok(img)
    }
}

/// Bilinear resampling of a single plane with half-pixel centres
/// (`src = (dst + 0.5)·in/out − 0.5`, clamped to the border).
pub fn bilinear_resize(plane: &[f64], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = plane[y0 * in_w + x0] * (1.0 - fx) + plane[y0 * in_w + x1] * fx;
            let bottom = plane[y1 * in_w + x0] * (1.0 - fx) + plane[y1 * in_w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Inclusive pixel box: rows `top..=bottom`, columns `left..=right`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    /// Centre rounded toward negative infinity, as (row, col).
    pub fn center(&self) -> (i64, i64) {
        (
            (self.top as i64 + self.bottom as i64).div_euclid(2),
            (self.left as i64 + self.right as i64).div_euclid(2),
        )
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y <= self.bottom && x >= self.left && x <= self.right
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let top = self.top.max(other.top);
        let bottom = self.bottom.min(other.bottom);
        let left = self.left.max(other.left);
        let right = self.right.min(other.right);
        if top > bottom || left > right {
            0
        } else {
            (bottom - top + 1) * (right - left + 1)
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        inter as f64 / (self.area() + other.area() - inter) as f64
    }
}

/// Binary H×W raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("Mask::from_bits", "numel", height * width, bits.len()));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn from_box(height: usize, width: usize, b: BBox) -> Self {
        let mut m = Mask::empty(height, width);
        for y in b.top..=b.bottom.min(height - 1) {
            for x in b.left..=b.right.min(width - 1) {
                m.set(y, x, true);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight box around the set pixels.
    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => BBox {
                            top: y,
                            left: x,
                            bottom: y,
                            right: x,
                        },
                        Some(b) => BBox {
                            top: b.top.min(y),
                            left: b.left.min(x),
                            bottom: b.bottom.max(y),
                            right: b.right.max(x),
                        },
                    });
                }
            }
        }
        b
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// IoU between the set pixels and a box region.
    pub fn iou_with_box(&self, b: &BBox) -> f64 {
        let mut inter = 0;
        for y in b.top..=b.bottom.min(self.height - 1) {
            for x in b.left..=b.right.min(self.width - 1) {
                if self.get(y, x) {
                    inter += 1;
                }
            }
        }
        let union = self.count() + b.area() - inter;
        inter as f64 / union as f64
    }

    /// 1-bit grayscale PNG, set pixels white.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let row_bytes = self.width.div_ceil(8);
        let mut buf = vec![0u8; row_bytes * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    buf[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        write_png(path, self.width as u32, self.height as u32, png::ColorType::Grayscale, png::BitDepth::One, &buf)
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        let (info, bytes) = read_png(path)?;
        let (h, w) = (info.height as usize, info.width as usize);
        if info.color_type != png::ColorType::Grayscale {
            return Err(png_err(path, "mask must be grayscale"));
        }
        let mut m = Mask::empty(h, w);
        match info.bit_depth {
            png::BitDepth::One => {
                let row_bytes = w.div_ceil(8);
                for y in 0..h {
                    for x in 0..w {
                        m.set(y, x, bytes[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0);
                    }
                }
            }
            png::BitDepth::Eight => {
                for (i, v) in bytes.iter().take(h * w).enumerate() {
                    m.bits[i] = *v >= 128;
                }
            }
            other => return Err(png_err(path, &format!("unsupported mask bit depth {other:?}"))),
        }
        Ok(m)
    }
}

fn png_err(path: &Path, message: &str) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn write_png(path: &Path, width: u32, height: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, &e.to_string()))?;
    writer.write_image_data(data).map_err(|e| png_err(path, &e.to_string()))?;
    writer.finish().map_err(|e| png_err(path, &e.to_string()))
}

fn read_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, &e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, &e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}
