//! Image and mask containers plus 8-bit PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{invalid, Error, Result};

/// `H × W × 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage(pub Array3<f64>);

impl RgbImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Array3::zeros((height, width, 3)))
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    /// Rounds every channel onto the 8-bit grid so that PNG storage is lossless.
    pub fn quantize(&mut self) {
        self.0
            .mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.0
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, data: &[u8]) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(invalid!("rgb buffer of {} bytes for {height}x{width}", data.len()));
        }
        let v = data.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self(Array3::from_shape_vec((height, width, 3), v).expect("shape checked")))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width(), self.height(), png::ColorType::Rgb, &self.to_rgb8())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, color, data) = read_png(path)?;
        if color != png::ColorType::Rgb {
            return Err(Error::Png(format!("{}: expected RGB, found {color:?}", path.display())));
        }
        Self::from_rgb8(h, w, &data)
    }
}

/// `H × W` mask over {0, 1}; 1 marks an edited pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(pub Array2<u8>);

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Array2::zeros((height, width)))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self(Array2::from_shape_fn((height, width), |(y, x)| f(y, x) as u8))
    }

    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.0[[y, x]] != 0
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.0.mapv(|v| v as f64)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let data: Vec<u8> = self.0.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        write_png(path, self.width(), self.height(), png::ColorType::Grayscale, &data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, color, data) = read_png(path)?;
        if color != png::ColorType::Grayscale {
            return Err(Error::Png(format!("{}: expected grayscale, found {color:?}", path.display())));
        }
        let v = data.iter().map(|&b| (b >= 128) as u8).collect();
        Ok(Self(Array2::from_shape_vec((h, w), v).expect("png dims")))
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(data).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("{}: expected 8-bit samples", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}
