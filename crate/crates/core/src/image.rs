//! Depth and color frames plus their binary PGM/PPM file forms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("data length {len} does not match {width}x{height}")]
    BadLength { width: usize, height: usize, len: usize },
    #[error("depth value at index {index} is negative or not finite")]
    BadDepth { index: usize },
    #[error("expected a {expected} image, found {found}")]
    WrongKind { expected: &'static str, found: String },
    #[error("image i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
}

/// Row-major depth in meters. Zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::BadLength { width, height, len: data.len() });
        }
        if let Some(index) = data.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(ImageError::BadDepth { index });
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    /// Ingests 16-bit depth in millimeters, the usual depth-camera encoding.
    pub fn from_millimeters(width: usize, height: usize, mm: &[u16]) -> Result<Self, ImageError> {
        if mm.len() != width * height {
            return Err(ImageError::BadLength { width, height, len: mm.len() });
        }
        let data = mm.iter().map(|&d| f32::from(d) / 1000.0).collect();
        Ok(Self { width, height, data })
    }

    /// Inverse of [`DepthImage::from_millimeters`], rounding to the nearest millimeter.
    pub fn to_millimeters(&self) -> Vec<u16> {
        self.data
            .iter()
            .map(|&w| (w * 1000.0).round().clamp(0.0, f32::from(u16::MAX)) as u16)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let reader = image::ImageReader::with_format(BufReader::new(File::open(path)?), ImageFormat::Pnm);
        match reader.decode()? {
            DynamicImage::ImageLuma16(buf) => {
                let (w, h) = buf.dimensions();
                Self::from_millimeters(w as usize, h as usize, buf.as_raw())
            }
            other => Err(ImageError::WrongKind {
                expected: "16-bit grayscale",
                found: format!("{:?}", other.color()),
            }),
        }
    }

    /// Writes a binary 16-bit PGM (big-endian samples) in millimeters.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let mut out = BufWriter::new(File::create(path)?);
        write!(out, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for v in self.to_millimeters() {
            out.write_all(&v.to_be_bytes())?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Row-major interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != width * height * 3 {
            return Err(ImageError::BadLength { width, height, len: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let reader = image::ImageReader::with_format(BufReader::new(File::open(path)?), ImageFormat::Pnm);
        match reader.decode()? {
            DynamicImage::ImageRgb8(buf) => {
                let (w, h) = buf.dimensions();
                Self::new(w as usize, h as usize, buf.into_raw())
            }
            other => Err(ImageError::WrongKind {
                expected: "8-bit RGB",
                found: format!("{:?}", other.color()),
            }),
        }
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let out = BufWriter::new(File::create(path)?);
        PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&self.data, self.width as u32, self.height as u32, ExtendedColorType::Rgb8)?;
        Ok(())
    }
}
