use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use super::ShiftError;

/// Row-major, channel-interleaved pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels, "pixel buffer size");
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn<F>(height: usize, width: usize, channels: usize, f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> f32,
    {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image::new(height, width, channels, data)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Pixel with coordinates clamped to the image (edge replication).
    #[inline]
    pub(crate) fn at_clamped(&self, y: isize, x: isize, c: usize) -> f32 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.at(y, x, c)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn load_png(path: &Path) -> Result<Image, ShiftError> {
        let decoded = image::open(path).map_err(|e| ShiftError::ImageDecode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let (channels, w, h, bytes) = match decoded {
            DynamicImage::ImageLuma8(img) => (1, img.width(), img.height(), img.into_raw()),
            DynamicImage::ImageRgb8(img) => (3, img.width(), img.height(), img.into_raw()),
            other => {
                return Err(ShiftError::UnsupportedImage {
                    channels: usize::from(other.color().channel_count()),
                })
            }
        };
        let data = bytes.into_iter().map(|b| f32::from(b) / 255.0).collect();
        Ok(Image::new(h as usize, w as usize, channels, data))
    }

    /// PNG bytes, pixels rounded to 8 bits.
    pub fn to_png(&self) -> Result<Vec<u8>, ShiftError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_dynamic()?
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| ShiftError::ImageDecode {
                path: "<memory>".into(),
                reason: e.to_string(),
            })?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ShiftError> {
        let bytes = self.to_png()?;
        std::fs::write(path, bytes).map_err(super::io_err(path))
    }

    fn to_dynamic(&self) -> Result<DynamicImage, ShiftError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => Ok(DynamicImage::ImageLuma8(
                GrayImage::from_raw(w, h, bytes).expect("buffer size checked"),
            )),
            3 => Ok(DynamicImage::ImageRgb8(
                RgbImage::from_raw(w, h, bytes).expect("buffer size checked"),
            )),
            c => Err(ShiftError::UnsupportedImage { channels: c }),
        }
    }
}
