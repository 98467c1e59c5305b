//! Float RGB images and 8-bit PNG I/O.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// H x W x 3 image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Indexed [row, col, channel].
    pub rgb: Array3<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Image {
        Image {
            width,
            height,
            rgb: Array3::zeros((height, width, 3)),
        }
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        [self.rgb[[j, i, 0]], self.rgb[[j, i, 1]], self.rgb[[j, i, 2]]]
    }

    pub fn set_pixel(&mut self, i: usize, j: usize, c: [f64; 3]) {
        for ch in 0..3 {
            self.rgb[[j, i, ch]] = c[ch];
        }
    }

    /// float -> byte via round(v*255), clamped; round half away from zero.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.rgb
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Image {
        let rgb = Array3::from_shape_vec(
            (height, width, 3),
            bytes.iter().map(|b| *b as f64 / 255.0).collect(),
        )
        .expect("byte buffer length matches dimensions");
        Image { width, height, rgb }
    }
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let buf = image.to_bytes();
    let img = image::RgbImage::from_raw(image.width as u32, image.height as u32, buf)
        .expect("raw buffer sized from image");
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .into_rgb8();
    Ok(Image::from_bytes(
        img.width() as usize,
        img.height() as usize,
        img.as_raw(),
    ))
}
