use std::io::Cursor;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// Side length images are resized and center-cropped to before encoding.
pub const PREPROCESS_SIZE: u32 = 64;

/// Decoded 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    inner: RgbImage,
}

impl Image {
    /// Wraps a raw row-major RGB buffer.
    pub fn from_rgb(width: u32, height: u32, rgb: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::input("image has zero area"));
        }
        let expected = width as usize * height as usize * 3;
        if rgb.len() != expected {
            return Err(Error::input(format!(
                "RGB buffer of {} bytes does not match {width}x{height}",
                rgb.len()
            )));
        }
        let inner = RgbImage::from_raw(width, height, rgb)
            .ok_or_else(|| Error::input("RGB buffer rejected"))?;
        Ok(Self { inner })
    }

    /// Decodes PNG/JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| Error::input(format!("undecodable image: {e}")))?;
        let inner = img.to_rgb8();
        if inner.width() == 0 || inner.height() == 0 {
            return Err(Error::input("image has zero area"));
        }
        Ok(Self { inner })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::input(format!("{}: {e}", path.display())))
    }

    pub fn width(&self) -> u32 {
        self.inner.width()
    }

    pub fn height(&self) -> u32 {
        self.inner.height()
    }

    pub fn as_rgb(&self) -> &[u8] {
        self.inner.as_raw()
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.inner
            .write_to(&mut buf, ImageFormat::Png)
            .map_err(|e| Error::format(format!("PNG encoding failed: {e}")))?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?).map_err(|e| Error::io(path, e))
    }

    /// Resize so the shorter side is `size`, then center-crop to `size`x`size`.
    pub(crate) fn preprocess(&self, size: u32) -> RgbImage {
        let (w, h) = (self.width(), self.height());
        let scale = size as f64 / w.min(h) as f64;
        let nw = ((w as f64 * scale).round() as u32).max(size);
        let nh = ((h as f64 * scale).round() as u32).max(size);
        let resized = imageops::resize(&self.inner, nw, nh, FilterType::Triangle);
        let x = (nw - size) / 2;
        let y = (nh - size) / 2;
        imageops::crop_imm(&resized, x, y, size, size).to_image()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffers() {
        assert!(Image::from_rgb(2, 2, vec![0; 5]).is_err());
        assert!(Image::from_rgb(0, 2, vec![]).is_err());
        assert!(Image::decode(b"not an image").is_err());
    }

    #[test]
    fn png_round_trip_and_preprocess_shape() {
        let img = Image::from_rgb(3, 5, (0..45).map(|v| v as u8).collect()).unwrap();
        let back = Image::decode(&img.to_png().unwrap()).unwrap();
        assert_eq!(img, back);
        let pre = img.preprocess(PREPROCESS_SIZE);
        assert_eq!(pre.dimensions(), (PREPROCESS_SIZE, PREPROCESS_SIZE));
    }
}
