//! Float image buffers with PNG and raw float I/O.
//!
//! Raw dumps: 16-byte header (`"MSTI"`, width, height, channels as
//! little-endian u32) followed by row-major little-endian f32 samples.

use std::path::Path;

use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"MSTI";

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u32) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width as usize * height as usize * channels as usize],
        }
    }

    pub fn filled(width: u32, height: u32, channels: u32, v: f32) -> Self {
        let mut im = Self::new(width, height, channels);
        im.data.fill(v);
        im
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[f32] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [f32] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &mut self.data[i..i + c]
    }

    pub fn same_shape(&self, o: &Image) -> bool {
        self.width == o.width && self.height == o.height && self.channels == o.channels
    }

    /// 8-bit PNG; one channel is written as grayscale, three as RGB.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(Error::Format(format!("cannot write a {c}-channel PNG"))),
        };
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        image::save_buffer(path, &bytes, self.width, self.height, color).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads any PNG as RGB in `[0,1]`.
    pub fn load_png(path: &Path) -> Result<Image> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        Ok(Image {
            width: rgb.width(),
            height: rgb.height(),
            channels: 3,
            data: rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(RAW_MAGIC);
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Image> {
        if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
            return Err(Error::Format("not a raw float image".into()));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (w, h, c) = (u(4), u(8), u(12));
        let n = w as usize * h as usize * c as usize;
        if bytes.len() != 16 + 4 * n {
            return Err(Error::Format(format!(
                "raw image {w}x{h}x{c} needs {} bytes, found {}",
                16 + 4 * n,
                bytes.len()
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Image {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_raw_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_raw(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_raw_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_roundtrip_is_lossless() {
        let mut im = Image::new(3, 2, 3);
        for (i, v) in im.data.iter_mut().enumerate() {
            *v = i as f32 * 0.123_456_7;
        }
        let bytes = im.to_raw_bytes();
        assert_eq!(&bytes[..4], b"MSTI");
        assert_eq!(bytes.len(), 16 + 18 * 4);
        assert_eq!(Image::from_raw_bytes(&bytes).unwrap(), im);
        assert!(Image::from_raw_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn png_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let mut im = Image::new(4, 3, 3);
        for (i, v) in im.data.iter_mut().enumerate() {
            *v = (i % 7) as f32 / 6.0;
        }
        let p = dir.path().join("a.png");
        im.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert!(back.same_shape(&im));
        for (a, b) in back.data.iter().zip(&im.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert!(matches!(
            Image::load_png(&dir.path().join("nope.png")),
            Err(Error::MissingFile(_))
        ));
    }
}
