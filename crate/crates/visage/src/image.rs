//! Image values and lossless 8-bit file IO.
//!
//! Pixels live in [-1, 1] everywhere inside the pipeline (the generator's
//! Tanh head forces that range); files store the usual 0..255 quantization.
//! Spatial sizes are square powers of two >= 32 so the stride-2 conv stacks
//! halve and double cleanly.

use ndarray::{Array3, Array4, ArrayView3};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("pixel value {value} at flat index {index} outside [0, 255]")]
    OutOfRange { value: i64, index: usize },
    #[error("pixel value {0} outside [-1, 1]")]
    OutOfUnitRange(f32),
    #[error("image size {0}x{1} is not a square power of two >= 32")]
    BadSize(usize, usize),
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    BadChannels(usize),
    #[error("{path}: expected {expected} channels, file has {actual}")]
    ChannelMismatch {
        path: String,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: expected {expected}x{expected}, file is {w}x{h}")]
    SizeMismatch {
        path: String,
        expected: usize,
        w: usize,
        h: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Codec {
        path: String,
        source: ::image::ImageError,
    },
}

/// A single face image, shape `[channels, height, width]`, values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f32>,
}

impl Image {
    /// Wraps a pixel array after checking the range and size invariants.
    pub fn new(pixels: Array3<f32>) -> Result<Self, ImageError> {
        let (c, h, w) = pixels.dim();
        if c != 1 && c != 3 {
            return Err(ImageError::BadChannels(c));
        }
        if h != w || h < 32 || !h.is_power_of_two() {
            return Err(ImageError::BadSize(h, w));
        }
        for &v in pixels.iter() {
            if !(-1.0..=1.0).contains(&v) {
                return Err(ImageError::OutOfUnitRange(v));
            }
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> ArrayView3<'_, f32> {
        self.pixels.view()
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn size(&self) -> usize {
        self.pixels.dim().1
    }

    /// Quantizes to 8-bit, the inverse of [`rescale_to_unit`] up to 1/255.
    pub fn to_bytes(&self) -> Array3<u8> {
        self.pixels
            .mapv(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let (c, h, w) = self.pixels.dim();
        let bytes = self.to_bytes();
        // Interleave [c,h,w] -> row-major h,w,c as the codec expects.
        let mut buf = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    buf.push(bytes[[ch, y, x]]);
                }
            }
        }
        let err = |source| ImageError::Codec {
            path: path.display().to_string(),
            source,
        };
        match c {
            1 => ::image::GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer length matches dimensions")
                .save(path)
                .map_err(err),
            3 => ::image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer length matches dimensions")
                .save(path)
                .map_err(err),
            _ => Err(ImageError::BadChannels(c)),
        }
    }

    pub fn load_png(path: &Path, size: usize, channels: usize) -> Result<Self, ImageError> {
        let display = path.display().to_string();
        let dynamic = ::image::open(path).map_err(|source| ImageError::Codec {
            path: display.clone(),
            source,
        })?;
        let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
        if w != size || h != size {
            return Err(ImageError::SizeMismatch {
                path: display,
                expected: size,
                w,
                h,
            });
        }
        let mut pixels = Array3::<f32>::zeros((channels, h, w));
        match channels {
            1 => {
                let gray = dynamic.into_luma8();
                for y in 0..h {
                    for x in 0..w {
                        pixels[[0, y, x]] = byte_to_unit(gray.get_pixel(x as u32, y as u32).0[0]);
                    }
                }
            }
            3 => {
                let rgb = dynamic.into_rgb8();
                for y in 0..h {
                    for x in 0..w {
                        let p = rgb.get_pixel(x as u32, y as u32);
                        for ch in 0..3 {
                            pixels[[ch, y, x]] = byte_to_unit(p.0[ch]);
                        }
                    }
                }
            }
            other => return Err(ImageError::BadChannels(other)),
        }
        Image::new(pixels)
    }
}

#[inline]
fn byte_to_unit(b: u8) -> f32 {
    f32::from(b) / 127.5 - 1.0
}

/// Maps integer pixel values in [0, 255] linearly onto [-1, 1]:
/// 0 -> -1, 127.5 -> 0, 255 -> +1.
pub fn rescale_to_unit(values: &Array3<i32>) -> Result<Image, ImageError> {
    for (index, &v) in values.iter().enumerate() {
        if !(0..=255).contains(&v) {
            return Err(ImageError::OutOfRange {
                value: v as i64,
                index,
            });
        }
    }
    Image::new(values.mapv(|v| v as f32 / 127.5 - 1.0))
}

/// Stacks images into a `[batch, c, h, w]` tensor for the networks.
pub fn stack_batch(images: &[&Image]) -> Array4<f32> {
    assert!(!images.is_empty(), "cannot stack an empty batch");
    let (c, h, w) = images[0].pixels.dim();
    let mut out = Array4::<f32>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.pixels.dim(), (c, h, w), "mixed shapes in batch");
        out.index_axis_mut(ndarray::Axis(0), i).assign(&img.pixels);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rescale_endpoints() {
        let zeros = Array3::<i32>::zeros((1, 32, 32));
        let img = rescale_to_unit(&zeros).unwrap();
        assert!(img.pixels().iter().all(|&v| v == -1.0));

        let full = Array3::<i32>::from_elem((1, 32, 32), 255);
        let img = rescale_to_unit(&full).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rescale_midpoint_is_zero() {
        // 127.5 is not an integer; check the two straddling values instead
        // and the exact algebraic midpoint via the float map.
        let a = Array3::<i32>::from_elem((1, 32, 32), 127);
        let b = Array3::<i32>::from_elem((1, 32, 32), 128);
        let va = rescale_to_unit(&a).unwrap().pixels()[[0, 0, 0]];
        let vb = rescale_to_unit(&b).unwrap().pixels()[[0, 0, 0]];
        assert!(va < 0.0 && vb > 0.0);
        assert!((va + vb).abs() < 1e-6);
        assert_eq!(127.5f32 / 127.5 - 1.0, 0.0);
    }

    #[test]
    fn rescale_rejects_out_of_range() {
        let mut bad = Array3::<i32>::zeros((1, 32, 32));
        bad[[0, 3, 4]] = 256;
        assert!(matches!(
            rescale_to_unit(&bad),
            Err(ImageError::OutOfRange { value: 256, .. })
        ));
        bad[[0, 3, 4]] = -1;
        assert!(rescale_to_unit(&bad).is_err());
    }

    #[test]
    fn quantization_round_trip_within_one_step() {
        let mut vals = Array3::<f32>::zeros((1, 32, 32));
        for (i, v) in vals.iter_mut().enumerate() {
            *v = -1.0 + 2.0 * (i as f32 % 97.0) / 96.0;
        }
        let img = Image::new(vals.clone()).unwrap();
        let bytes = img.to_bytes().mapv(|b| i32::from(b));
        let back = rescale_to_unit(&bytes).unwrap();
        for (a, b) in vals.iter().zip(back.pixels().iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_bad_sizes_and_ranges() {
        assert!(Image::new(Array3::zeros((1, 16, 16))).is_err());
        assert!(Image::new(Array3::zeros((1, 48, 48))).is_err());
        assert!(Image::new(Array3::zeros((1, 32, 64))).is_err());
        assert!(Image::new(Array3::zeros((2, 32, 32))).is_err());
        assert!(Image::new(Array3::from_elem((1, 32, 32), 1.5)).is_err());
        assert!(Image::new(Array3::zeros((1, 32, 32))).is_ok());
        assert!(Image::new(Array3::zeros((3, 128, 128))).is_ok());
    }

    #[test]
    fn png_round_trip_is_exact_at_byte_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("face.png");
        let mut vals = Array3::<f32>::zeros((1, 32, 32));
        for (i, v) in vals.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f32 / 127.5 - 1.0;
        }
        let img = Image::new(vals).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path, 32, 1).unwrap();
        assert_eq!(img.to_bytes(), back.to_bytes());
    }

    #[test]
    fn png_rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("face_rgb.png");
        let mut vals = Array3::<f32>::zeros((3, 32, 32));
        for (i, v) in vals.iter_mut().enumerate() {
            *v = ((i * 11) % 255) as f32 / 127.5 - 1.0;
        }
        let img = Image::new(vals).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path, 32, 3).unwrap();
        assert_eq!(img.to_bytes(), back.to_bytes());
    }

    #[test]
    fn stack_batch_layout() {
        let a = Image::new(Array3::from_elem((1, 32, 32), 0.25)).unwrap();
        let b = Image::new(Array3::from_elem((1, 32, 32), -0.5)).unwrap();
        let batch = stack_batch(&[&a, &b]);
        assert_eq!(batch.dim(), (2, 1, 32, 32));
        assert_eq!(batch[[0, 0, 5, 5]], 0.25);
        assert_eq!(batch[[1, 0, 5, 5]], -0.5);
    }
}
