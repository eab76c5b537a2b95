//! RGB images in `[0, 1]` and binary PPM (P6) IO.

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    /// Maximum sample value of the source encoding (255 for 8-bit).
    max_value: u16,
    data: Vec<f32>,
}

impl ImageBuffer {
    /// Values are clamped into `[0, 1]`.
    pub fn new(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return shape_err(format!("image {width}x{height} needs {} samples, got {}", width * height * 3, data.len()));
        }
        data.iter_mut().for_each(|v| *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Ok(Self { width, height, max_value: 255, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data).expect("consistent size")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn max_value(&self) -> u16 {
        self.max_value
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v).clamp(0.0, 1.0));
        out
    }

    /// `[1, 3, H, W]` planar tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut out = vec![T::zero(); 3 * plane];
        for (i, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = T::lit(px[c] as f64);
            }
        }
        Tensor::from_vec([1, 3, self.height, self.width], out).expect("consistent size")
    }

    /// Inverse of [`ImageBuffer::to_tensor`] for sample `n` of an `[N,3,H,W]` batch.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let &[count, 3, h, w] = t.shape() else {
            return shape_err(format!("image tensor must be [N,3,H,W], got {:?}", t.shape()));
        };
        if n >= count {
            return shape_err(format!("sample {n} out of {count}"));
        }
        let plane = h * w;
        let base = n * 3 * plane;
        let mut data = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                data.push(t.data()[base + c * plane + i].as_f64() as f32);
            }
        }
        Self::new(w, h, data)
    }

    /// Stacks same-sized images into one `[N,3,H,W]` tensor.
    pub fn batch<T: Scalar>(images: &[&ImageBuffer]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.width != first.width || img.height != first.height {
                return shape_err(format!(
                    "batch mixes {}x{} and {}x{} images",
                    first.width, first.height, img.width, img.height
                ));
            }
            data.extend(img.to_tensor::<T>().into_data());
        }
        Tensor::from_vec([images.len(), 3, first.height, first.width], data)
    }

    /// Reflect-pads right/bottom so both extents are multiples of `multiple`.
    pub fn pad_reflect_to(&self, multiple: usize) -> Self {
        let w = self.width.div_ceil(multiple) * multiple;
        let h = self.height.div_ceil(multiple) * multiple;
        if w == self.width && h == self.height {
            return self.clone();
        }
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        };
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                data.extend(self.pixel(reflect(x, self.width), reflect(y, self.height)));
            }
        }
        Self { width: w, height: h, max_value: self.max_value, data }
    }

    /// Top-left `width x height` window.
    pub fn crop(&self, width: usize, height: usize) -> Result<Self> {
        if width > self.width || height > self.height {
            return shape_err(format!("crop {width}x{height} exceeds {}x{}", self.width, self.height));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let row = y * self.width * 3;
            data.extend_from_slice(&self.data[row..row + width * 3]);
        }
        Ok(Self { width, height, max_value: self.max_value, data })
    }

    pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err("not a binary PPM (P6)".into());
        }
        let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
        let width = num(token()?)?;
        let height = num(token()?)?;
        let max_value = num(token()?)?;
        if width == 0 || height == 0 || !(1..=65535).contains(&max_value) {
            return Err(format!("unsupported header {width}x{height} max {max_value}"));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let bytes_per = if max_value < 256 { 1 } else { 2 };
        let need = width * height * 3 * bytes_per;
        if bytes.len() < start + need {
            return Err(format!("raster truncated: need {need} bytes"));
        }
        let raster = &bytes[start..start + need];
        let scale = 1.0 / max_value as f32;
        let data: Vec<f32> = if bytes_per == 1 {
            raster.iter().map(|&b| (b as f32 * scale).min(1.0)).collect()
        } else {
            raster.chunks(2).map(|p| (u16::from_be_bytes([p[0], p[1]]) as f32 * scale).min(1.0)).collect()
        };
        Ok(Self { width, height, max_value: max_value as u16, data })
    }

    /// 8-bit P6 encoding with round-to-nearest quantisation.
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Image { path: path.into(), reason: e.to_string() })?;
        Self::decode_ppm(&bytes).map_err(|reason| Error::Image { path: path.into(), reason })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm()).map_err(|e| Error::Image { path: path.into(), reason: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ppm_8bit_round_trip_is_byte_exact(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
            bytes.extend((0..w * h * 3).map(|_| rng.below(256) as u8));
            let img = ImageBuffer::decode_ppm(&bytes).unwrap();
            prop_assert_eq!(img.encode_ppm(), bytes);
        }
    }

    #[test]
    fn header_comments_and_errors() {
        let bytes = b"P6\n# made by hand\n2 1\n255\n\x00\x80\xff\x10\x20\x30".to_vec();
        let img = ImageBuffer::decode_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixel(0, 0), [0.0, 128.0 / 255.0, 1.0]);
        assert!(ImageBuffer::decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(ImageBuffer::decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
    }

    #[test]
    fn sixteen_bit_decodes() {
        let bytes = b"P6\n1 1\n65535\n\xff\xff\x00\x00\x80\x00".to_vec();
        let img = ImageBuffer::decode_ppm(&bytes).unwrap();
        assert_eq!(img.max_value(), 65535);
        assert_eq!(img.pixel(0, 0)[0], 1.0);
        assert_eq!(img.pixel(0, 0)[1], 0.0);
    }

    #[test]
    fn tensor_round_trip_and_padding() {
        let mut rng = Rng::new(2);
        let data: Vec<f32> = (0..5 * 3 * 3).map(|_| rng.uniform() as f32).collect();
        let img = ImageBuffer::new(5, 3, data).unwrap();
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), &[1, 3, 3, 5]);
        assert_eq!(ImageBuffer::from_tensor(&t, 0).unwrap(), img);
        let padded = img.pad_reflect_to(4);
        assert_eq!((padded.width(), padded.height()), (8, 4));
        assert_eq!(padded.pixel(5, 0), img.pixel(3, 0));
        assert_eq!(padded.pixel(0, 3), img.pixel(0, 1));
        assert_eq!(padded.crop(5, 3).unwrap(), img);
    }
}
