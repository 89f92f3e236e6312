//! RGB images in `[0, 1]` and the fixed 4× resampling operators.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Interleaved `H×W×3` float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Image::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f32 {
        let n = self.data.len().max(1) as f32;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / n
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Channel-major `3×H×W` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut t = Tensor::zeros(3, self.height, self.width);
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                t.data[c * plane + i] = T::lit(px[c] as f64);
            }
        }
        t
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.channels != 3 {
            return Err(Error::shape(format!(
                "expected 3 channels, got {}",
                t.channels
            )));
        }
        let plane = t.plane();
        let mut data = vec![0.0; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                data[i * 3 + c] = t.data[c * plane + i].as_f32();
            }
        }
        Image::from_vec(t.width, t.height, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::shape("image buffer size"))?;
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Image::from_vec(w as usize, h as usize, data)
    }
}

/// 4×4 box average. Both dimensions must be divisible by 4.
pub fn downsample_x4(image: &Image) -> Result<Image> {
    let (w, h) = image.dims();
    if w % 4 != 0 || h % 4 != 0 || w == 0 || h == 0 {
        return Err(Error::shape(format!(
            "downsample_x4 needs dimensions divisible by 4, got {w}x{h}"
        )));
    }
    let (ow, oh) = (w / 4, h / 4);
    let mut out = Image::new(ow, oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = [0.0f32; 3];
            for dy in 0..4 {
                for dx in 0..4 {
                    let p = image.pixel(ox * 4 + dx, oy * 4 + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            out.set_pixel(ox, oy, acc.map(|v| (v / 16.0).clamp(0.0, 1.0)));
        }
    }
    Ok(out)
}

/// Source coordinate and weights for half-pixel-centred 4× resampling.
fn source_coord(dst: usize, src_len: usize) -> f32 {
    let s = (dst as f32 + 0.5) / 4.0 - 0.5;
    s.clamp(0.0, (src_len - 1) as f32)
}

/// Bilinear 4× upsampling with half-pixel centres and edge clamping.
pub fn upsample_x4(image: &Image) -> Image {
    let (w, h) = image.dims();
    let (ow, oh) = (w * 4, h * 4);
    let mut out = Image::new(ow, oh);
    for oy in 0..oh {
        let sy = source_coord(oy, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f32;
        for ox in 0..ow {
            let sx = source_coord(ox, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f32;
            let (a, b, c, d) = (
                image.pixel(x0, y0),
                image.pixel(x1, y0),
                image.pixel(x0, y1),
                image.pixel(x1, y1),
            );
            let mut px = [0.0; 3];
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                px[ch] = (top + (bottom - top) * fy).clamp(0.0, 1.0);
            }
            out.set_pixel(ox, oy, px);
        }
    }
    out
}

fn cubic_weight(x: f32) -> f32 {
    // Keys kernel, a = -0.5.
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic 4× upsampling (Keys, a = −0.5), used as the classical baseline.
pub fn bicubic_x4(image: &Image) -> Image {
    let (w, h) = image.dims();
    let (ow, oh) = (w * 4, h * 4);
    let mut out = Image::new(ow, oh);
    let taps = |dst: usize, len: usize| {
        let s = (dst as f32 + 0.5) / 4.0 - 0.5;
        let base = s.floor() as isize;
        let mut idx = [0usize; 4];
        let mut wts = [0.0f32; 4];
        for k in 0..4 {
            let i = base - 1 + k as isize;
            wts[k] = cubic_weight(s - i as f32);
            idx[k] = i.clamp(0, len as isize - 1) as usize;
        }
        (idx, wts)
    };
    for oy in 0..oh {
        let (iy, wy) = taps(oy, h);
        for ox in 0..ow {
            let (ix, wx) = taps(ox, w);
            let mut px = [0.0f32; 3];
            for a in 0..4 {
                for b in 0..4 {
                    let p = image.pixel(ix[b], iy[a]);
                    let wgt = wy[a] * wx[b];
                    for c in 0..3 {
                        px[c] += wgt * p[c];
                    }
                }
            }
            out.set_pixel(ox, oy, px.map(|v| v.clamp(0.0, 1.0)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_constant_is_constant() {
        let img = Image::filled(8, 8, [0.5, 0.5, 0.5]);
        let d = downsample_x4(&img).unwrap();
        assert_eq!(d.dims(), (2, 2));
        assert!(d.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn downsample_block_mean() {
        let mut img = Image::new(4, 4);
        for i in 0..16 {
            let v = i as f32 / 15.0;
            img.set_pixel(i % 4, i / 4, [v, v, v]);
        }
        let d = downsample_x4(&img).unwrap();
        assert_eq!(d.dims(), (1, 1));
        for v in d.pixel(0, 0) {
            assert!((v - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn downsample_shape_and_errors() {
        let img = Image::new(128, 128);
        assert_eq!(downsample_x4(&img).unwrap().dims(), (32, 32));
        assert!(downsample_x4(&Image::new(10, 8)).is_err());
    }

    #[test]
    fn upsample_constant_and_shape() {
        let img = Image::filled(32, 32, [0.25, 0.5, 0.75]);
        let up = upsample_x4(&img);
        assert_eq!(up.dims(), (128, 128));
        assert!(up.data.chunks_exact(3).all(|p| p == [0.25, 0.5, 0.75]));
        let round = downsample_x4(&up).unwrap();
        assert!(round.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn upsample_is_monotone_on_a_ramp() {
        let img = Image::from_vec(2, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let up = upsample_x4(&img);
        assert_eq!(up.dims(), (8, 4));
        for y in 0..4 {
            let row: Vec<f32> = (0..8).map(|x| up.pixel(x, y)[0]).collect();
            assert!(row.windows(2).all(|w| w[0] <= w[1]), "{row:?}");
        }
    }

    #[test]
    fn bicubic_preserves_constants() {
        let img = Image::filled(6, 5, [0.3, 0.3, 0.3]);
        let up = bicubic_x4(&img);
        assert_eq!(up.dims(), (24, 20));
        assert!(up.data.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_vec(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), (3, 1, 2));
        assert_eq!(t.channel(1), &[0.2, 0.5]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }
}
