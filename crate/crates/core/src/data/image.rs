use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaipError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel mean and standard deviation applied after scaling to [0, 1].
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// A standardized RGB image, stored height-major, channels last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageView<T> {
    pub pixels: Vec<T>,
    pub height: usize,
    pub width: usize,
    pub source_id: String,
    /// Resize factor applied relative to the anchor.
    pub scale: f64,
}

impl<T: Scalar> ImageView<T> {
    pub fn new(
        pixels: Vec<T>,
        height: usize,
        width: usize,
        source_id: impl Into<String>,
        scale: f64,
    ) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(SaipError::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                pixels.len()
            )));
        }
        Ok(ImageView {
            pixels,
            height,
            width,
            source_id: source_id.into(),
            scale,
        })
    }

    /// Constant image with the given standardized colour.
    pub fn filled(height: usize, width: usize, color: [T; 3], source_id: &str) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&color);
        }
        ImageView {
            pixels,
            height,
            width,
            source_id: source_id.to_string(),
            scale: 1.0,
        }
    }

    /// Standardizes an 8-bit RGB raster without resizing.
    pub fn from_rgb(raw: &RgbImage, source_id: &str) -> Self {
        let (w, h) = raw.dimensions();
        let mut pixels = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                let Rgb(px) = *raw.get_pixel(x, y);
                for c in 0..3 {
                    pixels.push(standardize(px[c] as f64 / 255.0, c));
                }
            }
        }
        ImageView {
            pixels,
            height: h as usize,
            width: w as usize,
            source_id: source_id.to_string(),
            scale: 1.0,
        }
    }

    /// Inverse of the standardization, quantized back to 8 bits.
    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let base = (y as usize * self.width + x as usize) * 3;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = self.pixels[base + c].as_f64() * CHANNEL_STD[c] + CHANNEL_MEAN[c];
                px[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            Rgb(px)
        })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        let b = (y * self.width + x) * 3;
        [self.pixels[b], self.pixels[b + 1], self.pixels[b + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, v: [T; 3]) {
        let b = (y * self.width + x) * 3;
        self.pixels[b..b + 3].copy_from_slice(&v);
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    pub fn check_patch_aligned(&self, patch: usize) -> Result<(usize, usize)> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) || self.height == 0 || self.width == 0 {
            return Err(SaipError::NotPatchAligned {
                height: self.height,
                width: self.width,
                patch,
            });
        }
        Ok((self.height / patch, self.width / patch))
    }

    /// Mean standardized colour over all pixels.
    pub fn mean_color(&self) -> [T; 3] {
        let n = T::from_usize_lossy(self.height * self.width);
        let mut acc = [T::zero(); 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c];
            }
        }
        acc.map(|v| v / n)
    }

    /// Bilinear resize with half-pixel centres and clamped borders. Same-size
    /// requests return an exact copy.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let mut out = ImageView {
            pixels: Vec::new(),
            height,
            width,
            source_id: self.source_id.clone(),
            scale: self.scale,
        };
        if height == self.height && width == self.width {
            out.pixels = self.pixels.clone();
            return out;
        }
        let ys = axis_weights(self.height, height);
        let xs = axis_weights(self.width, width);
        out.pixels = Vec::with_capacity(height * width * 3);
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let (a, b) = (self.pixel(y0, x0), self.pixel(y0, x1));
                let (c, d) = (self.pixel(y1, x0), self.pixel(y1, x1));
                let wy = T::lit(wy);
                let wx = T::lit(wx);
                for ch in 0..3 {
                    let top = a[ch] + (b[ch] - a[ch]) * wx;
                    let bot = c[ch] + (d[ch] - c[ch]) * wx;
                    out.pixels.push(top + (bot - top) * wy);
                }
            }
        }
        out
    }

    /// Flattens into `gh·gw × patch²·3` rows: grid row-major, and inside a
    /// patch row-major pixels with channels last.
    pub fn patchify(&self, patch: usize) -> Result<Tensor<T>> {
        let (gh, gw) = self.check_patch_aligned(patch)?;
        let dim = patch * patch * 3;
        let mut data = Vec::with_capacity(gh * gw * dim);
        for i in 0..gh {
            for j in 0..gw {
                for py in 0..patch {
                    let row = (i * patch + py) * self.width + j * patch;
                    data.extend_from_slice(&self.pixels[row * 3..(row + patch) * 3]);
                }
            }
        }
        Tensor::from_vec(gh * gw, dim, data)
    }

    pub fn cast<U: Scalar>(&self) -> ImageView<U> {
        ImageView {
            pixels: self
                .pixels
                .iter()
                .map(|v| U::from_f64(v.as_f64()).unwrap_or_else(U::nan))
                .collect(),
            height: self.height,
            width: self.width,
            source_id: self.source_id.clone(),
            scale: self.scale,
        }
    }
}

#[inline]
pub fn standardize<T: Scalar>(unit: f64, channel: usize) -> T {
    T::lit((unit - CHANNEL_MEAN[channel]) / CHANNEL_STD[channel])
}

/// Source index pairs and interpolation weight for each output coordinate.
pub(crate) fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Row-stochastic matrix resampling a `src_h × src_w` grid onto
/// `dst_h × dst_w` bilinearly; rows index destination cells.
pub fn bilinear_matrix<T: Scalar>(src: (usize, usize), dst: (usize, usize)) -> Tensor<T> {
    let ys = axis_weights(src.0, dst.0);
    let xs = axis_weights(src.1, dst.1);
    let mut m = Tensor::zeros(dst.0 * dst.1, src.0 * src.1);
    for (i, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (j, &(x0, x1, wx)) in xs.iter().enumerate() {
            let r = i * dst.1 + j;
            let taps = [
                (y0, x0, (1.0 - wy) * (1.0 - wx)),
                (y0, x1, (1.0 - wy) * wx),
                (y1, x0, wy * (1.0 - wx)),
                (y1, x1, wy * wx),
            ];
            for (y, x, w) in taps {
                let c = y * src.1 + x;
                let cur = m.get(r, c);
                m.set(r, c, cur + T::lit(w));
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_exact() {
        let v = ImageView::<f32>::new((0..4 * 6 * 3).map(|i| i as f32 * 0.37).collect(), 4, 6, "a", 1.0)
            .unwrap();
        assert_eq!(v.resized(4, 6), v);
    }

    #[test]
    fn constant_image_stays_constant_under_resize() {
        let v = ImageView::<f64>::filled(5, 3, [0.1, -0.2, 0.3], "c");
        let r = v.resized(11, 7);
        for px in r.pixels.chunks_exact(3) {
            assert!((px[0] - 0.1).abs() < 1e-12 && (px[1] + 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn rgb_round_trip() {
        let raw = RgbImage::from_fn(3, 2, |x, y| Rgb([(x * 40) as u8, (y * 90) as u8, 200]));
        let v = ImageView::<f32>::from_rgb(&raw, "x");
        assert_eq!(v.to_rgb(), raw);
    }

    #[test]
    fn patchify_layout() {
        // 2x4 image, patch 2 -> grid 1x2; first patch holds columns 0..2.
        let pixels: Vec<f64> = (0..2 * 4 * 3).map(|i| i as f64).collect();
        let v = ImageView::new(pixels, 2, 4, "p", 1.0).unwrap();
        let t = v.patchify(2).unwrap();
        assert_eq!(t.shape(), (2, 12));
        assert_eq!(&t.row(0)[..6], &[0., 1., 2., 3., 4., 5.]);
        assert_eq!(&t.row(0)[6..], &[12., 13., 14., 15., 16., 17.]);
        assert_eq!(&t.row(1)[..3], &[6., 7., 8.]);
        assert!(v.patchify(3).is_err());
    }

    #[test]
    fn bilinear_matrix_rows_sum_to_one_and_identity_on_same_grid() {
        let m = bilinear_matrix::<f64>((4, 2), (3, 5));
        for r in 0..m.rows() {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let id = bilinear_matrix::<f64>((3, 3), (3, 3));
        for r in 0..9 {
            for c in 0..9 {
                assert_eq!(id.get(r, c), if r == c { 1.0 } else { 0.0 });
            }
        }
    }
}
