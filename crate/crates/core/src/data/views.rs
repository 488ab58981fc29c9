use image::RgbImage;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::{ImageView, CHANNEL_MEAN, CHANNEL_STD};
use crate::error::{Result, SaipError};
use crate::scalar::Scalar;

/// Aspect-distorting resize of a raw crop to the anchor size, standardized.
pub fn make_anchor<T: Scalar>(raw: &RgbImage, anchor_hw: [usize; 2], source_id: &str) -> ImageView<T> {
    let view = ImageView::from_rgb(raw, source_id);
    let mut anchor = view.resized(anchor_hw[0], anchor_hw[1]);
    anchor.scale = 1.0;
    anchor
}

/// Uniform draw from `[low, high]`.
pub fn draw_scale<R: Rng + ?Sized>(range: [f64; 2], rng: &mut R) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

/// Resizes the anchor content by `scale`, then refits it to the anchor size
/// so every view shares one token grid.
pub fn rescale_view<T: Scalar>(anchor: &ImageView<T>, scale: f64) -> ImageView<T> {
    let h = ((anchor.height as f64 * scale).round() as usize).max(1);
    let w = ((anchor.width as f64 * scale).round() as usize).max(1);
    let mut view = anchor.resized(h, w).resized(anchor.height, anchor.width);
    view.scale = scale;
    view
}

pub fn make_scaled_views<T: Scalar, R: Rng + ?Sized>(
    anchor: &ImageView<T>,
    count: usize,
    scale_range: [f64; 2],
    rng: &mut R,
) -> Vec<ImageView<T>> {
    (0..count)
        .map(|_| {
            let s = draw_scale(scale_range, rng);
            rescale_view(anchor, s)
        })
        .collect()
}

/// Brightness, contrast and saturation jitter applied in unit RGB space.
pub fn photometric_jitter<T: Scalar, R: Rng + ?Sized>(view: &mut ImageView<T>, rng: &mut R) {
    let brightness = rng.gen_range(0.6..1.4);
    let contrast = rng.gen_range(0.6..1.4);
    let saturation = rng.gen_range(0.8..1.2);
    let n = (view.height * view.width) as f64;
    let mut unit: Vec<f64> = view
        .pixels
        .iter()
        .enumerate()
        .map(|(i, v)| v.as_f64() * CHANNEL_STD[i % 3] + CHANNEL_MEAN[i % 3])
        .collect();
    let mean_gray = unit
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .sum::<f64>()
        / n;
    for px in unit.chunks_exact_mut(3) {
        let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            let mut x = *v * brightness;
            x = (x - mean_gray) * contrast + mean_gray;
            x = (x - gray) * saturation + gray;
            *v = x.clamp(0.0, 1.0);
        }
    }
    for (i, (dst, u)) in view.pixels.iter_mut().zip(unit).enumerate() {
        *dst = T::lit((u - CHANNEL_MEAN[i % 3]) / CHANNEL_STD[i % 3]);
    }
}

/// A view with a random subset of its patches hidden.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedView<T> {
    pub base: ImageView<T>,
    /// Sorted indices (grid row-major) of the patches left visible.
    pub visible_indices: Vec<usize>,
    /// `true` where the patch is masked.
    pub mask_map: Vec<bool>,
    pub grid: (usize, usize),
}

impl<T: Scalar> MaskedView<T> {
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.mask_map.len()).filter(|&i| self.mask_map[i]).collect()
    }

    pub fn num_patches(&self) -> usize {
        self.mask_map.len()
    }
}

/// Number of patches left visible for a ratio over `total` patches.
pub fn visible_count(total: usize, mask_ratio: f64) -> usize {
    (((1.0 - mask_ratio) * total as f64).round() as usize).min(total)
}

pub fn apply_patch_mask<T: Scalar, R: Rng + ?Sized>(
    view: &ImageView<T>,
    mask_ratio: f64,
    patch: usize,
    rng: &mut R,
) -> Result<MaskedView<T>> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(SaipError::Invalid(format!("mask ratio {mask_ratio} not in [0, 1)")));
    }
    let (gh, gw) = view.check_patch_aligned(patch)?;
    let total = gh * gw;
    let keep = visible_count(total, mask_ratio);
    let mut visible = sample_indices(rng, total, keep).into_vec();
    visible.sort_unstable();
    let mut mask_map = vec![true; total];
    for &i in &visible {
        mask_map[i] = false;
    }
    Ok(MaskedView {
        base: view.clone(),
        visible_indices: visible,
        mask_map,
        grid: (gh, gw),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_anchor(h: usize, w: usize) -> ImageView<f64> {
        let raw = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            Rgb([(x * 7 % 256) as u8, (y * 3 % 256) as u8, ((x + y) % 256) as u8])
        });
        make_anchor(&raw, [h, w], "g")
    }

    #[test]
    fn anchor_has_requested_size() {
        let raw = RgbImage::from_pixel(57, 91, Rgb([10, 20, 30]));
        let a = make_anchor::<f32>(&raw, [256, 128], "k");
        assert_eq!((a.height, a.width), (256, 128));
        assert_eq!(a.scale, 1.0);
        assert!(a.is_finite());
    }

    #[test]
    fn already_sized_raw_is_only_standardized() {
        let raw = RgbImage::from_fn(128, 256, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]));
        let a = make_anchor::<f64>(&raw, [256, 128], "k");
        assert_eq!(a, ImageView::from_rgb(&raw, "k"));
    }

    #[test]
    fn constant_gray_maps_to_standardized_gray() {
        let raw = RgbImage::from_pixel(33, 17, Rgb([128, 128, 128]));
        let a = make_anchor::<f64>(&raw, [32, 16], "g");
        for px in a.pixels.chunks_exact(3) {
            for c in 0..3 {
                let expected = (128.0 / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
                assert!((px[c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_scale_is_identity() {
        let a = gradient_anchor(32, 16);
        let v = rescale_view(&a, 1.0);
        assert_eq!(v.pixels, a.pixels);
        assert_eq!(v.scale, 1.0);
    }

    #[test]
    fn scaled_views_are_deterministic_and_in_range() {
        let a = gradient_anchor(32, 16);
        let v1 = make_scaled_views(&a, 3, [0.75, 1.5], &mut ChaCha8Rng::seed_from_u64(9));
        let v2 = make_scaled_views(&a, 3, [0.75, 1.5], &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(v1, v2);
        for v in &v1 {
            assert!((0.75..=1.5).contains(&v.scale));
            assert_eq!((v.height, v.width), (32, 16));
        }
    }

    #[test]
    fn scale_draws_cover_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..10_000).map(|_| draw_scale([0.75, 1.5], &mut rng)).collect();
        let min = draws.iter().copied().fold(f64::INFINITY, f64::min);
        let max = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((0.75..=0.76).contains(&min), "min {min}");
        assert!((1.49..=1.5).contains(&max), "max {max}");
    }

    #[test]
    fn mask_counts_for_anchor_geometry() {
        let view = ImageView::<f32>::filled(256, 128, [0.0; 3], "z");
        let m = apply_patch_mask(&view, 0.75, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.num_patches(), 128);
        assert_eq!(m.visible_indices.len(), 32);
        assert_eq!(m.masked_indices().len(), 96);
        assert!(m.visible_indices.windows(2).all(|w| w[0] < w[1]));
        for &i in &m.visible_indices {
            assert!(!m.mask_map[i]);
        }

        let none = apply_patch_mask(&view, 0.0, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(none.visible_indices.len(), 128);
        assert!(none.mask_map.iter().all(|&b| !b));
    }

    #[test]
    fn masking_is_seed_deterministic() {
        let view = ImageView::<f32>::filled(64, 32, [0.0; 3], "z");
        let a = apply_patch_mask(&view, 0.5, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = apply_patch_mask(&view, 0.5, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.visible_indices, b.visible_indices);
    }

    #[test]
    fn jitter_keeps_values_finite_and_changes_pixels() {
        let mut v = gradient_anchor(16, 16);
        let before = v.clone();
        photometric_jitter(&mut v, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(v.is_finite());
        assert_ne!(v.pixels, before.pixels);
    }
}
