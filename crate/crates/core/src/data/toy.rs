//! Procedural person-like crops for desk-scale runs and the identity probe.
//!
//! Each identity fixes clothing colours, a garment pattern and a body build;
//! every crop of it varies apparent size, horizontal offset, lighting and
//! background.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SaipError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Plain,
    HStripes,
    VStripes,
    Checks,
    Diagonal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub id: usize,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub top: [f64; 3],
    pub top_alt: [f64; 3],
    pub bottom: [f64; 3],
    pub pattern: Pattern,
    pub stripe_period: f64,
    /// Torso half-width relative to crop width.
    pub build: f64,
    /// Fraction of the body height taken by the top garment.
    pub top_len: f64,
}

fn color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

/// Low-saturation backdrop colour: a grey level with a slight tint.
fn backdrop<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let g = rng.gen_range(0.2..0.8);
    [0, 1, 2].map(|_| (g + rng.gen_range(-0.08..0.08f64)).clamp(0.0, 1.0))
}

impl Identity {
    pub fn random<R: Rng + ?Sized>(id: usize, rng: &mut R) -> Self {
        let tone = rng.gen_range(0.3..0.9);
        let patterns = [
            Pattern::Plain,
            Pattern::HStripes,
            Pattern::VStripes,
            Pattern::Checks,
            Pattern::Diagonal,
        ];
        Identity {
            id,
            skin: [tone, tone * 0.8, tone * 0.65],
            hair: color(rng).map(|c| c * 0.5),
            top: color(rng),
            top_alt: color(rng),
            bottom: color(rng),
            pattern: patterns[rng.gen_range(0..patterns.len())],
            stripe_period: rng.gen_range(0.06..0.16),
            build: rng.gen_range(0.16..0.28),
            top_len: rng.gen_range(0.35..0.55),
        }
    }

    fn garment(&self, u: f64, v: f64) -> [f64; 3] {
        let p = self.stripe_period;
        let band = |t: f64| ((t / p).floor() as i64).rem_euclid(2) == 0;
        let alt = match self.pattern {
            Pattern::Plain => false,
            Pattern::HStripes => band(v),
            Pattern::VStripes => band(u),
            Pattern::Checks => band(u) ^ band(v),
            Pattern::Diagonal => band((u + v) * 0.7),
        };
        if alt {
            self.top_alt
        } else {
            self.top
        }
    }

    /// Renders one crop of `height × width` pixels.
    pub fn render<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> RgbImage {
        let bg_a = backdrop(rng);
        let bg_b = backdrop(rng);
        let bg_dir = rng.gen_range(0.0..std::f64::consts::TAU);
        let light = rng.gen_range(0.75..1.25);
        // Apparent size: the body spans this fraction of the crop height.
        let body_h = rng.gen_range(0.55..0.97);
        let zoom = body_h / 0.9;
        let cx = 0.5 + rng.gen_range(-0.1..0.1) * (1.5 - zoom);
        let top_y = rng.gen_range(0.01..(0.99 - body_h));
        let bottom_y = top_y + body_h;
        let noise = 0.03;

        let head_r = body_h * 0.09;
        let head_cy = top_y + head_r;
        let shoulder = head_cy + head_r * 1.2;
        let waist = shoulder + (bottom_y - shoulder) * self.top_len;

        let (cos_d, sin_d) = (bg_dir.cos(), bg_dir.sin());
        RgbImage::from_fn(width as u32, height as u32, |x, y| {
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;
            let dx = u - cx;
            let bx = dx / zoom;
            // Aspect of a 2:1 crop in normalized units.
            let head = (dx * 0.5).powi(2) + (v - head_cy).powi(2) < head_r * head_r;
            let hair = head && v < head_cy - head_r * 0.3;
            let torso = v >= shoulder && v < waist && bx.abs() < self.build;
            let arms = v >= shoulder
                && v < waist * 0.95 + 0.05 * shoulder
                && bx.abs() >= self.build
                && bx.abs() < self.build + 0.07;
            let legs = v >= waist && v < bottom_y && bx.abs() < self.build * 0.9 && bx.abs() > 0.015;
            let base = if hair {
                self.hair
            } else if head {
                self.skin
            } else if torso {
                self.garment(bx, (v - shoulder) / zoom)
            } else if arms {
                self.skin
            } else if legs {
                self.bottom
            } else {
                let t = 0.5 + 0.5 * (dx * cos_d + (v - 0.5) * sin_d);
                [0, 1, 2].map(|c| bg_a[c] * (1.0 - t) + bg_b[c] * t)
            };
            Rgb(base.map(|c| {
                let n = rng.gen_range(-noise..noise);
                ((c * light + n).clamp(0.0, 1.0) * 255.0).round() as u8
            }))
        })
    }
}

/// `identities × per_identity` crops with labels, reproducible from `seed`.
pub fn toy_person_set(
    identities: usize,
    per_identity: usize,
    hw: [usize; 2],
    seed: u64,
) -> Vec<(usize, RgbImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let people: Vec<Identity> = (0..identities).map(|i| Identity::random(i, &mut rng)).collect();
    let mut out = Vec::with_capacity(identities * per_identity);
    for _ in 0..per_identity {
        for p in &people {
            out.push((p.id, p.render(hw[0], hw[1], &mut rng)));
        }
    }
    out
}

/// Writes a toy corpus as `id{ident:04}_{k:03}.png` files under `dir`.
pub fn write_toy_corpus(
    dir: &Path,
    identities: usize,
    per_identity: usize,
    hw: [usize; 2],
    seed: u64,
) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| SaipError::io(dir, e))?;
    let set = toy_person_set(identities, per_identity, hw, seed);
    for (n, (id, img)) in set.iter().enumerate() {
        let k = n / identities;
        let path = dir.join(format!("id{id:04}_{k:03}.png"));
        img.save(&path).map_err(|e| SaipError::Decode {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(set.len())
}
