use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::composite::{synthesize_composite, BBox, InstanceMask};
use crate::data::corpus::Corpus;
use crate::data::image::ImageView;
use crate::data::views::{apply_patch_mask, make_scaled_views, photometric_jitter, MaskedView};
use crate::error::{Result, SaipError};
use crate::scalar::Scalar;

/// One training unit: the anchor, its scaled views, a masked copy of one
/// scaled view, and a composite of all scaled views with their masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSample<T> {
    pub anchor: ImageView<T>,
    pub scaled: Vec<ImageView<T>>,
    pub masked: MaskedView<T>,
    /// Index into `scaled` of the view that was masked.
    pub masked_source: usize,
    pub composite: ImageView<T>,
    pub masks: Vec<InstanceMask<T>>,
}

/// Seed for the sample at `ordinal` of a run; a SplitMix64 mix of both so
/// neighbouring ordinals get unrelated streams.
pub fn sample_seed(run_seed: u64, ordinal: u64) -> u64 {
    let mut z = run_seed ^ ordinal.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_rng(run_seed: u64, ordinal: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed(run_seed, ordinal))
}

/// Assembles a sample from an already-finalized anchor.
pub fn build_sample_from_anchor<T: Scalar, R: Rng + ?Sized>(
    anchor: &ImageView<T>,
    config: &ExperimentConfig,
    rng: &mut R,
) -> Result<PretrainSample<T>> {
    anchor.check_patch_aligned(config.patch_size)?;
    let mut scaled = make_scaled_views(anchor, config.num_scaled_views, config.scale_range, rng);
    if config.photometric_jitter {
        for v in &mut scaled {
            photometric_jitter(v, rng);
        }
    }
    let masked_source = rng.gen_range(0..scaled.len());
    let masked = apply_patch_mask(&scaled[masked_source], config.mask_ratio, config.patch_size, rng)?;
    let (composite, masks, _) = synthesize_composite(
        &scaled,
        config.composite_hw,
        config.patch_size,
        config.instance_fit,
        config.placement_retries,
        rng,
    )?;
    Ok(PretrainSample {
        anchor: anchor.clone(),
        scaled,
        masked,
        masked_source,
        composite,
        masks,
    })
}

/// Draws a source image uniformly from the corpus and builds its sample.
pub fn build_sample<T: Scalar, R: Rng + ?Sized>(
    corpus: &Corpus<T>,
    config: &ExperimentConfig,
    rng: &mut R,
) -> Result<PretrainSample<T>> {
    if corpus.is_empty() {
        return Err(SaipError::Invalid("empty corpus".into()));
    }
    let i = rng.gen_range(0..corpus.len());
    build_sample_from_anchor(&corpus.anchors[i], config, rng)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum SampleRecord {
    Sample {
        source_id: String,
        anchor_hw: [usize; 2],
        composite_hw: [usize; 2],
        patch_size: usize,
        scales: Vec<f64>,
        masked_source: usize,
        visible_indices: Vec<usize>,
    },
    Mask {
        instance_index: usize,
        bbox: BBox,
        area: usize,
        grid: (usize, usize),
        token_mask: Vec<f64>,
    },
}

/// Writes a sample as lossless PNGs plus a line-delimited `sample.jsonl`
/// (one `sample` record, then one `mask` record per instance).
pub fn write_sample<T: Scalar>(sample: &PretrainSample<T>, patch: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SaipError::io(dir, e))?;
    let save = |view: &ImageView<T>, name: &str| -> Result<()> {
        let path = dir.join(name);
        view.to_rgb().save(&path).map_err(|e| SaipError::Decode {
            path: path.clone(),
            reason: e.to_string(),
        })
    };
    save(&sample.anchor, "anchor.png")?;
    for (t, v) in sample.scaled.iter().enumerate() {
        save(v, &format!("scaled_{t}.png"))?;
    }
    save(&masked_preview(&sample.masked, patch), "masked.png")?;
    save(&sample.composite, "composite.png")?;
    for (t, m) in sample.masks.iter().enumerate() {
        let img = image::GrayImage::from_fn(m.width as u32, m.height as u32, |x, y| {
            image::Luma([if m.pixel_mask[y as usize * m.width + x as usize] { 255 } else { 0 }])
        });
        let path = dir.join(format!("mask_{t}.png"));
        img.save(&path).map_err(|e| SaipError::Decode {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    }

    let mut lines = Vec::new();
    let head = SampleRecord::Sample {
        source_id: sample.anchor.source_id.clone(),
        anchor_hw: [sample.anchor.height, sample.anchor.width],
        composite_hw: [sample.composite.height, sample.composite.width],
        patch_size: patch,
        scales: sample.scaled.iter().map(|v| v.scale).collect(),
        masked_source: sample.masked_source,
        visible_indices: sample.masked.visible_indices.clone(),
    };
    lines.push(serde_json::to_string(&head).expect("record serialises"));
    for m in &sample.masks {
        let rec = SampleRecord::Mask {
            instance_index: m.instance_index,
            bbox: m.bbox,
            area: m.area(),
            grid: m.grid,
            token_mask: m.token_mask.iter().map(|v| v.as_f64()).collect(),
        };
        lines.push(serde_json::to_string(&rec).expect("record serialises"));
    }
    let path = dir.join("sample.jsonl");
    let mut f = std::fs::File::create(&path).map_err(|e| SaipError::io(&path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| SaipError::io(&path, e))?;
    }
    Ok(())
}

/// The masked view with hidden patches painted at the standardized mean
/// (mid-gray after de-standardization).
fn masked_preview<T: Scalar>(m: &MaskedView<T>, patch: usize) -> ImageView<T> {
    let mut v = m.base.clone();
    let (_, gw) = m.grid;
    for (i, &masked) in m.mask_map.iter().enumerate() {
        if !masked {
            continue;
        }
        let (gi, gj) = (i / gw, i % gw);
        for y in gi * patch..(gi + 1) * patch {
            for x in gj * patch..(gj + 1) * patch {
                v.set_pixel(y, x, [T::zero(); 3]);
            }
        }
    }
    v
}

pub fn read_sample_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| SaipError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| SaipError::Invalid(format!("{}: {e}", path.display())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.anchor_hw = [32, 32];
        c.composite_hw = [48, 48];
        c.patch_size = 8;
        c
    }

    fn anchor() -> ImageView<f32> {
        let pixels = (0..32 * 32 * 3).map(|i| ((i % 97) as f32 / 50.0) - 1.0).collect();
        ImageView::new(pixels, 32, 32, "id0", 1.0).unwrap()
    }

    #[test]
    fn sample_has_consistent_cardinalities() {
        let cfg = micro_config();
        let s = build_sample_from_anchor(&anchor(), &cfg, &mut sample_rng(1, 0)).unwrap();
        assert_eq!(s.scaled.len(), 2);
        assert_eq!(s.masks.len(), 2);
        assert_eq!(s.masked.base.scale, s.scaled[s.masked_source].scale);
        assert_eq!(s.masked.base.source_id, s.scaled[s.masked_source].source_id);
        assert_eq!((s.composite.height, s.composite.width), (48, 48));
        assert_eq!(s.masked.visible_indices.len(), 4);
    }

    #[test]
    fn sample_is_deterministic_per_seed_and_ordinal() {
        let cfg = micro_config();
        let a = build_sample_from_anchor(&anchor(), &cfg, &mut sample_rng(5, 3)).unwrap();
        let b = build_sample_from_anchor(&anchor(), &cfg, &mut sample_rng(5, 3)).unwrap();
        let c = build_sample_from_anchor(&anchor(), &cfg, &mut sample_rng(5, 4)).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        assert_ne!(a, c);
    }

    #[test]
    fn written_sample_round_trips_records() {
        let cfg = micro_config();
        let s = build_sample_from_anchor(&anchor(), &cfg, &mut sample_rng(2, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sample(&s, 8, dir.path()).unwrap();
        for f in ["anchor.png", "scaled_0.png", "scaled_1.png", "masked.png", "composite.png", "mask_1.png"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let recs = read_sample_records(&dir.path().join("sample.jsonl")).unwrap();
        assert_eq!(recs.len(), 3);
        match &recs[1] {
            SampleRecord::Mask { instance_index, area, token_mask, .. } => {
                assert_eq!(*instance_index, 0);
                let covered: f64 = token_mask.iter().sum::<f64>() * 64.0;
                assert_eq!(covered as usize, *area);
            }
            _ => panic!("expected mask record"),
        }
    }
}
