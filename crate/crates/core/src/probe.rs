//! Evaluation instruments: cross-scale consistency, summary-token saliency
//! and a frozen-feature linear probe.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::checkpoint::Archive;
use crate::config::ExperimentConfig;
use crate::data::image::{bilinear_matrix, ImageView};
use crate::data::views::rescale_view;
use crate::decoders::CsmHead;
use crate::encoder::{encoder_archive, load_encoder, EncoderSpec, VisionEncoder, ENCODER_PREFIX};
use crate::error::{Result, SaipError};
use crate::expert::CSM_PREFIX;
use crate::params::{Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{load_checkpoint, STATE_KIND};

/// Widths of an exported matching head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsmShape {
    pub hidden: usize,
    pub latent: usize,
    pub prototypes: usize,
}

/// A frozen encoder, optionally with its matching head.
#[derive(Clone, Debug)]
pub struct EncoderBundle<T> {
    pub id: String,
    pub encoder: VisionEncoder,
    pub csm: Option<(CsmShape, CsmHead)>,
    pub params: ParamStore<T>,
}

fn params_digest<T: Scalar>(params: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        buf.clear();
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl<T: Scalar> EncoderBundle<T> {
    pub fn new(spec: EncoderSpec, csm: Option<CsmShape>, params: ParamStore<T>, label: &str) -> Result<Self> {
        let head = csm.map(|s| (s, CsmHead::new("csm", spec.embed_dim, s.hidden, s.latent, s.prototypes)));
        let id = format!("{label}:{}", params_digest(&params));
        Ok(EncoderBundle {
            id,
            encoder: VisionEncoder::new(spec)?,
            csm: head,
            params,
        })
    }

    /// Student encoder and head of a freshly initialised model.
    pub fn random(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let spec = EncoderSpec::from_config(config);
        let enc = VisionEncoder::new(spec.clone())?;
        let head = CsmHead::from_config(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        enc.init(&mut params, &mut rng);
        head.init(&mut params, &mut rng);
        EncoderBundle::new(spec, Some(csm_shape(config)), params, "random")
    }

    /// Student encoder and head taken from a training state.
    pub fn from_student(config: &ExperimentConfig, student: &ParamStore<T>, label: &str) -> Result<Self> {
        let mut params = student.subset(&format!("{ENCODER_PREFIX}."));
        params.extend(student.subset(CSM_PREFIX));
        EncoderBundle::new(EncoderSpec::from_config(config), Some(csm_shape(config)), params, label)
    }

    /// Reads a training checkpoint or an encoder export.
    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::<T>::load(path)?;
        let kind: String = archive.meta("kind", path)?;
        let label = path.display().to_string();
        if kind == STATE_KIND {
            let (config, state) = load_checkpoint::<T>(path)?;
            return EncoderBundle::from_student(&config, &state.student, &label);
        }
        let (spec, mut params) = load_encoder::<T>(path)?;
        let shape: Option<CsmShape> = archive.meta("csm_head", path)?;
        if shape.is_some() {
            let head: ParamStore<T> = archive.tensors.into_iter().filter(|(n, _)| n.starts_with(CSM_PREFIX)).collect();
            params.extend(head);
        }
        EncoderBundle::new(spec, shape, params, &label)
    }

    /// Encoder export carrying the matching head when present.
    pub fn archive(&self) -> Archive<T> {
        let mut a = encoder_archive(&self.encoder.spec, &self.params);
        a.set_meta("csm_head", &self.csm.as_ref().map(|(s, _)| *s));
        if self.csm.is_some() {
            for (n, t) in self.params.subset(CSM_PREFIX).iter() {
                a.tensors.insert(n.clone(), t.clone());
            }
        }
        a
    }

    /// Summary tokens, one row per image.
    pub fn features(&self, images: &[ImageView<T>]) -> Result<Tensor<T>> {
        let rows: Vec<Tensor<T>> = images
            .par_iter()
            .map(|img| Ok(self.encoder.encode(&self.params, img)?.image_token))
            .collect::<Result<_>>()?;
        stack(&rows, self.encoder.dim())
    }

    /// Unit-norm matching latents, or normalised summary tokens when the
    /// bundle has no head.
    pub fn latents(&self, images: &[ImageView<T>]) -> Result<Tensor<T>> {
        let rows: Vec<Tensor<T>> = images
            .par_iter()
            .map(|img| {
                let mut g = Graph::new();
                let mut p = Binder::frozen(&self.params);
                let tok = self.encoder.forward_image(&mut g, &mut p, img, false)?.image_token;
                let latent = match &self.csm {
                    Some((_, head)) => head.forward(&mut g, &mut p, tok).0,
                    None => g.l2_normalize_rows(tok),
                };
                Ok(g.value(latent).clone())
            })
            .collect::<Result<_>>()?;
        let width = rows.first().map_or(0, Tensor::cols);
        stack(&rows, width)
    }
}

fn csm_shape(config: &ExperimentConfig) -> CsmShape {
    CsmShape {
        hidden: config.csm.hidden_dim,
        latent: config.csm.latent_dim,
        prototypes: config.csm.prototypes,
    }
}

fn stack<T: Scalar>(rows: &[Tensor<T>], width: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::from_vec(rows.len(), width, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCosine {
    pub scale_a: f64,
    pub scale_b: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageConsistency {
    pub source_id: String,
    pub pairs: Vec<PairCosine>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub encoder_id: String,
    pub scales: Vec<f64>,
    pub images: Vec<ImageConsistency>,
    /// Mean and population standard deviation over every pair of every image.
    pub mean: f64,
    pub std: f64,
}

/// Line-delimited report rows written by the `probe` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportLine {
    Pair {
        source_id: String,
        scale_a: f64,
        scale_b: f64,
        cosine: f64,
    },
    Summary {
        encoder_id: String,
        scales: Vec<f64>,
        images: usize,
        pairs: usize,
        mean: f64,
        std: f64,
    },
}

impl ConsistencyReport {
    pub fn num_pairs(&self) -> usize {
        self.images.iter().map(|i| i.pairs.len()).sum()
    }

    pub fn lines(&self) -> Vec<ReportLine> {
        let mut out: Vec<ReportLine> = self
            .images
            .iter()
            .flat_map(|img| {
                img.pairs.iter().map(|p| ReportLine::Pair {
                    source_id: img.source_id.clone(),
                    scale_a: p.scale_a,
                    scale_b: p.scale_b,
                    cosine: p.cosine,
                })
            })
            .collect();
        out.push(ReportLine::Summary {
            encoder_id: self.encoder_id.clone(),
            scales: self.scales.clone(),
            images: self.images.len(),
            pairs: self.num_pairs(),
            mean: self.mean,
            std: self.std,
        });
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.lines()
            .iter()
            .map(|l| serde_json::to_string(l).expect("report serialises") + "\n")
            .collect()
    }
}

pub fn check_scales(scales: &[f64]) -> Result<()> {
    if scales.len() < 2 {
        return Err(SaipError::Invalid(format!("need at least 2 scales, got {}", scales.len())));
    }
    if let Some(s) = scales.iter().find(|&&s| !(s > 0.0 && s <= 2.0)) {
        return Err(SaipError::Invalid(format!("scale {s} outside (0, 2]")));
    }
    Ok(())
}

/// Pairwise cosine similarity of the latents of each image rendered at
/// every scale.
pub fn cross_scale_consistency<T: Scalar>(
    bundle: &EncoderBundle<T>,
    images: &[ImageView<T>],
    scales: &[f64],
) -> Result<ConsistencyReport> {
    check_scales(scales)?;
    let per_image: Vec<ImageConsistency> = images
        .par_iter()
        .map(|img| {
            let views: Vec<ImageView<T>> = scales.iter().map(|&s| rescale_view(img, s)).collect();
            let z = bundle.latents(&views)?;
            let mut pairs = Vec::new();
            for a in 0..scales.len() {
                for b in a + 1..scales.len() {
                    let dot: f64 = z.row(a).iter().zip(z.row(b)).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
                    pairs.push(PairCosine {
                        scale_a: scales[a],
                        scale_b: scales[b],
                        cosine: dot.clamp(-1.0, 1.0),
                    });
                }
            }
            Ok(ImageConsistency {
                source_id: img.source_id.clone(),
                pairs,
            })
        })
        .collect::<Result<_>>()?;
    let all: Vec<f64> = per_image.iter().flat_map(|i| i.pairs.iter().map(|p| p.cosine)).collect();
    let n = all.len().max(1) as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(ConsistencyReport {
        encoder_id: bundle.id.clone(),
        scales: scales.to_vec(),
        images: per_image,
        mean,
        std,
    })
}

/// Summary-token attention upsampled to image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// Head-averaged attention on the token grid, as computed.
    pub grid: Tensor<f64>,
    /// `height × width` map rescaled to `[0, 1]`.
    pub heat: Tensor<f64>,
}

pub fn saliency_map<T: Scalar>(bundle: &EncoderBundle<T>, image: &ImageView<T>) -> Result<SaliencyMap> {
    let (att, grid) = bundle.encoder.summary_attention(&bundle.params, image)?;
    let att = att.cast::<f64>();
    let flat = Tensor::from_vec(grid.0 * grid.1, 1, att.data().to_vec())?;
    let up = bilinear_matrix::<f64>(grid, (image.height, image.width)).matmul(&flat);
    let lo = up.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let heat = Tensor::from_vec(
        image.height,
        image.width,
        up.data()
            .iter()
            .map(|&v| if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 })
            .collect(),
    )?;
    Ok(SaliencyMap { grid: att, heat })
}

/// Blends a red-to-blue heat ramp over the image.
pub fn render_overlay<T: Scalar>(image: &ImageView<T>, map: &SaliencyMap) -> RgbImage {
    let base = image.to_rgb();
    RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let h = map.heat.get(y as usize, x as usize);
        let ramp = [255.0 * h, 64.0 * (1.0 - (2.0 * h - 1.0).abs()), 255.0 * (1.0 - h)];
        let px = base.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|c| (0.5 * px[c] as f64 + 0.5 * ramp[c]).round() as u8))
    })
}

pub fn write_overlay<T: Scalar>(image: &ImageView<T>, map: &SaliencyMap, path: &Path) -> Result<()> {
    render_overlay(image, map)
        .save(path)
        .map_err(|e| SaipError::io(path, std::io::Error::other(e)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of each class held out for testing.
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 0.05,
            weight_decay: 1e-4,
            test_fraction: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Splits indices per class, holding out the last `test_fraction` (at least
/// one) of each class's items in input order.
pub fn stratified_split(labels: &[usize], test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in by_class.into_iter().filter(|m| !m.is_empty()) {
        let hold = ((members.len() as f64 * test_fraction).ceil() as usize).clamp(1, members.len());
        let cut = members.len() - hold;
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn accuracy(w: &Tensor<f64>, b: &[f64], x: &Tensor<f64>, y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let scores = x.matmul(w);
    let hits = (0..x.rows())
        .filter(|&i| {
            let row = scores.row(i);
            let best = (0..row.len())
                .max_by(|&a, &c| (row[a] + b[a]).total_cmp(&(row[c] + b[c])))
                .unwrap_or(0);
            best == y[i]
        })
        .count();
    hits as f64 / y.len() as f64
}

/// Multinomial logistic regression on standardised features, trained full
/// batch with Adam and evaluated on the held-out rows.
pub fn fit_linear_probe(
    features: &Tensor<f64>,
    labels: &[usize],
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if features.rows() != labels.len() {
        return Err(SaipError::Shape(format!(
            "{} feature rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        train.iter().for_each(|&i| seen[labels[i]] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(SaipError::Invalid(format!(
            "linear probe needs at least 2 classes in the training split, found {distinct}"
        )));
    }
    let d = features.cols();
    let xtr_raw = features.gather_rows(train);
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for r in 0..xtr_raw.rows() {
        for (j, v) in xtr_raw.row(r).iter().enumerate() {
            mean[j] += v / n;
        }
    }
    for r in 0..xtr_raw.rows() {
        for (j, v) in xtr_raw.row(r).iter().enumerate() {
            sd[j] += (v - mean[j]).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let standardize = |x: Tensor<f64>| {
        let mut x = x;
        for r in 0..x.rows() {
            for (j, v) in x.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[j]) / sd[j];
            }
        }
        x
    };
    let xtr = standardize(xtr_raw);
    let xte = standardize(features.gather_rows(test));
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = test.iter().map(|&i| labels[i]).collect();

    let mut w = Tensor::<f64>::zeros(d, classes);
    let mut b = vec![0.0; classes];
    let (mut mw, mut vw) = (Tensor::<f64>::zeros(d, classes), Tensor::<f64>::zeros(d, classes));
    let (mut mb, mut vb) = (vec![0.0; classes], vec![0.0; classes]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for t in 1..=cfg.epochs {
        let mut logits = xtr.matmul(&w);
        for r in 0..logits.rows() {
            for (c, v) in logits.row_mut(r).iter_mut().enumerate() {
                *v += b[c];
            }
        }
        let mut delta = crate::autodiff::softmax_rows(&logits);
        for (r, &y) in ytr.iter().enumerate() {
            let v = delta.get(r, y);
            delta.set(r, y, v - 1.0);
        }
        delta.scale_assign(1.0 / n);
        let mut gw = xtr.transpose().matmul(&delta);
        for (g, &p) in gw.data_mut().iter_mut().zip(w.data()) {
            *g += cfg.weight_decay * p;
        }
        let gb: Vec<f64> = (0..classes).map(|c| (0..delta.rows()).map(|r| delta.get(r, c)).sum()).collect();
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for i in 0..w.len() {
            let g = gw.data()[i];
            let m = b1 * mw.data()[i] + (1.0 - b1) * g;
            let v = b2 * vw.data()[i] + (1.0 - b2) * g * g;
            mw.data_mut()[i] = m;
            vw.data_mut()[i] = v;
            w.data_mut()[i] -= cfg.lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
        for c in 0..classes {
            mb[c] = b1 * mb[c] + (1.0 - b1) * gb[c];
            vb[c] = b2 * vb[c] + (1.0 - b2) * gb[c] * gb[c];
            b[c] -= cfg.lr * (mb[c] / c1) / ((vb[c] / c2).sqrt() + eps);
        }
    }
    Ok(ProbeResult {
        classes: distinct,
        train_size: train.len(),
        test_size: test.len(),
        train_accuracy: accuracy(&w, &b, &xtr, &ytr),
        test_accuracy: accuracy(&w, &b, &xte, &yte),
    })
}

/// Trains a linear classifier on frozen summary tokens of labelled images
/// and reports held-out top-1 accuracy. The bundle is not modified.
pub fn linear_probe<T: Scalar>(
    bundle: &EncoderBundle<T>,
    images: &[ImageView<T>],
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let features = bundle.features(images)?.cast::<f64>();
    let (train, test) = stratified_split(labels, cfg.test_fraction);
    fit_linear_probe(&features, labels, &train, &test, cfg)
}

/// Labels permuted by a seeded shuffle, for chance-level checks.
pub fn shuffled_labels(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut out = labels.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn micro() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.anchor_hw = [32, 16];
        c.patch_size = 8;
        c.encoder.embed_dim = 16;
        c.encoder.depth = 1;
        c.encoder.heads = 2;
        c.csm.hidden_dim = 16;
        c.csm.latent_dim = 8;
        c.csm.prototypes = 4;
        c
    }

    fn image(seed: u64) -> ImageView<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..32 * 16 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ImageView::new(px, 32, 16, format!("img{seed}"), 1.0).unwrap()
    }

    #[test]
    fn identical_scales_give_unit_cosine() {
        let b = EncoderBundle::<f64>::random(&micro(), 1).unwrap();
        let r = cross_scale_consistency(&b, &[image(0), image(1)], &[1.0, 1.0]).unwrap();
        for p in r.images.iter().flat_map(|i| &i.pairs) {
            assert!((p.cosine - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn three_scales_three_pairs_and_bounds() {
        let b = EncoderBundle::<f64>::random(&micro(), 2).unwrap();
        let r = cross_scale_consistency(&b, &[image(3)], &[0.75, 1.0, 1.5]).unwrap();
        assert_eq!(r.images[0].pairs.len(), 3);
        assert!(r.images[0].pairs.iter().all(|p| (-1.0..=1.0).contains(&p.cosine)));
        let lines = r.to_jsonl();
        assert_eq!(lines.lines().count(), 4);
        assert!(lines.lines().last().unwrap().contains("\"record\":\"summary\""));
    }

    #[test]
    fn duplicating_an_image_keeps_the_mean() {
        let b = EncoderBundle::<f64>::random(&micro(), 3).unwrap();
        let s = [0.75, 1.0, 1.5];
        let one = cross_scale_consistency(&b, &[image(4), image(5)], &s).unwrap();
        let dup = cross_scale_consistency(&b, &[image(4), image(5), image(4), image(5)], &s).unwrap();
        assert!((one.mean - dup.mean).abs() < 1e-12);
    }

    #[test]
    fn scale_preconditions() {
        let b = EncoderBundle::<f64>::random(&micro(), 3).unwrap();
        assert!(cross_scale_consistency(&b, &[image(0)], &[1.0]).is_err());
        assert!(cross_scale_consistency(&b, &[image(0)], &[1.0, 2.5]).is_err());
    }

    #[test]
    fn saliency_geometry_range_and_determinism() {
        let b = EncoderBundle::<f64>::random(&micro(), 4).unwrap();
        let img = image(6);
        let m = saliency_map(&b, &img).unwrap();
        assert_eq!(m.heat.shape(), (32, 16));
        assert!(m.heat.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.grid.data().iter().all(|&v| v >= 0.0));
        assert_eq!(m, saliency_map(&b, &img).unwrap());
        let rgb = render_overlay(&img, &m);
        assert_eq!((rgb.height(), rgb.width()), (32, 16));
    }

    fn blobs(classes: usize, per: usize, spread: f64, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 6;
        let mut x = Tensor::zeros(classes * per, d);
        let mut y = Vec::new();
        for i in 0..classes * per {
            let c = i % classes;
            for j in 0..d {
                let center = if j % classes == c { 4.0 } else { 0.0 };
                x.set(i, j, center + spread * rng.gen_range(-1.0..1.0));
            }
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn separable_features_reach_full_accuracy() {
        let (x, y) = blobs(3, 20, 0.5, 7);
        let (tr, te) = stratified_split(&y, 0.3);
        let r = fit_linear_probe(&x, &y, &tr, &te, &ProbeConfig::default()).unwrap();
        assert_eq!(r.test_accuracy, 1.0);
        assert_eq!(r.classes, 3);
    }

    #[test]
    fn single_class_is_rejected() {
        let (x, _) = blobs(2, 5, 0.1, 1);
        let y = vec![0; 10];
        let (tr, te) = stratified_split(&y, 0.3);
        assert!(fit_linear_probe(&x, &y, &tr, &te, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn shuffled_labels_sit_near_chance() {
        let classes = 4;
        let (x, y) = blobs(classes, 150, 0.5, 11);
        let ys = shuffled_labels(&y, 5);
        let (tr, te) = stratified_split(&ys, 0.3);
        let r = fit_linear_probe(&x, &ys, &tr, &te, &ProbeConfig::default()).unwrap();
        let p = 1.0 / classes as f64;
        let sigma = (p * (1.0 - p) / te.len() as f64).sqrt();
        assert!((r.test_accuracy - p).abs() < 4.0 * sigma, "{r:?}");
    }

    #[test]
    fn probe_leaves_encoder_untouched() {
        let b = EncoderBundle::<f64>::random(&micro(), 9).unwrap();
        let before = b.params.clone();
        let imgs: Vec<_> = (0..6).map(image).collect();
        let labels = vec![0, 1, 0, 1, 0, 1];
        let cfg = ProbeConfig {
            epochs: 20,
            ..ProbeConfig::default()
        };
        linear_probe(&b, &imgs, &labels, &cfg).unwrap();
        assert_eq!(b.params, before);
    }

    #[test]
    fn export_round_trip_keeps_head() {
        let dir = tempfile::tempdir().unwrap();
        let b = EncoderBundle::<f32>::random(&micro(), 5).unwrap();
        let path = dir.path().join("enc.saip");
        b.archive().save(&path).unwrap();
        let back = EncoderBundle::<f32>::load(&path).unwrap();
        assert_eq!(back.params, b.params);
        assert!(back.csm.is_some());
        let img = image(0).cast::<f32>();
        assert_eq!(back.latents(std::slice::from_ref(&img)).unwrap(), b.latents(&[img]).unwrap());
    }
}
