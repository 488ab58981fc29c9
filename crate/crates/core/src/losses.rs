//! The three cross-scale objectives and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph, Var};
use crate::config::{CsmConfig, CsrSupport, LossConfig};
use crate::data::composite::InstanceMask;
use crate::data::image::ImageView;
use crate::error::{Result, SaipError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-step loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_csm: f64,
    pub l_csr: f64,
    pub l_css: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(l_csm: f64, l_csr: f64, l_css: f64, weights: &LossConfig) -> Self {
        LossReport {
            l_csm,
            l_csr,
            l_css,
            total: weights.csm_weight * l_csm + weights.csr_weight * l_csr + weights.css_weight * l_css,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_csm, self.l_csr, self.l_css, self.total].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean over reports, accumulated in order.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.l_csm += r.l_csm;
            out.l_csr += r.l_csr;
            out.l_css += r.l_css;
            out.total += r.total;
        }
        out.l_csm /= n;
        out.l_csr /= n;
        out.l_css /= n;
        out.total /= n;
        out
    }
}

/// Sharpened, centred teacher distribution per row.
pub fn teacher_probs<T: Scalar>(teacher_logits: &Tensor<T>, center: &Tensor<T>, temp: f64) -> Result<Tensor<T>> {
    if center.shape() != (1, teacher_logits.cols()) {
        return Err(SaipError::Shape(format!(
            "center {:?} does not match {} prototypes",
            center.shape(),
            teacher_logits.cols()
        )));
    }
    let inv = T::lit(1.0 / temp);
    let c = center.row(0);
    let shifted = Tensor::from_fn(teacher_logits.rows(), teacher_logits.cols(), |r, k| {
        (teacher_logits.get(r, k) - c[k]) * inv
    });
    Ok(softmax_rows(&shifted))
}

/// Cross-entropy between every teacher row (targets, held constant) and
/// every student row (predictions), averaged over all pairs.
pub fn csm_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    center: &Tensor<T>,
    csm: &CsmConfig,
) -> Result<Var> {
    let (a, k) = g.shape(student_logits);
    let b = teacher_logits.rows();
    if a == 0 || b == 0 {
        return Err(SaipError::Invalid("matching loss needs at least one view on each side".into()));
    }
    if teacher_logits.cols() != k {
        return Err(SaipError::Shape(format!(
            "student has {k} prototypes, teacher {}",
            teacher_logits.cols()
        )));
    }
    let probs = teacher_probs(teacher_logits, center, csm.teacher_temp)?;
    let bn = T::from_usize_lossy(b);
    let target = Tensor::from_fn(1, k, |_, j| (0..b).map(|r| probs.get(r, j)).sum::<T>() / bn);

    let s = g.scale(student_logits, T::lit(1.0 / csm.student_temp));
    let logq = g.log_softmax_rows(s);
    let logq = if a == 1 {
        logq
    } else {
        let avg = g.constant(Tensor::full(1, a, T::one() / T::from_usize_lossy(a)));
        g.matmul(avg, logq)
    };
    let target = g.constant(target);
    let prod = g.mul(target, logq);
    let total = g.sum(prod);
    Ok(g.scale(total, -T::one()))
}

pub fn csm_loss<T: Scalar>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    center: &Tensor<T>,
    csm: &CsmConfig,
) -> Result<T> {
    let mut g = Graph::new();
    let s = g.constant(student_logits.clone());
    let l = csm_loss_graph(&mut g, s, teacher_logits, center, csm)?;
    Ok(g.value(l).item())
}

/// `center ← m·center + (1 − m)·mean(teacher rows)`.
pub fn update_center<T: Scalar>(center: &mut Tensor<T>, teacher_logits: &Tensor<T>, momentum: f64) {
    let n = T::from_usize_lossy(teacher_logits.rows().max(1));
    let m = T::lit(momentum);
    let keep = T::one() - m;
    for (k, c) in center.data_mut().iter_mut().enumerate() {
        let mean = (0..teacher_logits.rows()).map(|r| teacher_logits.get(r, k)).sum::<T>() / n;
        *c = m * *c + keep * mean;
    }
}

/// Patches over which the reconstruction error is measured. A view with
/// nothing masked falls back to every patch.
pub fn csr_support(mask_map: &[bool], support: CsrSupport) -> Vec<usize> {
    let masked: Vec<usize> = (0..mask_map.len()).filter(|&i| mask_map[i]).collect();
    match support {
        CsrSupport::Masked if !masked.is_empty() => masked,
        _ => (0..mask_map.len()).collect(),
    }
}

/// Mean squared error over the values of the `support` patches.
pub fn csr_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target_patches: &Tensor<T>,
    support: &[usize],
) -> Result<Var> {
    if g.shape(pred) != target_patches.shape() {
        return Err(SaipError::Shape(format!(
            "prediction {:?} does not match target patches {:?}",
            g.shape(pred),
            target_patches.shape()
        )));
    }
    if support.is_empty() {
        return Err(SaipError::Invalid("empty reconstruction support".into()));
    }
    let p = g.gather_rows(pred, support);
    let t = g.constant(target_patches.gather_rows(support));
    let d = g.sub(p, t);
    let sq = g.mul(d, d);
    Ok(g.mean(sq))
}

pub fn csr_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &ImageView<T>,
    mask_map: &[bool],
    patch: usize,
    support: CsrSupport,
) -> Result<T> {
    let patches = target.patchify(patch)?;
    if mask_map.len() != patches.rows() {
        return Err(SaipError::Shape(format!(
            "mask covers {} patches, target has {}",
            mask_map.len(),
            patches.rows()
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = csr_loss_graph(&mut g, p, &patches, &csr_support(mask_map, support))?;
    Ok(g.value(l).item())
}

/// `(1/N) Σ_t mean((pred_t − target_t)²)`; predictions and targets are
/// `cells × 1` columns.
pub fn css_loss_graph<T: Scalar>(g: &mut Graph<T>, preds: &[Var], targets: &[Tensor<T>]) -> Result<Var> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(SaipError::Shape(format!(
            "{} predictions for {} instance masks",
            preds.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (&p, t) in preds.iter().zip(targets) {
        if g.shape(p) != t.shape() {
            return Err(SaipError::Shape(format!(
                "prediction {:?} does not match mask grid {:?}",
                g.shape(p),
                t.shape()
            )));
        }
        let tv = g.constant(t.clone());
        let d = g.sub(p, tv);
        let sq = g.mul(d, d);
        terms.push(g.mean(sq));
    }
    let stacked = g.concat_rows(&terms);
    Ok(g.mean(stacked))
}

pub fn mask_target<T: Scalar>(mask: &InstanceMask<T>) -> Tensor<T> {
    Tensor::from_vec(mask.token_mask.len(), 1, mask.token_mask.clone()).expect("column of mask values")
}

pub fn css_loss<T: Scalar>(preds: &[Tensor<T>], masks: &[InstanceMask<T>]) -> Result<T> {
    let mut g = Graph::new();
    let vars: Vec<Var> = preds
        .iter()
        .map(|p| {
            let col = Tensor::from_vec(p.len(), 1, p.data().to_vec()).expect("column");
            g.constant(col)
        })
        .collect();
    let targets: Vec<Tensor<T>> = masks.iter().map(mask_target).collect();
    let l = css_loss_graph(&mut g, &vars, &targets)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_temps() -> CsmConfig {
        CsmConfig {
            student_temp: 1.0,
            teacher_temp: 1.0,
            ..CsmConfig::default()
        }
    }

    #[test]
    fn uniform_student_gives_log_k() {
        let student = Tensor::<f64>::zeros(1, 4);
        let teacher = Tensor::from_vec(2, 4, vec![3.0, -1.0, 0.5, 2.0, 0.0, 0.0, 9.0, -4.0]).unwrap();
        let l = csm_loss(&student, &teacher, &Tensor::zeros(1, 4), &unit_temps()).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matched_student_is_near_zero() {
        let student = Tensor::<f64>::from_vec(1, 2, vec![20.0, -20.0]).unwrap();
        let teacher = Tensor::from_vec(1, 2, vec![1e6, -1e6]).unwrap();
        let l = csm_loss(&student, &teacher, &Tensor::zeros(1, 2), &unit_temps()).unwrap();
        assert!((0.0..1e-8).contains(&l), "{l}");
    }

    #[test]
    fn empty_views_are_an_error() {
        let student = Tensor::<f64>::zeros(1, 3);
        let teacher = Tensor::zeros(0, 3);
        assert!(csm_loss(&student, &teacher, &Tensor::zeros(1, 3), &unit_temps()).is_err());
    }

    #[test]
    fn csm_matches_brute_force_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = CsmConfig {
            student_temp: 0.1,
            teacher_temp: 0.04,
            ..CsmConfig::default()
        };
        let s: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let student = Tensor::from_vec(1, 3, s.clone()).unwrap();
        let teacher = Tensor::from_vec(2, 3, t.clone()).unwrap();
        let center = Tensor::from_vec(1, 3, c.clone()).unwrap();
        let got = csm_loss(&student, &teacher, &center, &cfg).unwrap();

        let zs: f64 = s.iter().map(|v| (v / 0.1).exp()).sum();
        let mut want = 0.0;
        for row in t.chunks(3) {
            let zt: f64 = (0..3).map(|k| ((row[k] - c[k]) / 0.04).exp()).sum();
            for k in 0..3 {
                let p = ((row[k] - c[k]) / 0.04).exp() / zt;
                let q = (s[k] / 0.1).exp() / zs;
                want -= p * q.ln() / 2.0;
            }
        }
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn center_updates() {
        let logits = Tensor::<f64>::from_vec(2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        let mut c = Tensor::from_vec(1, 2, vec![7.0, 7.0]).unwrap();
        update_center(&mut c, &logits, 0.0);
        assert_eq!(c.data(), &[2.0, 4.0]);

        let ones = Tensor::<f64>::full(3, 2, 1.0);
        let mut c = Tensor::zeros(1, 2);
        update_center(&mut c, &ones, 0.9);
        assert!((c.get(0, 0) - 0.1).abs() < 1e-15);
        for _ in 0..2000 {
            update_center(&mut c, &ones, 0.9);
        }
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
    }

    fn target_view() -> ImageView<f64> {
        let pixels = (0..4 * 8 * 3).map(|i| (i as f64 * 0.17).sin()).collect();
        ImageView::new(pixels, 4, 8, "t", 1.0).unwrap()
    }

    #[test]
    fn csr_identities() {
        let target = target_view();
        let patches = target.patchify(4).unwrap();
        let mask = [true, false];
        let l = csr_loss(&patches, &target, &mask, 4, CsrSupport::Masked).unwrap();
        assert_eq!(l, 0.0);

        let mut shifted = patches.clone();
        for v in shifted.row_mut(0) {
            *v += 0.3;
        }
        let l = csr_loss(&shifted, &target, &mask, 4, CsrSupport::Masked).unwrap();
        assert!((l - 0.09).abs() < 1e-12);
        let l = csr_loss(&shifted, &target, &mask, 4, CsrSupport::All).unwrap();
        assert!((l - 0.045).abs() < 1e-12);
    }

    #[test]
    fn csr_rejects_grid_mismatch() {
        let target = target_view();
        let patches = target.patchify(4).unwrap();
        assert!(csr_loss(&patches, &target, &[true, false, true], 4, CsrSupport::Masked).is_err());
    }

    #[test]
    fn unmasked_view_falls_back_to_all_patches() {
        assert_eq!(csr_support(&[false, false, false], CsrSupport::Masked), vec![0, 1, 2]);
        assert_eq!(csr_support(&[false, true, false], CsrSupport::Masked), vec![1]);
    }
}
