//! The full pretraining graph for one sample.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{CsmDirection, DecoderRoles, ExperimentConfig};
use crate::data::image::ImageView;
use crate::data::sample::PretrainSample;
use crate::decoders::{CsmHead, CsrDecoder, CssDecoder};
use crate::encoder::{EncoderSpec, VisionEncoder, ENCODER_PREFIX};
use crate::error::{Result, SaipError};
use crate::expert::{expert_name, to_expert_names, ExpertState, ADAPTER_PREFIX, CSM_PREFIX};
use crate::losses::{csm_loss_graph, csr_loss_graph, csr_support, css_loss_graph, mask_target, LossReport};
use crate::nn::Linear;
use crate::params::{Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Module descriptors for the student, the expert and the task heads.
#[derive(Clone, Debug)]
pub struct SaipModel {
    pub config: ExperimentConfig,
    pub encoder: VisionEncoder,
    pub expert_encoder: VisionEncoder,
    pub csm: CsmHead,
    /// The expert's copy of the matching head, bound to expert names.
    pub expert_csm: CsmHead,
    pub csr: CsrDecoder,
    pub css: CssDecoder,
    pub adapter: Option<Linear>,
}

/// Loss values, the graph root and the teacher-side logits of one sample.
#[derive(Debug)]
pub struct SampleForward<T> {
    pub loss: Var,
    pub report: LossReport,
    pub teacher_logits: Tensor<T>,
}

impl SaipModel {
    /// `expert_spec` is the external expert's architecture, if any; the EMA
    /// expert mirrors the student.
    pub fn new(config: &ExperimentConfig, expert_spec: Option<EncoderSpec>) -> Result<Self> {
        config.validate()?;
        let spec = EncoderSpec::from_config(config);
        let d = spec.embed_dim;
        let expert_spec = expert_spec.unwrap_or_else(|| spec.clone());
        let adapter = (expert_spec.embed_dim != d).then(|| Linear::new(ADAPTER_PREFIX, expert_spec.embed_dim, d));
        Ok(SaipModel {
            config: config.clone(),
            encoder: VisionEncoder::new(spec)?,
            expert_encoder: VisionEncoder::with_prefix(expert_spec, &expert_name(ENCODER_PREFIX))?,
            csm: CsmHead::from_config(config),
            expert_csm: CsmHead::new(
                &expert_name("csm"),
                d,
                config.csm.hidden_dim,
                config.csm.latent_dim,
                config.csm.prototypes,
            ),
            csr: CsrDecoder::new(d, d, config),
            css: CssDecoder::new(d, d, config),
            adapter,
        })
    }

    pub fn init_student<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, rng);
        self.csm.init(&mut store, rng);
        self.csr.init(&mut store, rng);
        self.css.init(&mut store, rng);
        if let Some(a) = &self.adapter {
            a.init(&mut store, rng);
        }
        store
    }

    /// Expert state for a freshly initialised student. In external mode
    /// `external` holds the loaded frozen encoder; the matching head is
    /// copied from the student in both modes.
    pub fn init_expert<T: Scalar>(
        &self,
        student: &ParamStore<T>,
        external: Option<ExpertState<T>>,
    ) -> ExpertState<T> {
        let m = self.config.ema.momentum_start;
        match external {
            None => ExpertState::ema_from_student(student, self.encoder.spec.clone(), m),
            Some(mut e) => {
                e.params.extend(to_expert_names(&student.subset(CSM_PREFIX)));
                e
            }
        }
    }

    /// Expert tokens mapped to the student width.
    fn adapt<T: Scalar>(&self, g: &mut Graph<T>, s: &mut Binder<T>, x: Var) -> Var {
        match &self.adapter {
            Some(a) => a.forward(g, s, x),
            None => x,
        }
    }

    fn expert_image<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &mut Binder<T>,
        e: &mut Binder<T>,
        image: &ImageView<T>,
    ) -> Result<(Var, Var)> {
        let t = self.expert_encoder.forward_image(g, e, image, false)?;
        Ok((self.adapt(g, s, t.image_token), self.adapt(g, s, t.patch_tokens)))
    }

    /// Teacher logits from expert summary tokens; values only.
    fn teacher_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &mut Binder<T>,
        e: &mut Binder<T>,
        views: &[&ImageView<T>],
    ) -> Result<Tensor<T>> {
        let mut tokens = Vec::with_capacity(views.len());
        for v in views {
            let (f, _) = self.expert_image(g, s, e, v)?;
            tokens.push(g.detach(f));
        }
        let stacked = g.concat_rows(&tokens);
        let (_, logits) = self.expert_csm.forward(g, e, stacked);
        Ok(g.value(logits).clone())
    }

    /// Per-instance mask predictions over the composite grid. `scaled` holds
    /// the student's patch tokens of each scaled view.
    fn css_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &mut Binder<T>,
        e: &mut Binder<T>,
        sample: &PretrainSample<T>,
        scaled: &[Var],
    ) -> Result<Vec<Var>> {
        let swapped = self.config.decoder.roles == DecoderRoles::Swapped;
        let keys = if swapped {
            self.encoder.forward_image(g, s, &sample.composite, false)?.patch_tokens
        } else {
            self.expert_image(g, s, e, &sample.composite)?.1
        };
        let mut preds = Vec::with_capacity(scaled.len());
        for (t, view) in sample.scaled.iter().enumerate() {
            let q = if swapped { self.expert_image(g, s, e, view)?.1 } else { scaled[t] };
            preds.push(self.css.forward(g, s, q, keys)?);
        }
        Ok(preds)
    }

    /// Mask probabilities (`Lc × 1`) for each instance of a sample.
    pub fn css_predictions<T: Scalar>(
        &self,
        student: &ParamStore<T>,
        expert: &ParamStore<T>,
        sample: &PretrainSample<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let mut s = Binder::frozen(student);
        let mut e = Binder::frozen(expert);
        let mut scaled = Vec::with_capacity(sample.scaled.len());
        for v in &sample.scaled {
            scaled.push(self.encoder.forward_image(&mut g, &mut s, v, false)?.patch_tokens);
        }
        let preds = self.css_forward(&mut g, &mut s, &mut e, sample, &scaled)?;
        Ok(preds.iter().map(|&p| g.value(p).clone()).collect())
    }

    /// Builds the weighted objective for one sample on `g`.
    pub fn forward_sample<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &mut Binder<T>,
        e: &mut Binder<T>,
        sample: &PretrainSample<T>,
        center: &Tensor<T>,
    ) -> Result<SampleForward<T>> {
        let cfg = &self.config;
        let n = sample.scaled.len();
        if n == 0 || sample.masks.len() != n {
            return Err(SaipError::Invalid(format!(
                "sample has {n} scaled views and {} masks",
                sample.masks.len()
            )));
        }
        let swapped = cfg.decoder.roles == DecoderRoles::Swapped;
        let anchor = self.encoder.forward_image(g, s, &sample.anchor, false)?;
        let mut scaled = Vec::with_capacity(n);
        for v in &sample.scaled {
            scaled.push(self.encoder.forward_image(g, s, v, false)?);
        }

        let views: Vec<&ImageView<T>> = sample.scaled.iter().collect();
        let (student_tokens, teacher_logits) = match cfg.csm.direction {
            CsmDirection::TeacherTargets => {
                (anchor.image_token, self.teacher_logits(g, s, e, &views)?)
            }
            CsmDirection::AnchorTargets => {
                let tokens: Vec<Var> = scaled.iter().map(|t| t.image_token).collect();
                (g.concat_rows(&tokens), self.teacher_logits(g, s, e, &[&sample.anchor])?)
            }
        };
        let (_, student_logits) = self.csm.forward(g, s, student_tokens);
        let l_csm = csm_loss_graph(g, student_logits, &teacher_logits, center, &cfg.csm)?;

        let masked = &sample.masked;
        let (queries, memory) = if swapped {
            let q = self.encoder.forward_visible(g, s, masked)?.patch_tokens;
            let (_, m) = self.expert_image(g, s, e, &sample.anchor)?;
            (q, m)
        } else {
            let q = self.expert_encoder.forward_visible(g, e, masked)?.patch_tokens;
            (self.adapt(g, s, q), anchor.patch_tokens)
        };
        let pred = self
            .csr
            .forward(g, s, queries, &masked.visible_indices, &masked.mask_map, memory)?;
        let target = masked.base.patchify(cfg.patch_size)?;
        let support = csr_support(&masked.mask_map, cfg.loss.csr_support);
        let l_csr = csr_loss_graph(g, pred, &target, &support)?;

        let scaled_tokens: Vec<Var> = scaled.iter().map(|t| t.patch_tokens).collect();
        let preds = self.css_forward(g, s, e, sample, &scaled_tokens)?;
        let targets: Vec<Tensor<T>> = sample.masks.iter().map(mask_target).collect();
        let l_css = css_loss_graph(g, &preds, &targets)?;

        let w = &cfg.loss;
        let parts = [(l_csm, w.csm_weight), (l_csr, w.csr_weight), (l_css, w.css_weight)];
        let weighted: Vec<Var> = parts.iter().map(|&(l, wt)| g.scale(l, T::lit(wt))).collect();
        let sum = g.concat_rows(&weighted);
        let loss = g.sum(sum);
        let report = LossReport::new(
            g.value(l_csm).item().as_f64(),
            g.value(l_csr).item().as_f64(),
            g.value(l_css).item().as_f64(),
            w,
        );
        Ok(SampleForward {
            loss,
            report,
            teacher_logits,
        })
    }

    /// Loss report, student gradients and teacher logits for one sample.
    pub fn sample_gradients<T: Scalar>(
        &self,
        student: &ParamStore<T>,
        expert: &ParamStore<T>,
        sample: &PretrainSample<T>,
        center: &Tensor<T>,
    ) -> Result<(LossReport, BTreeMap<String, Tensor<T>>, Tensor<T>)> {
        let mut g = Graph::new();
        let mut s = Binder::trainable(student);
        let mut e = Binder::frozen(expert);
        let out = self.forward_sample(&mut g, &mut s, &mut e, sample, center)?;
        let grads = g.backward(out.loss);
        Ok((out.report, s.collect_grads(&grads), out.teacher_logits))
    }

    /// Forward-only loss report for one sample.
    pub fn sample_loss<T: Scalar>(
        &self,
        student: &ParamStore<T>,
        expert: &ParamStore<T>,
        sample: &PretrainSample<T>,
        center: &Tensor<T>,
    ) -> Result<LossReport> {
        let mut g = Graph::new();
        let mut s = Binder::frozen(student);
        let mut e = Binder::frozen(expert);
        Ok(self.forward_sample(&mut g, &mut s, &mut e, sample, center)?.report)
    }

    /// Unit-norm matching latents of the student for each image, one row
    /// per image.
    pub fn latents<T: Scalar>(&self, student: &ParamStore<T>, images: &[ImageView<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut s = Binder::frozen(student);
        let mut tokens = Vec::with_capacity(images.len());
        for img in images {
            tokens.push(self.encoder.forward_image(&mut g, &mut s, img, false)?.image_token);
        }
        let stacked = g.concat_rows(&tokens);
        let (latent, _) = self.csm.forward(&mut g, &mut s, stacked);
        Ok(g.value(latent).clone())
    }
}
