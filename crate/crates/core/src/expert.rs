//! The expert encoder: an EMA shadow of the student, or a frozen external
//! model whose matching head still tracks the student's.

use std::path::Path;

use crate::config::{ExperimentConfig, ExpertMode};
use crate::encoder::{load_encoder, EncoderSpec, ENCODER_PREFIX};
use crate::error::{Result, SaipError};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Name prefix of the student-side adapter from external tokens to `D`.
pub const ADAPTER_PREFIX: &str = "adapter";
/// Name prefix of the student's matching head.
pub const CSM_PREFIX: &str = "csm.";
/// Every expert parameter is named `expert.<student name>`.
pub const EXPERT_PREFIX: &str = "expert.";

pub fn expert_name(student_name: &str) -> String {
    format!("{EXPERT_PREFIX}{student_name}")
}

/// The student parameter an expert parameter shadows.
pub fn student_name(expert_name: &str) -> Option<&str> {
    expert_name.strip_prefix(EXPERT_PREFIX)
}

/// Copies of `store` entries under expert names.
pub fn to_expert_names<T: Scalar>(store: &ParamStore<T>) -> ParamStore<T> {
    store.iter().map(|(n, t)| (expert_name(n), t.clone())).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertState<T> {
    pub mode: ExpertMode,
    pub params: ParamStore<T>,
    /// Momentum used by the most recent update.
    pub momentum: f64,
    pub spec: EncoderSpec,
    /// `(external dim, D)` when an adapter is needed.
    pub adapter: Option<(usize, usize)>,
}

impl<T: Scalar> ExpertState<T> {
    /// EMA expert initialised as an exact copy of the student's encoder and
    /// matching head.
    pub fn ema_from_student(student: &ParamStore<T>, spec: EncoderSpec, momentum: f64) -> Self {
        let mut params = to_expert_names(&student.subset(&format!("{ENCODER_PREFIX}.")));
        params.extend(to_expert_names(&student.subset(CSM_PREFIX)));
        ExpertState {
            mode: ExpertMode::Ema,
            params,
            momentum,
            spec,
            adapter: None,
        }
    }

    /// Whether a parameter follows the student by EMA.
    pub fn tracks(&self, name: &str) -> bool {
        tracked(self.mode, name)
    }

    /// `p_e ← m·p_e + (1 − m)·p_s` for every tracked parameter.
    pub fn ema_update(&mut self, student: &ParamStore<T>, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(SaipError::Invalid(format!("momentum {m} outside [0, 1]")));
        }
        let mode = self.mode;
        let keep = T::lit(m);
        let take = T::lit(1.0 - m);
        for (name, pe) in self.params.iter_mut() {
            if !tracked(mode, name) {
                continue;
            }
            let ps = student_name(name)
                .and_then(|n| student.get(n))
                .ok_or_else(|| SaipError::Parameter {
                    name: name.clone(),
                    reason: "no matching student parameter".into(),
                })?;
            if ps.shape() != pe.shape() {
                return Err(SaipError::Parameter {
                    name: name.clone(),
                    reason: format!("expert {:?} vs student {:?}", pe.shape(), ps.shape()),
                });
            }
            for (e, &s) in pe.data_mut().iter_mut().zip(ps.data()) {
                *e = keep * *e + take * s;
            }
        }
        self.momentum = m;
        Ok(())
    }
}

fn tracked(mode: ExpertMode, name: &str) -> bool {
    match mode {
        ExpertMode::Ema => true,
        ExpertMode::External => student_name(name).is_some_and(|n| n.starts_with(CSM_PREFIX)),
    }
}

/// Loads a frozen encoder exported by `export-encoder`. The patch size must
/// match the student's; an adapter is declared when widths differ.
pub fn load_external_expert<T: Scalar>(path: &Path, config: &ExperimentConfig) -> Result<ExpertState<T>> {
    let (spec, params) = load_encoder::<T>(path)?;
    let params = to_expert_names(&params);
    if spec.patch_size != config.patch_size {
        return Err(SaipError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!(
                "expert patch size {} differs from student patch size {}",
                spec.patch_size, config.patch_size
            ),
        });
    }
    let d = config.encoder.embed_dim;
    let adapter = (spec.embed_dim != d).then_some((spec.embed_dim, d));
    Ok(ExpertState {
        mode: ExpertMode::External,
        params,
        momentum: 1.0,
        spec,
        adapter,
    })
}
