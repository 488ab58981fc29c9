//! Training state, the optimisation step and checkpointing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::config::{ExperimentConfig, ExpertMode};
use crate::data::corpus::Corpus;
use crate::data::sample::{build_sample_from_anchor, sample_rng, PretrainSample};
use crate::encoder::EncoderSpec;
use crate::error::{Result, SaipError};
use crate::expert::{load_external_expert, ExpertState};
use crate::losses::{update_center, LossReport};
use crate::model::SaipModel;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::run::{MetricsRecord, RunDir};
use crate::scalar::Scalar;
use crate::schedule::{ema_momentum_at, lr_at, steps_per_epoch};
use crate::tensor::Tensor;

pub const STATE_KIND: &str = "train_state";

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub student: ParamStore<T>,
    pub expert: ExpertState<T>,
    /// `1 × K` running mean of teacher logits.
    pub center: Tensor<T>,
    pub optimizer: AdamW<T>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub epoch: u64,
    /// Draws the per-epoch visiting order.
    pub rng: ChaCha8Rng,
    pub epoch_order: Vec<usize>,
}

impl<T: Scalar> TrainState<T> {
    pub fn init(model: &SaipModel, external: Option<ExpertState<T>>) -> Self {
        let cfg = &model.config;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let student = model.init_student::<T, _>(&mut init_rng);
        let expert = model.init_expert(&student, external);
        TrainState {
            optimizer: AdamW::new(&student),
            center: Tensor::zeros(1, cfg.csm.prototypes),
            student,
            expert,
            step: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F0F_EB0C_0000),
            epoch_order: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    RngState {
        seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState, path: &Path) -> Result<ChaCha8Rng> {
    let bad = |reason: &str| SaipError::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("rng state: {reason}"),
    };
    if s.seed.len() != 64 {
        return Err(bad("seed must be 32 bytes"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed is not hex"))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos.parse::<u128>().map_err(|_| bad("bad word position"))?);
    Ok(rng)
}

/// Serialises a training state with the config that produced it.
pub fn state_archive<T: Scalar>(config: &ExperimentConfig, state: &TrainState<T>) -> Archive<T> {
    let mut a = Archive::default();
    a.set_meta("kind", &STATE_KIND);
    a.set_meta("config", &config.to_toml_string());
    a.set_meta("config_hash", &config.hash());
    a.set_meta("step", &state.step);
    a.set_meta("epoch", &state.epoch);
    a.set_meta("rng", &rng_state(&state.rng));
    a.set_meta("epoch_order", &state.epoch_order);
    a.set_meta("expert_mode", &state.expert.mode);
    a.set_meta("expert_momentum", &state.expert.momentum);
    a.set_meta("expert_spec", &state.expert.spec);
    a.set_meta("adapter", &state.expert.adapter);
    a.insert_group("student", state.student.iter());
    a.insert_group("expert", state.expert.params.iter());
    a.insert_group("adam_m", state.optimizer.m.iter());
    a.insert_group("adam_v", state.optimizer.v.iter());
    a.tensors.insert("center".into(), state.center.clone());
    a
}

pub fn save_checkpoint<T: Scalar>(config: &ExperimentConfig, state: &TrainState<T>, path: &Path) -> Result<()> {
    state_archive(config, state).save(path)
}

/// Reads a training checkpoint back into the config it was written with
/// and an exact copy of the state.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ExperimentConfig, TrainState<T>)> {
    let a = Archive::<T>::load(path)?;
    let kind: String = a.meta("kind", path)?;
    if kind != STATE_KIND {
        return Err(SaipError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected a training checkpoint, found kind `{kind}`"),
        });
    }
    let text: String = a.meta("config", path)?;
    let config = ExperimentConfig::from_toml_str(&text)?;
    let stored_hash: String = a.meta("config_hash", path)?;
    if stored_hash != config.hash() {
        return Err(SaipError::Checkpoint {
            path: path.to_path_buf(),
            reason: "embedded config does not match its recorded hash".into(),
        });
    }
    let center = a.tensors.get("center").cloned().ok_or_else(|| SaipError::Checkpoint {
        path: path.to_path_buf(),
        reason: "missing center".into(),
    })?;
    let group = |name: &str| -> ParamStore<T> { a.group(name).into_iter().collect() };
    let expert = ExpertState {
        mode: a.meta::<ExpertMode>("expert_mode", path)?,
        params: group("expert"),
        momentum: a.meta("expert_momentum", path)?,
        spec: a.meta::<EncoderSpec>("expert_spec", path)?,
        adapter: a.meta("adapter", path)?,
    };
    let state = TrainState {
        student: group("student"),
        expert,
        center,
        optimizer: AdamW {
            m: group("adam_m"),
            v: group("adam_v"),
        },
        step: a.meta("step", path)?,
        epoch: a.meta("epoch", path)?,
        rng: restore_rng(&a.meta("rng", path)?, path)?,
        epoch_order: a.meta("epoch_order", path)?,
    };
    Ok((config, state))
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    step: u64,
    lr: f64,
    report: &'a LossReport,
    non_finite_gradients: Vec<&'a str>,
    non_finite_parameters: Vec<&'a str>,
}

pub struct Trainer<T> {
    pub model: SaipModel,
    pub state: TrainState<T>,
    pub corpus: Corpus<T>,
    pub run: Option<RunDir>,
    /// Replaces the scheduled learning rate when set.
    pub lr_override: Option<f64>,
    steps_per_epoch: u64,
    total_steps: u64,
    warmup_steps: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &ExperimentConfig, corpus: Corpus<T>) -> Result<Self> {
        let external = match config.expert_mode {
            ExpertMode::Ema => None,
            ExpertMode::External => {
                let path = config
                    .external_expert_path
                    .as_ref()
                    .ok_or_else(|| SaipError::config("external_expert_path", "required in external mode"))?;
                Some(load_external_expert::<T>(path, config)?)
            }
        };
        let model = SaipModel::new(config, external.as_ref().map(|e| e.spec.clone()))?;
        let state = TrainState::init(&model, external);
        Ok(Self::assemble(model, state, corpus))
    }

    /// Continues from a checkpoint. The checkpoint's config must hash to
    /// `config`'s unless `allow_config_mismatch` is set, in which case the
    /// current config is used.
    pub fn resume(
        config: &ExperimentConfig,
        corpus: Corpus<T>,
        path: &Path,
        allow_config_mismatch: bool,
    ) -> Result<Self> {
        let (saved, state) = load_checkpoint::<T>(path)?;
        let (expected, found) = (config.hash(), saved.hash());
        if expected != found {
            if !allow_config_mismatch {
                return Err(SaipError::ConfigHashMismatch { expected, found });
            }
            warn!("resuming {} under a different config ({found} -> {expected})", path.display());
        }
        let model = SaipModel::new(config, Some(state.expert.spec.clone()))?;
        Ok(Self::assemble(model, state, corpus))
    }

    fn assemble(model: SaipModel, state: TrainState<T>, corpus: Corpus<T>) -> Self {
        let cfg = &model.config;
        let spe = steps_per_epoch(corpus.len(), cfg.batch_size);
        Trainer {
            steps_per_epoch: spe,
            total_steps: spe * cfg.epochs as u64,
            warmup_steps: spe * cfg.optimizer.warmup_epochs as u64,
            model,
            state,
            corpus,
            run: None,
            lr_override: None,
        }
    }

    pub fn with_run_dir(mut self, run: RunDir) -> Self {
        self.run = Some(run);
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.model.config
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.total_steps
    }

    pub fn lr(&self) -> f64 {
        self.lr_override.unwrap_or_else(|| {
            lr_at(
                self.state.step,
                &self.model.config.optimizer,
                self.warmup_steps,
                self.total_steps,
            )
        })
    }

    pub fn ema_momentum(&self) -> f64 {
        ema_momentum_at(self.state.step, &self.model.config.ema, self.total_steps)
    }

    /// Builds the batch for the current step, drawing a fresh visiting order
    /// at the start of each epoch.
    pub fn next_batch(&mut self) -> Result<Vec<PretrainSample<T>>> {
        let cfg = &self.model.config;
        let n = self.corpus.len();
        let pos = self.state.step % self.steps_per_epoch;
        if pos == 0 || self.state.epoch_order.len() != n {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.state.rng);
            self.state.epoch_order = order;
        }
        let start = pos as usize * cfg.batch_size;
        let end = (start + cfg.batch_size).min(n);
        let first_ordinal = self.state.step * cfg.batch_size as u64;
        let jobs: Vec<(u64, usize)> = (start..end)
            .enumerate()
            .map(|(i, slot)| (first_ordinal + i as u64, self.state.epoch_order[slot]))
            .collect();
        let build = |&(ordinal, src): &(u64, usize)| {
            build_sample_from_anchor(&self.corpus.anchors[src], cfg, &mut sample_rng(cfg.seed, ordinal))
        };
        if cfg.deterministic {
            jobs.iter().map(build).collect()
        } else {
            jobs.par_iter().map(build).collect()
        }
    }

    /// One optimisation step on `batch`: averaged gradients, AdamW, expert
    /// EMA and center update.
    pub fn train_step(&mut self, batch: &[PretrainSample<T>]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(SaipError::Invalid("empty batch".into()));
        }
        let lr = self.lr();
        let momentum = self.ema_momentum();
        let cfg = &self.model.config;
        let st = &self.state;
        let run = |s: &PretrainSample<T>| {
            self.model
                .sample_gradients(&st.student, &st.expert.params, s, &st.center)
        };
        let results: Vec<_> = if cfg.deterministic {
            batch.iter().map(run).collect::<Result<_>>()?
        } else {
            batch.par_iter().map(run).collect::<Result<_>>()?
        };

        let inv = T::one() / T::from_usize_lossy(results.len());
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut reports = Vec::with_capacity(results.len());
        let mut teacher_rows = Vec::new();
        for (report, g, teacher) in results {
            reports.push(report);
            teacher_rows.extend_from_slice(teacher.data());
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        for t in grads.values_mut() {
            t.scale_assign(inv);
        }
        let report = LossReport::mean(&reports);
        let bad_grads: Vec<&str> = grads
            .iter()
            .filter(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
            .collect();
        if !report.is_finite() || !bad_grads.is_empty() {
            let detail = self.write_diagnostic(lr, &report, bad_grads, Vec::new());
            return Err(SaipError::NonFinite {
                step: self.state.step,
                detail,
            });
        }

        let opt = self.model.config.optimizer.clone();
        let k = self.model.config.csm.prototypes;
        let center_momentum = self.model.config.csm.center_momentum;
        let step = self.state.step;
        self.state
            .optimizer
            .step(&mut self.state.student, &grads, &opt, lr, step + 1)?;
        let bad_params: Vec<String> = self
            .state
            .student
            .iter()
            .filter(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.clone())
            .collect();
        if !bad_params.is_empty() {
            let detail = self.write_diagnostic(lr, &report, Vec::new(), bad_params.iter().map(String::as_str).collect());
            return Err(SaipError::NonFinite { step, detail });
        }
        self.state.expert.ema_update(&self.state.student, momentum)?;
        let rows = teacher_rows.len() / k;
        let teacher = Tensor::from_vec(rows, k, teacher_rows)?;
        update_center(&mut self.state.center, &teacher, center_momentum);

        let epoch = step / self.steps_per_epoch;
        self.state.epoch = epoch;
        self.state.step = step + 1;
        if let Some(run) = &self.run {
            run.log_metrics(&MetricsRecord::new(step, epoch, &report, lr))?;
        }
        Ok(report)
    }

    fn write_diagnostic(&self, lr: f64, report: &LossReport, grads: Vec<&str>, params: Vec<&str>) -> String {
        let diag = Diagnostic {
            step: self.state.step,
            lr,
            report,
            non_finite_gradients: grads,
            non_finite_parameters: params,
        };
        let text = serde_json::to_string_pretty(&diag).expect("diagnostic serialises");
        let dir = self
            .run
            .as_ref()
            .map(|r| r.path.clone())
            .unwrap_or_else(std::env::temp_dir);
        let path = dir.join(format!("diagnostic_step{:08}.json", self.state.step));
        match std::fs::write(&path, &text) {
            Ok(()) => format!("snapshot written to {}", path.display()),
            Err(e) => format!("{text} (snapshot not written: {e})"),
        }
    }

    /// Builds the next batch and trains on it.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.next_batch()?;
        let report = self.train_step(&batch)?;
        let every = self.model.config.checkpoint_every;
        let at_epoch_end = self.state.step.is_multiple_of(self.steps_per_epoch);
        if self.run.is_some() && ((every > 0 && self.state.step.is_multiple_of(every)) || (every == 0 && at_epoch_end)) {
            self.checkpoint()?;
        }
        Ok(report)
    }

    /// Trains until the scheduled number of steps is reached.
    pub fn fit(&mut self) -> Result<Vec<LossReport>> {
        let mut reports = Vec::new();
        while !self.is_finished() {
            let r = self.step()?;
            if self.state.step.is_multiple_of(self.steps_per_epoch) {
                info!(
                    "epoch {} step {} total {:.5} (csm {:.5} csr {:.5} css {:.5})",
                    self.state.epoch, self.state.step, r.total, r.l_csm, r.l_csr, r.l_css
                );
            }
            reports.push(r);
        }
        Ok(reports)
    }

    /// Saves the state into the run directory (numbered and `last`).
    pub fn checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(run) = &self.run else {
            return Ok(None);
        };
        let archive = state_archive(&self.model.config, &self.state);
        let path = run.checkpoint_path(self.state.step);
        archive.save(&path)?;
        archive.save(&run.latest_checkpoint_path())?;
        Ok(Some(path))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.model.config, &self.state, path)
    }
}
