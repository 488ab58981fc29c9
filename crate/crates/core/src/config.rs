//! Experiment configuration: a TOML document with dotted nesting, every
//! field defaulted, plus `key=value` overrides applied after the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SaipError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertMode {
    /// Expert is an exponential moving average of the student.
    Ema,
    /// Expert is a frozen, externally pretrained encoder.
    External,
}

/// Which encoder produces which operand of the pixel decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderRoles {
    /// Expert encodes the masked view (reconstruction queries) and the
    /// composite (search keys); student encodes the anchor and scaled views.
    AsWritten,
    /// Student and expert exchange those operands.
    Swapped,
}

/// Direction of the cross-entropy in the matching objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsmDirection {
    /// Expert distributions on scaled views are targets, the student's
    /// anchor distribution is the prediction.
    TeacherTargets,
    /// The student's anchor distribution is the target, expert scaled-view
    /// distributions are predictions.
    AnchorTargets,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsrSupport {
    Masked,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Allow grids other than the anchor grid by interpolating positions.
    pub interpolate_pos: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 192,
            depth: 12,
            heads: 3,
            mlp_ratio: 4,
            interpolate_pos: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsmConfig {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub prototypes: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    pub direction: CsmDirection,
}

impl Default for CsmConfig {
    fn default() -> Self {
        CsmConfig {
            hidden_dim: 2048,
            latent_dim: 256,
            prototypes: 65536,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
            direction: CsmDirection::TeacherTargets,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PixelDecoderConfig {
    /// Decoder width; `None` uses the encoder width.
    pub width: Option<usize>,
    /// Attention heads; `None` uses the encoder head count.
    pub heads: Option<usize>,
    pub mlp_ratio: usize,
    pub csr_blocks: usize,
    pub css_blocks: usize,
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub roles: DecoderRoles,
}

impl Default for PixelDecoderConfig {
    fn default() -> Self {
        PixelDecoderConfig {
            width: None,
            heads: None,
            mlp_ratio: 4,
            csr_blocks: 6,
            css_blocks: 2,
            conv_layers: 4,
            conv_channels: 64,
            roles: DecoderRoles::AsWritten,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 2.5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_epochs: 10,
            schedule: Schedule::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub csm_weight: f64,
    pub csr_weight: f64,
    pub css_weight: f64,
    pub csr_support: CsrSupport,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            csm_weight: 1.0,
            csr_weight: 1.0,
            css_weight: 1.0,
            csr_support: CsrSupport::Masked,
        }
    }
}

/// Expert momentum follows a cosine ramp from `momentum_start` to
/// `momentum_end` over the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    pub momentum_start: f64,
    pub momentum_end: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig {
            momentum_start: 0.996,
            momentum_end: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus_path: PathBuf,
    /// (height, width) in pixels.
    pub anchor_hw: [usize; 2],
    pub composite_hw: [usize; 2],
    pub num_scaled_views: usize,
    pub scale_range: [f64; 2],
    pub mask_ratio: f64,
    pub patch_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub expert_mode: ExpertMode,
    pub external_expert_path: Option<PathBuf>,
    /// Longest instance side in a composite, as a fraction of the shorter
    /// canvas side.
    pub instance_fit: f64,
    pub placement_retries: usize,
    pub photometric_jitter: bool,
    /// Serial, fixed-order execution; reproducible bit-for-bit.
    pub deterministic: bool,
    /// Checkpoint period in optimizer steps; 0 saves at epoch ends only.
    pub checkpoint_every: u64,
    pub run_name: Option<String>,
    pub encoder: EncoderConfig,
    pub csm: CsmConfig,
    pub decoder: PixelDecoderConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub ema: EmaConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus_path: PathBuf::from("data/crops"),
            anchor_hw: [256, 128],
            composite_hw: [224, 224],
            num_scaled_views: 2,
            scale_range: [0.75, 1.5],
            mask_ratio: 0.75,
            patch_size: 16,
            epochs: 300,
            batch_size: 64,
            seed: 0,
            expert_mode: ExpertMode::Ema,
            external_expert_path: None,
            instance_fit: 0.6,
            placement_retries: 100,
            photometric_jitter: false,
            deterministic: true,
            checkpoint_every: 0,
            run_name: None,
            encoder: EncoderConfig::default(),
            csm: CsmConfig::default(),
            decoder: PixelDecoderConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            ema: EmaConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Checks every invariant, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        fn err(field: &str, reason: impl Into<String>) -> SaipError {
            SaipError::config(field, reason)
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(err(
                "scale_range",
                format!("need 0 < low <= high, got ({lo}, {hi})"),
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(err("mask_ratio", format!("{} not in [0, 1)", self.mask_ratio)));
        }
        if self.patch_size == 0 {
            return Err(err("patch_size", "must be positive"));
        }
        for (field, hw) in [("anchor_hw", self.anchor_hw), ("composite_hw", self.composite_hw)] {
            if hw[0] == 0 || hw[1] == 0 || hw[0] % self.patch_size != 0 || hw[1] % self.patch_size != 0 {
                return Err(err(
                    field,
                    format!("{}x{} is not a positive multiple of patch size {}", hw[0], hw[1], self.patch_size),
                ));
            }
        }
        if !self.encoder.interpolate_pos {
            if self.composite_hw != self.anchor_hw {
                return Err(err(
                    "encoder.interpolate_pos",
                    "composites off the anchor grid need positional interpolation",
                ));
            }
            if self.scale_range != [1.0, 1.0] {
                return Err(err(
                    "encoder.interpolate_pos",
                    "rescaled views need positional interpolation; set scale_range = [1.0, 1.0]",
                ));
            }
        }
        if self.seed > i64::MAX as u64 {
            return Err(err("seed", "must fit in a signed 64-bit integer"));
        }
        if self.num_scaled_views == 0 {
            return Err(err("num_scaled_views", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(err("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(err("batch_size", "must be positive"));
        }
        if !(self.instance_fit > 0.0 && self.instance_fit <= 1.0) {
            return Err(err("instance_fit", "must lie in (0, 1]"));
        }
        if self.placement_retries == 0 {
            return Err(err("placement_retries", "must be positive"));
        }
        if self.expert_mode == ExpertMode::External {
            match &self.external_expert_path {
                None => {
                    return Err(err(
                        "external_expert_path",
                        "required when expert_mode = \"external\"",
                    ))
                }
                Some(p) if !p.exists() => {
                    return Err(err(
                        "external_expert_path",
                        format!("{} does not exist", p.display()),
                    ))
                }
                _ => {}
            }
        }

        let e = &self.encoder;
        if e.embed_dim == 0 || e.depth == 0 || e.heads == 0 || e.mlp_ratio == 0 {
            return Err(err("encoder", "dimensions must be positive"));
        }
        if !e.embed_dim.is_multiple_of(e.heads) {
            return Err(err(
                "encoder.heads",
                format!("embed_dim {} not divisible by {} heads", e.embed_dim, e.heads),
            ));
        }

        let c = &self.csm;
        if c.prototypes < 2 {
            return Err(err("csm.prototypes", "need at least 2 prototypes"));
        }
        if c.hidden_dim == 0 || c.latent_dim == 0 {
            return Err(err("csm", "dimensions must be positive"));
        }
        if !(c.teacher_temp > 0.0 && c.teacher_temp <= c.student_temp) {
            return Err(err(
                "csm.teacher_temp",
                format!("need 0 < teacher_temp <= student_temp, got {} / {}", c.teacher_temp, c.student_temp),
            ));
        }
        if !(0.0..1.0).contains(&c.center_momentum) {
            return Err(err("csm.center_momentum", "must lie in [0, 1)"));
        }

        let d = &self.decoder;
        let width = self.decoder_width();
        let heads = self.decoder_heads();
        if width == 0 || heads == 0 || !width.is_multiple_of(heads) {
            return Err(err(
                "decoder.width",
                format!("width {width} not divisible by {heads} heads"),
            ));
        }
        if d.csr_blocks == 0 || d.css_blocks == 0 || d.conv_channels == 0 || d.mlp_ratio == 0 {
            return Err(err("decoder", "block counts and channels must be positive"));
        }

        let o = &self.optimizer;
        if !(o.base_lr > 0.0 && o.base_lr.is_finite()) {
            return Err(err("optimizer.base_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(err("optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(err("optimizer.beta2", "must lie in [0, 1)"));
        }
        if o.weight_decay < 0.0 {
            return Err(err("optimizer.weight_decay", "must be non-negative"));
        }
        if o.eps <= 0.0 {
            return Err(err("optimizer.eps", "must be positive"));
        }
        if o.warmup_epochs >= self.epochs {
            return Err(err(
                "optimizer.warmup_epochs",
                format!("{} must be less than epochs ({})", o.warmup_epochs, self.epochs),
            ));
        }

        let m = &self.ema;
        if !(0.0 <= m.momentum_start && m.momentum_start <= m.momentum_end && m.momentum_end <= 1.0) {
            return Err(err("ema", "need 0 <= momentum_start <= momentum_end <= 1"));
        }
        let l = &self.loss;
        if [l.csm_weight, l.csr_weight, l.css_weight].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(err("loss", "weights must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn decoder_width(&self) -> usize {
        self.decoder.width.unwrap_or(self.encoder.embed_dim)
    }

    pub fn decoder_heads(&self) -> usize {
        self.decoder.heads.unwrap_or(self.encoder.heads)
    }

    /// Token grid of the anchor (and every scaled view).
    pub fn anchor_grid(&self) -> (usize, usize) {
        (self.anchor_hw[0] / self.patch_size, self.anchor_hw[1] / self.patch_size)
    }

    pub fn composite_grid(&self) -> (usize, usize) {
        (
            self.composite_hw[0] / self.patch_size,
            self.composite_hw[1] / self.patch_size,
        )
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| SaipError::ConfigParse {
            path: PathBuf::from("<string>"),
            reason: e.to_string(),
        })?;
        from_table(table, Path::new("<string>"))
    }

    /// Stable digest of the canonical serialisation, used to guard resumes.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn from_table(table: toml::Table, path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| SaipError::ConfigParse {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses one `dotted.key=value` override. The value is read as a TOML
/// value when possible (`0.5`, `true`, `[1, 2]`, `"x"`), tuple syntax
/// `(a,b)` is accepted for arrays, and anything else is taken as a bare
/// string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| SaipError::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(SaipError::config(spec, "empty override key"));
    }
    let raw = raw.trim();
    let normalised = if raw.starts_with('(') && raw.ends_with(')') {
        format!("[{}]", &raw[1..raw.len() - 1])
    } else {
        raw.to_string()
    };
    let value = match format!("v = {normalised}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| SaipError::config(path.join("."), format!("`{part}` is not a table")))?;
    }
    cursor.insert(last.clone(), value);
    Ok(())
}

/// Reads `file_path`, applies `overrides` in order, fills defaults and
/// validates.
pub fn parse_config(file_path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(file_path).map_err(|e| SaipError::io(file_path, e))?;
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| SaipError::ConfigParse {
        path: file_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for spec in overrides {
        let (path, value) = parse_override(spec)?;
        apply_override(&mut table, &path, value)?;
    }
    from_table(table, file_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_yields_defaults() {
        let f = write_tmp("");
        let cfg = parse_config(f.path(), &[]).unwrap();
        assert_eq!(cfg.optimizer.base_lr, 2.5e-4);
        assert_eq!(cfg.optimizer.warmup_epochs, 10);
        assert_eq!(cfg.optimizer.weight_decay, 0.05);
        assert_eq!((cfg.optimizer.beta1, cfg.optimizer.beta2), (0.9, 0.95));
        assert_eq!(cfg.scale_range, [0.75, 1.5]);
        assert_eq!(cfg.mask_ratio, 0.75);
        assert_eq!(cfg.anchor_hw, [256, 128]);
        assert_eq!(cfg.composite_hw, [224, 224]);
        assert_eq!(cfg.num_scaled_views, 2);
        assert_eq!(cfg.encoder.embed_dim, 192);
        assert_eq!(cfg.csm.prototypes, 65536);
        assert_eq!(cfg.csm.latent_dim, 256);
    }

    #[test]
    fn override_mask_ratio_zero() {
        let f = write_tmp("");
        let cfg = parse_config(f.path(), &["mask_ratio=0".into()]).unwrap();
        assert_eq!(cfg.mask_ratio, 0.0);
    }

    #[test]
    fn inverted_scale_range_names_field() {
        let f = write_tmp("");
        let e = parse_config(f.path(), &["scale_range=(1.5,0.75)".into()]).unwrap_err();
        match e {
            SaipError::Config { field, .. } => assert_eq!(field, "scale_range"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn dotted_overrides_reach_nested_tables() {
        let f = write_tmp("[optimizer]\nbase_lr = 1e-3\n");
        let cfg = parse_config(
            f.path(),
            &["optimizer.warmup_epochs=2".into(), "encoder.depth=3".into(), "run_name=abc".into()],
        )
        .unwrap();
        assert_eq!(cfg.optimizer.base_lr, 1e-3);
        assert_eq!(cfg.optimizer.warmup_epochs, 2);
        assert_eq!(cfg.encoder.depth, 3);
        assert_eq!(cfg.run_name.as_deref(), Some("abc"));
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = parse_config(Path::new("/definitely/not/here.toml"), &[]).unwrap_err();
        assert!(matches!(e, SaipError::Io { .. }));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let f = write_tmp("mask_ration = 0.5\n");
        assert!(matches!(
            parse_config(f.path(), &[]),
            Err(SaipError::ConfigParse { .. })
        ));
    }

    #[test]
    fn invariant_violations() {
        let f = write_tmp("");
        for (ov, field) in [
            ("mask_ratio=1.0", "mask_ratio"),
            ("anchor_hw=[250,128]", "anchor_hw"),
            ("encoder.heads=5", "encoder.heads"),
            ("optimizer.warmup_epochs=300", "optimizer.warmup_epochs"),
            ("optimizer.base_lr=0", "optimizer.base_lr"),
            ("optimizer.beta2=1.0", "optimizer.beta2"),
            ("csm.teacher_temp=0.5", "csm.teacher_temp"),
            ("csm.prototypes=1", "csm.prototypes"),
            ("expert_mode=external", "external_expert_path"),
        ] {
            match parse_config(f.path(), &[ov.to_string()]) {
                Err(SaipError::Config { field: got, .. }) => assert_eq!(got, field, "{ov}"),
                other => panic!("{ov}: expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 7;
        assert_ne!(a.hash(), b.hash());
    }

    proptest! {
        #[test]
        fn serialised_config_parses_back_equal(
            lo in 0.1f64..1.0,
            span in 0.0f64..1.0,
            ratio in 0.0f64..0.99,
            seed in 0..=i64::MAX as u64,
            views in 1usize..5,
            patch in prop::sample::select(vec![4usize, 8, 16]),
            gh in 1usize..8,
            gw in 1usize..8,
            depth in 1usize..4,
            jitter in any::<bool>(),
            name in proptest::option::of("[a-z]{1,8}"),
        ) {
            let mut cfg = ExperimentConfig::default();
            cfg.scale_range = [lo, lo + span];
            cfg.mask_ratio = ratio;
            cfg.seed = seed;
            cfg.num_scaled_views = views;
            cfg.patch_size = patch;
            cfg.anchor_hw = [gh * patch, gw * patch];
            cfg.composite_hw = [gw * patch * 2, gh * patch * 2];
            cfg.encoder.depth = depth;
            cfg.photometric_jitter = jitter;
            cfg.run_name = name;
            cfg.validate().unwrap();
            let text = cfg.to_toml_string();
            let back = ExperimentConfig::from_toml_str(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_toml_string(), text);
        }
    }
}
