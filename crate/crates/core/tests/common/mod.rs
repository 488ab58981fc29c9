#![allow(dead_code)]

use std::path::Path;

use saip::config::parse_config;
use saip::data::image::ImageView;
use saip::data::toy::toy_person_set;
use saip::data::views::make_anchor;
use saip::{ExperimentConfig, Scalar};

pub fn config_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// The 32x32, patch 8, D=32, depth 2, K=16, N=2 configuration.
pub fn micro() -> ExperimentConfig {
    parse_config(&config_path("micro.toml"), &[]).expect("micro config parses")
}

pub fn with(mut cfg: ExperimentConfig, overrides: &[&str]) -> ExperimentConfig {
    let text = cfg.to_toml_string();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, text).unwrap();
    let owned: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    cfg = parse_config(&path, &owned).expect("overrides apply");
    cfg
}

/// Toy person crops rendered at 64x32 and anchored at the config size,
/// with their identity labels.
pub fn toy_anchors<T: Scalar>(
    identities: usize,
    per_identity: usize,
    seed: u64,
    anchor_hw: [usize; 2],
) -> (Vec<ImageView<T>>, Vec<usize>) {
    toy_person_set(identities, per_identity, [64, 32], seed)
        .into_iter()
        .enumerate()
        .map(|(i, (id, img))| (make_anchor(&img, anchor_hw, &format!("id{id}_{i}")), id))
        .unzip()
}
