mod common;

use saip::config::ExperimentConfig;
use saip::data::corpus::Corpus;
use saip::data::sample::{build_sample_from_anchor, read_sample_records, sample_rng, write_sample, SampleRecord};
use saip::run::{read_metrics, RunDir};
use saip::trainer::{load_checkpoint, Trainer};
use saip::{SaipError, Scalar};

fn short() -> ExperimentConfig {
    common::with(common::micro(), &["epochs=2", "batch_size=4", "optimizer.warmup_epochs=1"])
}

fn corpus<T: Scalar>(cfg: &ExperimentConfig) -> Corpus<T> {
    let (anchors, _) = common::toy_anchors::<T>(3, 2, 4, cfg.anchor_hw);
    Corpus::from_anchors(anchors).unwrap()
}

#[test]
fn resume_under_a_different_config_is_refused_unless_allowed() {
    let cfg = short();
    let dir = tempfile::tempdir().unwrap();
    let mut tr = Trainer::<f32>::new(&cfg, corpus(&cfg)).unwrap();
    tr.step().unwrap();
    let ck = dir.path().join("ck.saip");
    tr.save(&ck).unwrap();

    let other = common::with(cfg.clone(), &["loss.css_weight=0.5"]);
    match Trainer::<f32>::resume(&other, corpus(&other), &ck, false) {
        Err(SaipError::ConfigHashMismatch { expected, found }) => {
            assert_eq!(expected, other.hash());
            assert_eq!(found, cfg.hash());
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched config was accepted"),
    }
    let resumed = Trainer::<f32>::resume(&other, corpus(&other), &ck, true).unwrap();
    assert_eq!(resumed.state.step, 1);
    assert_eq!(resumed.config().loss.css_weight, 0.5);
}

#[test]
fn non_finite_parameters_stop_training_with_a_diagnostic() {
    let cfg = short();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path(), &cfg).unwrap();
    let mut tr = Trainer::<f32>::new(&cfg, corpus(&cfg)).unwrap().with_run_dir(run.clone());
    let name = tr.state.student.names().find(|n| n.starts_with("encoder.")).unwrap().clone();
    tr.state.student.get_mut(&name).unwrap().data_mut()[0] = f32::NAN;
    let err = tr.step().unwrap_err();
    assert!(matches!(err, SaipError::NonFinite { step: 0, .. }), "{err}");
    let diag = std::fs::read_to_string(run.path.join("diagnostic_step00000000.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&diag).unwrap();
    assert_eq!(v["step"], 0);
    assert_eq!(tr.state.step, 0);
}

#[test]
fn alternative_settings_train_to_finite_losses() {
    let variants: &[&[&str]] = &[
        &["decoder.roles=\"swapped\""],
        &["csm.direction=\"anchor_targets\""],
        &["loss.csr_support=\"all\""],
        &["photometric_jitter=true", "num_scaled_views=3"],
        &["encoder.interpolate_pos=false", "scale_range=[1.0,1.0]", "composite_hw=[32,32]"],
    ];
    for overrides in variants {
        let cfg = common::with(short(), overrides);
        let mut tr = Trainer::<f32>::new(&cfg, corpus(&cfg)).unwrap();
        for _ in 0..2 {
            let r = tr.step().unwrap_or_else(|e| panic!("{overrides:?}: {e}"));
            assert!(r.total.is_finite() && r.l_csm.is_finite(), "{overrides:?}: {r:?}");
        }
    }
}

#[test]
fn fixed_positions_require_anchor_sized_views() {
    let path = common::config_path("micro.toml");
    let err = saip::config::parse_config(&path, &["encoder.interpolate_pos=false".into()]).unwrap_err();
    assert!(matches!(&err, SaipError::Config { field, .. } if field == "encoder.interpolate_pos"), "{err}");
}

#[test]
fn double_precision_trainer_matches_single_precision_closely() {
    let cfg = short();
    let mut a = Trainer::<f32>::new(&cfg, corpus(&cfg)).unwrap();
    let mut b = Trainer::<f64>::new(&cfg, corpus(&cfg)).unwrap();
    for _ in 0..3 {
        let (ra, rb) = (a.step().unwrap(), b.step().unwrap());
        assert!((ra.total - rb.total).abs() < 1e-3 * rb.total.abs().max(1.0), "{ra:?} vs {rb:?}");
    }
}

#[test]
fn parallel_batches_log_the_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for det in [true, false] {
        let mut cfg = short();
        cfg.deterministic = det;
        cfg.run_name = Some(format!("det_{det}"));
        let run = RunDir::create(dir.path(), &cfg).unwrap();
        let mut tr = Trainer::<f32>::new(&cfg, corpus(&cfg)).unwrap().with_run_dir(run.clone());
        tr.fit().unwrap();
        logs.push(read_metrics(&run.metrics_path()).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn fit_writes_epoch_checkpoints_that_reload() {
    let cfg = short();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path(), &cfg).unwrap();
    let mut tr = Trainer::<f32>::new(&cfg, corpus(&cfg)).unwrap().with_run_dir(run.clone());
    let reports = tr.fit().unwrap();
    // Six crops in batches of four: two steps per epoch.
    assert_eq!(reports.len(), 4);
    assert!(run.checkpoint_path(2).is_file());
    assert!(run.checkpoint_path(4).is_file());
    let (saved_cfg, state) = load_checkpoint::<f32>(&run.latest_checkpoint_path()).unwrap();
    assert_eq!(saved_cfg.hash(), cfg.hash());
    assert_eq!(state.step, 4);
    assert_eq!(state.student, tr.state.student);
    assert_eq!(state.expert.params, tr.state.expert.params);
}

#[test]
fn written_samples_describe_their_masks() {
    let cfg = common::micro();
    let (anchors, _) = common::toy_anchors::<f32>(1, 1, 8, cfg.anchor_hw);
    let sample = build_sample_from_anchor(&anchors[0], &cfg, &mut sample_rng(3, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sample(&sample, cfg.patch_size, dir.path()).unwrap();
    let recs = read_sample_records(&dir.path().join("sample.jsonl")).unwrap();
    assert_eq!(recs.len(), 1 + sample.masks.len());
    match &recs[0] {
        SampleRecord::Sample {
            scales,
            masked_source,
            visible_indices,
            composite_hw,
            ..
        } => {
            let want: Vec<f64> = sample.scaled.iter().map(|v| v.scale).collect();
            assert_eq!(scales, &want);
            assert_eq!(*masked_source, sample.masked_source);
            assert_eq!(visible_indices, &sample.masked.visible_indices);
            assert_eq!(*composite_hw, cfg.composite_hw);
        }
        _ => panic!("first record is not the sample header"),
    }
    for (rec, m) in recs[1..].iter().zip(&sample.masks) {
        match rec {
            SampleRecord::Mask { area, token_mask, bbox, .. } => {
                assert_eq!(*area, m.pixel_mask.iter().filter(|&&b| b).count());
                assert_eq!(*bbox, m.bbox);
                let total: f64 = token_mask.iter().map(|f| f * 64.0).sum();
                assert!((total - *area as f64).abs() < 1e-6);
            }
            _ => panic!("expected a mask record"),
        }
        let png = image::open(dir.path().join(format!("mask_{}.png", m.instance_index))).unwrap().to_luma8();
        let lit = png.pixels().filter(|p| p.0[0] == 255).count();
        assert_eq!(lit, m.area());
    }
}
