use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use saip::config::parse_config;
use saip::data::corpus::{index_corpus, load_anchor, Corpus};
use saip::data::sample::{build_sample, sample_rng, write_sample};
use saip::data::toy::write_toy_corpus;
use saip::probe::{check_scales, cross_scale_consistency, saliency_map, write_overlay, EncoderBundle};
use saip::run::{run_root, RunDir};
use saip::trainer::{load_checkpoint, Trainer};
use saip::ExperimentConfig;

#[derive(Parser)]
#[command(name = "saip", version, about = "Scale-aware image pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder; artifacts go to a run directory under $SAIP_RUN_DIR (default `runs`).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Dotted `key=value` setting applied after the file; repeatable.
        #[arg(long = "override", value_name = "K=V")]
        overrides: Vec<String>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the checkpoint was written under a different config.
        #[arg(long, requires = "resume")]
        allow_config_mismatch: bool,
    },
    /// Write synthesized training samples as images plus a JSONL record.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long = "override", value_name = "K=V")]
        overrides: Vec<String>,
    },
    /// Score cross-scale consistency of an encoder on one image or a directory of images.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.75,1.0,1.5")]
        scales: Vec<f64>,
        /// Report path; defaults to `<run root>/probe/<image stem>.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the saliency overlays written next to the report.
        #[arg(long)]
        no_saliency: bool,
    },
    /// Extract the student encoder (and matching head) from a training checkpoint.
    ExportEncoder {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a procedural person-crop corpus.
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        identities: usize,
        #[arg(long, default_value_t = 20)]
        per_identity: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_corpus(config: &ExperimentConfig) -> Result<Corpus<f32>> {
    let index = index_corpus(&config.corpus_path)?;
    let (corpus, skipped) = Corpus::load(&index, config.anchor_hw)?;
    if !skipped.is_empty() {
        warn!("{} of {} images skipped", skipped.len(), index.len());
    }
    Ok(corpus)
}

fn pretrain(config: &Path, overrides: &[String], resume: Option<&Path>, allow_mismatch: bool) -> Result<()> {
    let config = parse_config(config, overrides)?;
    let corpus = load_corpus(&config)?;
    let run = RunDir::create(&run_root(), &config)?;
    let trainer = match resume {
        Some(ck) => Trainer::<f32>::resume(&config, corpus, ck, allow_mismatch)?,
        None => Trainer::<f32>::new(&config, corpus)?,
    };
    let mut trainer = trainer.with_run_dir(run.clone());
    info!(
        "run {} : {} steps of batch {}",
        run.path.display(),
        trainer.total_steps(),
        config.batch_size
    );
    trainer.fit()?;
    trainer.checkpoint()?;
    println!("{}", run.path.display());
    Ok(())
}

fn synth_data(config: &Path, overrides: &[String], out: &Path, count: usize) -> Result<()> {
    let config = parse_config(config, overrides)?;
    let corpus = load_corpus(&config)?;
    for k in 0..count {
        let sample = build_sample(&corpus, &config, &mut sample_rng(config.seed, k as u64))?;
        write_sample(&sample, config.patch_size, &out.join(format!("sample_{k:05}")))?;
    }
    println!("{count} samples written to {}", out.display());
    Ok(())
}

fn probe_images(image: &Path) -> Result<Vec<PathBuf>> {
    if image.is_dir() {
        let index = index_corpus(image)?;
        Ok((0..index.len()).map(|i| index.path(i)).collect())
    } else {
        Ok(vec![image.to_path_buf()])
    }
}

fn probe(checkpoint: &Path, image: &Path, scales: &[f64], out: Option<PathBuf>, saliency: bool) -> Result<()> {
    check_scales(scales)?;
    let bundle = EncoderBundle::<f32>::load(checkpoint)?;
    let spec = &bundle.encoder.spec;
    let hw = [spec.pos_grid.0 * spec.patch_size, spec.pos_grid.1 * spec.patch_size];
    let paths = probe_images(image)?;
    let images = paths
        .iter()
        .map(|p| load_anchor::<f32>(p, &p.display().to_string(), hw))
        .collect::<saip::Result<Vec<_>>>()?;
    let report = cross_scale_consistency(&bundle, &images, scales)?;

    let stem = image.file_stem().map_or("probe".into(), |s| s.to_string_lossy().into_owned());
    let out = out.unwrap_or_else(|| run_root().join("probe").join(format!("{stem}.jsonl")));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(&out, report.to_jsonl()).with_context(|| format!("writing {}", out.display()))?;
    if saliency {
        for (path, img) in paths.iter().zip(&images) {
            let name = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            let target = out.with_file_name(format!("{name}.saliency.png"));
            write_overlay(img, &saliency_map(&bundle, img)?, &target)?;
        }
    }
    println!(
        "{} images, mean cosine {:.6} (std {:.6}); report at {}",
        images.len(),
        report.mean,
        report.std,
        out.display()
    );
    Ok(())
}

fn export_encoder(checkpoint: &Path, out: &Path) -> Result<()> {
    let (config, state) = load_checkpoint::<f32>(checkpoint)?;
    let bundle = EncoderBundle::from_student(&config, &state.student, "export")?;
    bundle.archive().save(out)?;
    println!("encoder written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            config,
            overrides,
            resume,
            allow_config_mismatch,
        } => pretrain(&config, &overrides, resume.as_deref(), allow_config_mismatch),
        Command::SynthData {
            config,
            out,
            count,
            overrides,
        } => synth_data(&config, &overrides, &out, count),
        Command::Probe {
            checkpoint,
            image,
            scales,
            out,
            no_saliency,
        } => probe(&checkpoint, &image, &scales, out, !no_saliency),
        Command::ExportEncoder { checkpoint, out } => export_encoder(&checkpoint, &out),
        Command::ToyCorpus {
            out,
            identities,
            per_identity,
            height,
            width,
            seed,
        } => {
            if identities == 0 || per_identity == 0 {
                bail!("need at least one identity and one crop per identity");
            }
            let n = write_toy_corpus(&out, identities, per_identity, [height, width], seed)?;
            println!("{n} crops written to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
