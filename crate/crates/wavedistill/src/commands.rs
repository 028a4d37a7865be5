//! The command-line surface: argument definitions and one function per
//! subcommand. Binaries stay thin; everything here is callable (and tested)
//! as a library.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{Overrides, RunConfig, OUT_ENV};
use crate::degrade::{degrade_sample, DegradationRecord};
use crate::error::{Error, Result};
use crate::eval::{report_resolutions, run_ablation, verify_accuracy, EvalReport, EvalRow};
use crate::net::{DownsampleKind, Model, NetworkSpec};
use crate::pgm;
use crate::rng::{derive_seed, StreamKey};
use crate::synth::{build_protocol, dataset_from_images, generate_dataset, load_images,
    save_dataset, save_protocol, Dataset, Pair, VerificationProtocol};
use crate::tensor::Tensor;
use crate::train::{save_loss_log, train_student, train_teacher, TrainResult};
use crate::wavelet;

#[derive(Debug, Parser)]
#[command(name = "wavedistill", version, about = "Cross-resolution face verification: \
wavelet-downsampling networks distilled from high-resolution teachers.")]
pub struct Cli {
    /// TOML config file; flags override its values (file < env < flags).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream in the run.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Serial execution and zeroed wall-clock columns: byte-identical reruns.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Output root (also settable via WAVEDISTILL_OUT).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// Training epochs.
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Low-resolution extents, comma-separated (e.g. 8,16).
    #[arg(long, value_delimiter = ',', value_name = "S,..")]
    pub lr_sizes: Option<Vec<usize>>,
    /// Weight of the wavelet-similarity loss.
    #[arg(long, value_name = "X")]
    pub lambda2: Option<f64>,
    /// Distillation temperature.
    #[arg(long, value_name = "T")]
    pub temperature: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate the synthetic identity dataset and verification protocol.
    Synth,
    /// Run the degradation pipeline over a directory of PGM images.
    Degrade {
        /// Directory of source .pgm images.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Low-resolution extents, comma-separated.
        #[arg(long, value_delimiter = ',', value_name = "S,..")]
        lr_sizes: Option<Vec<usize>>,
    },
    /// Train the high-resolution stride-conv teacher on clean images.
    TrainTeacher {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Distill the waveconv student from a trained teacher on degraded
    /// inputs.
    TrainStudent {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint across probe resolutions.
    Eval {
        /// Checkpoint directory (default: <out>/student).
        #[arg(long, value_name = "DIR")]
        model: Option<PathBuf>,
        /// Probe resolutions below HR, comma-separated.
        #[arg(long, value_delimiter = ',', value_name = "S,..")]
        lr_sizes: Option<Vec<usize>>,
    },
    /// Train and evaluate the five-configuration ablation table.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Decompose an image into Haar subbands with an energy report.
    Dwt {
        /// Even-dimension PGM image.
        image: PathBuf,
    },
}

impl Cli {
    fn overrides(&self) -> Overrides {
        let mut ov = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            deterministic: self.deterministic,
            threads: self.threads,
            ..Default::default()
        };
        match &self.cmd {
            Cmd::Degrade { lr_sizes, .. } | Cmd::Eval { lr_sizes, .. } => {
                ov.lr_sizes = lr_sizes.clone();
            }
            Cmd::TrainTeacher { train }
            | Cmd::TrainStudent { train }
            | Cmd::Ablate { train } => {
                ov.epochs = train.epochs;
                ov.lr_sizes = train.lr_sizes.clone();
                ov.lambda2 = train.lambda2;
                ov.temperature = train.temperature;
            }
            Cmd::Synth | Cmd::Dwt { .. } => {}
        }
        ov
    }
}

/// Entry point for the binary: reads `WAVEDISTILL_OUT` from the process
/// environment and prints the summary lines.
pub fn run(cli: Cli) -> Result<()> {
    let env_out = std::env::var_os(OUT_ENV).map(PathBuf::from);
    for line in execute(cli, env_out)? {
        println!("{line}");
    }
    Ok(())
}

/// Resolves the config, records it in the output directory, and dispatches.
/// Returns the human-readable summary lines.
pub fn execute(cli: Cli, env_out: Option<PathBuf>) -> Result<Vec<String>> {
    let cfg = RunConfig::load(cli.config.as_deref(), env_out, &cli.overrides())?;
    let config_path = cfg.save(&cfg.out_dir)?;
    let mut lines = vec![format!("config: {}", config_path.display())];
    match &cli.cmd {
        Cmd::Synth => {
            let art = cmd_synth(&cfg)?;
            lines.push(format!("wrote {} images to {}", art.images, art.dir.display()));
            lines.push(format!("wrote {} verification pairs", art.pairs));
        }
        Cmd::Degrade { input, .. } => {
            let art = cmd_degrade(&cfg, input)?;
            lines.push(format!("degraded {} images into {}", art.files, art.dir.display()));
            lines.push(format!("manifest: {}", art.manifest.display()));
        }
        Cmd::TrainTeacher { .. } => {
            let art = cmd_train_teacher(&cfg)?;
            lines.extend(train_lines("teacher", &art));
        }
        Cmd::TrainStudent { .. } => {
            let art = cmd_train_student(&cfg)?;
            lines.extend(train_lines("student", &art));
        }
        Cmd::Eval { model, .. } => {
            let art = cmd_eval(&cfg, model.as_deref())?;
            for row in &art.report.rows {
                lines.push(format!(
                    "{} @ {:>2}: {:.4} +- {:.4}",
                    row.config, row.resolution, row.fold_mean, row.fold_std
                ));
            }
            lines.push(format!("report: {}", art.csv.display()));
        }
        Cmd::Ablate { .. } => {
            let art = cmd_ablate(&cfg)?;
            lines.extend(art.wide.trim_end().lines().map(String::from));
            lines.push(format!("long report: {}", art.long_csv.display()));
            lines.push(format!("wide report: {}", art.wide_csv.display()));
        }
        Cmd::Dwt { image } => {
            let art = cmd_dwt(&cfg, image)?;
            for (band, share) in ["ll", "lh", "hl", "hh"].iter().zip(art.shares) {
                lines.push(format!("{band} energy share {share:.6}"));
            }
            lines.push(format!("subbands: {}", art.dir.display()));
        }
    }
    Ok(lines)
}

fn train_lines(which: &str, art: &TrainArtifacts) -> Vec<String> {
    let mut lines = Vec::new();
    if let Some(last) = art.last {
        lines.push(format!(
            "{which}: epoch {} total {:.4} (arc {:.4} kl {:.4} wavesim {:.4})",
            last.epoch, last.total, last.arc, last.kl, last.wavesim
        ));
    }
    lines.push(format!("checkpoint: {}", art.checkpoint.display()));
    lines.push(format!("loss log: {}", art.loss_csv.display()));
    lines
}

#[derive(Debug)]
pub struct SynthArtifacts {
    pub dir: PathBuf,
    pub images: usize,
    pub pairs: usize,
}

/// Renders the dataset into `<out>/dataset`: one PGM per image plus
/// `labels.csv` and `pairs.csv`. Pair indices in `pairs.csv` are image
/// numbers in the directory (the protocol itself spans the eval split).
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthArtifacts> {
    let data = generate_dataset(&cfg.synth)?;
    let protocol = eval_protocol(&data, cfg.seed)?;
    let dir = cfg.out_dir.join("dataset");
    save_dataset(&dir, &data)?;
    let global = VerificationProtocol {
        pairs: protocol
            .pairs
            .iter()
            .map(|p| Pair {
                probe: data.eval_indices[p.probe],
                gallery: data.eval_indices[p.gallery],
                same: p.same,
            })
            .collect(),
        folds: protocol.folds.clone(),
    };
    save_protocol(&dir.join("pairs.csv"), &global)?;
    Ok(SynthArtifacts { dir, images: data.labels.len(), pairs: global.pairs.len() })
}

#[derive(Debug)]
pub struct DegradeArtifacts {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub files: usize,
}

/// Degrades every `.pgm` in `input` (sorted by filename) into
/// `<out>/degraded`, with a manifest CSV recording which gates fired.
/// Sample `i` uses the run's "degrade" stream at index `i`, so the output
/// does not depend on the worker-thread count.
pub fn cmd_degrade(cfg: &RunConfig, input: &Path) -> Result<DegradeArtifacts> {
    let mut names: Vec<String> = fs::read_dir(input)
        .map_err(|e| Error::config(format!("cannot read input dir {}: {e}", input.display())))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            name.ends_with(".pgm").then_some(name)
        })
        .collect();
    names.sort_unstable();
    if names.is_empty() {
        return Err(Error::config(format!("no .pgm images found in {}", input.display())));
    }

    let dir = cfg.out_dir.join("degraded");
    fs::create_dir_all(&dir)?;
    let stream = derive_seed(cfg.seed, "degrade");
    let pool = thread_pool(cfg.effective_threads())?;
    let records: Vec<DegradationRecord> = pool.install(|| {
        names
            .par_iter()
            .enumerate()
            .map(|(i, name)| {
                let img = pgm::read_pgm(&input.join(name))?;
                let key = StreamKey::new(stream, i as u64, 0);
                let (out, record) = degrade_sample(&img, &cfg.degrade, &key)?;
                pgm::write_pgm(&dir.join(name), &out)?;
                Ok(record)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut text = String::from("filename,blur_sigma,noise_sigma,jpeg_quality,chosen_size\n");
    for (name, r) in names.iter().zip(&records) {
        let opt = |v: Option<String>| v.unwrap_or_default();
        text.push_str(&format!(
            "{name},{},{},{},{}\n",
            opt(r.blur_sigma.map(|v| v.to_string())),
            opt(r.noise_sigma.map(|v| v.to_string())),
            opt(r.jpeg_quality.map(|v| v.to_string())),
            r.chosen_size
        ));
    }
    let manifest = dir.join("manifest.csv");
    fs::File::create(&manifest)?.write_all(text.as_bytes())?;
    Ok(DegradeArtifacts { dir, manifest, files: names.len() })
}

#[derive(Debug)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub last: Option<crate::train::EpochLog>,
    pub wall_seconds: f64,
}

/// Trains the stride-conv teacher on the on-disk dataset; writes
/// `<out>/teacher` and `<out>/teacher_loss.csv`.
pub fn cmd_train_teacher(cfg: &RunConfig) -> Result<TrainArtifacts> {
    let data = load_dataset(cfg)?;
    let spec = NetworkSpec { downsample: DownsampleKind::StrideConv, ..cfg.network.clone() };
    let result = train_teacher(&data, &spec, &cfg.train)?;
    save_train(cfg, "teacher", &result)
}

/// Distills the waveconv student from `<out>/teacher` on degraded inputs;
/// writes `<out>/student` and `<out>/student_loss.csv`.
pub fn cmd_train_student(cfg: &RunConfig) -> Result<TrainArtifacts> {
    let teacher_dir = cfg.out_dir.join("teacher");
    if !teacher_dir.join("manifest.toml").is_file() {
        return Err(Error::config(format!(
            "teacher checkpoint not found at {}; run `wavedistill train-teacher` first",
            teacher_dir.display()
        )));
    }
    let teacher = Model::load_checkpoint(&teacher_dir)?;
    let data = load_dataset(cfg)?;
    let spec = NetworkSpec { downsample: DownsampleKind::WaveConv, ..cfg.network.clone() };
    let result = train_student(&data, &teacher, &spec, &cfg.train, &cfg.degrade)?;
    save_train(cfg, "student", &result)
}

#[derive(Debug)]
pub struct EvalArtifacts {
    pub csv: PathBuf,
    pub report: EvalReport,
}

/// Evaluates a checkpoint on the on-disk dataset at HR and every LR probe
/// resolution; writes `<out>/eval.csv`.
pub fn cmd_eval(cfg: &RunConfig, model: Option<&Path>) -> Result<EvalArtifacts> {
    let model_dir = model.map_or_else(|| cfg.out_dir.join("student"), Path::to_path_buf);
    if !model_dir.join("manifest.toml").is_file() {
        return Err(Error::config(format!(
            "model checkpoint not found at {}",
            model_dir.display()
        )));
    }
    let model = Model::load_checkpoint(&model_dir)?;
    let data = load_dataset(cfg)?;
    let size = data.images.shape()[2];
    if model.spec().input_size != size {
        return Err(Error::config(format!(
            "checkpoint expects {}x{0} inputs but the dataset is {size}x{size}",
            model.spec().input_size
        )));
    }
    let protocol = eval_protocol(&data, cfg.seed)?;
    let config_name = model_dir
        .file_name()
        .map_or_else(|| "model".to_string(), |n| n.to_string_lossy().into_owned());

    let started = Instant::now();
    let mut report = EvalReport::default();
    for res in report_resolutions(size, &cfg.degrade.lr_sizes) {
        let (fold_mean, fold_std) = verify_accuracy(&model, &data, &protocol, res)?;
        report.rows.push(EvalRow {
            config: config_name.clone(),
            resolution: res,
            fold_mean,
            fold_std,
            seed: cfg.seed,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    if cfg.deterministic {
        report.strip_wall_seconds();
    }
    let csv = cfg.out_dir.join("eval.csv");
    report.save_csv(&csv)?;
    Ok(EvalArtifacts { csv, report })
}

#[derive(Debug)]
pub struct AblateArtifacts {
    pub long_csv: PathBuf,
    pub wide_csv: PathBuf,
    pub wide: String,
    pub report: EvalReport,
}

/// Runs the five-configuration ablation on the on-disk dataset; writes
/// `<out>/ablation.csv` (long form) and `<out>/ablation_wide.csv`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblateArtifacts> {
    let data = load_dataset(cfg)?;
    let mut ablation = run_ablation(&data, &cfg.network, &cfg.train, &cfg.degrade)?;
    if cfg.deterministic {
        ablation.report.strip_wall_seconds();
    }
    let long_csv = cfg.out_dir.join("ablation.csv");
    ablation.report.save_csv(&long_csv)?;
    let wide = ablation.wide_csv();
    let wide_csv = cfg.out_dir.join("ablation_wide.csv");
    fs::File::create(&wide_csv)?.write_all(wide.as_bytes())?;
    Ok(AblateArtifacts { long_csv, wide_csv, wide, report: ablation.report })
}

#[derive(Debug)]
pub struct DwtArtifacts {
    pub dir: PathBuf,
    pub report: PathBuf,
    /// Energy shares in ll, lh, hl, hh order; they sum to 1.
    pub shares: [f64; 4],
}

/// One-level Haar decomposition of a PGM image into `<out>/dwt`: the four
/// subbands as min-max normalized PGMs plus `report.txt` with per-subband
/// energy shares. Shares are computed with the image mean removed, so they
/// describe structure rather than brightness; a constant image counts as
/// pure LL.
pub fn cmd_dwt(cfg: &RunConfig, image: &Path) -> Result<DwtArtifacts> {
    let img = pgm::read_pgm(image)?;
    let [h, w] = match img.shape()[..] {
        [1, h, w] => [h, w],
        ref s => return Err(Error::shape(format!("expected [1, h, w], got {s:?}"))),
    };
    let bands = wavelet::analyze(&img.reshaped(&[1, 1, h, w])?)?;
    let mean = img.data().iter().sum::<f64>() / img.numel() as f64;
    let centered: Vec<f64> = img.data().iter().map(|&v| v - mean).collect();
    let energies =
        wavelet::analyze(&Tensor::new(&[1, 1, h, w], centered)?)?.energies();
    let total: f64 = energies.iter().sum();
    let shares = if total > 0.0 {
        [energies[0] / total, energies[1] / total, energies[2] / total, energies[3] / total]
    } else {
        [1.0, 0.0, 0.0, 0.0]
    };

    let dir = cfg.out_dir.join("dwt");
    fs::create_dir_all(&dir)?;
    for (name, band) in
        [("ll", &bands.ll), ("lh", &bands.lh), ("hl", &bands.hl), ("hh", &bands.hh)]
    {
        let flat = band.reshaped(&[1, h / 2, w / 2])?;
        pgm::write_pgm(&dir.join(format!("{name}.pgm")), &normalize_for_display(&flat)?)?;
    }
    let report = dir.join("report.txt");
    let mut text = String::new();
    for (name, share) in ["ll", "lh", "hl", "hh"].iter().zip(shares) {
        text.push_str(&format!("{name} {share}\n"));
    }
    fs::File::create(&report)?.write_all(text.as_bytes())?;
    Ok(DwtArtifacts { dir, report, shares })
}

/// Affine map of a tensor onto [0, 255]; a flat tensor maps to mid-gray.
fn normalize_for_display(t: &Tensor) -> Result<Tensor> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in t.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let mapped: Vec<f64> = if hi - lo < 1e-12 {
        vec![128.0; t.numel()]
    } else {
        t.data().iter().map(|&v| (v - lo) / (hi - lo) * 255.0).collect()
    };
    Tensor::new(t.shape(), mapped)
}

/// Loads `<out>/dataset`, rebuilding the seed-derived split.
fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.out_dir.join("dataset");
    if !dir.join("labels.csv").is_file() {
        return Err(Error::config(format!(
            "dataset not found at {}; run `wavedistill synth` first",
            dir.display()
        )));
    }
    let (images, labels) = load_images(&dir)?;
    dataset_from_images(&images, labels, cfg.seed)
}

/// The verification protocol over the eval split, keyed by the run seed.
fn eval_protocol(data: &Dataset, seed: u64) -> Result<VerificationProtocol> {
    let eval_labels: Vec<usize> = data.eval_indices.iter().map(|&i| data.labels[i]).collect();
    build_protocol(&eval_labels, seed)
}

fn save_train(cfg: &RunConfig, which: &str, result: &TrainResult) -> Result<TrainArtifacts> {
    let checkpoint = cfg.out_dir.join(which);
    result.model.save_checkpoint(&checkpoint)?;
    let loss_csv = cfg.out_dir.join(format!("{which}_loss.csv"));
    save_loss_log(&loss_csv, &result.log)?;
    Ok(TrainArtifacts {
        checkpoint,
        loss_csv,
        last: result.log.last().copied(),
        wall_seconds: result.wall_seconds,
    })
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}
