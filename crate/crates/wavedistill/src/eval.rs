//! Cross-resolution verification: LR probes against HR galleries with
//! cosine scoring, 10-fold cross-validated thresholds, and the Table-1-style
//! ablation over backbone / degradation / KD / WaveSim.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::degrade::{eval_downsample, DegradationConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::net::{DownsampleKind, Mode, Model, NetworkSpec};
use crate::synth::{build_protocol, Dataset, VerificationProtocol};
use crate::tensor::Tensor;
use crate::train::{normalize_pixel, train_model, TrainConfig, TrainPlan};

/// Number of candidate thresholds swept over [-1, 1].
const THRESHOLD_SWEEP: usize = 1000;

/// Eval-mode embedding of one `[1, s, s]` image, L2-normalized.
pub fn extract_embedding(model: &Model, image: &Tensor) -> Result<Vec<f64>> {
    Ok(embed_images(model, std::slice::from_ref(image))?.remove(0))
}

/// Batched eval-mode embeddings, one unit vector per input image.
pub fn embed_images(model: &Model, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut m = model.clone();
    let s = m.spec().input_size;
    let emb_dim = m.spec().embedding_dim;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let mut data = Vec::with_capacity(chunk.len() * s * s);
        for img in chunk {
            if img.shape() != [1, s, s] {
                return Err(Error::shape(format!(
                    "embedding input {:?}, expected [1, {s}, {s}]",
                    img.shape()
                )));
            }
            data.extend(img.data().iter().map(|&v| normalize_pixel(v)));
        }
        let x = Tensor::new(&[chunk.len(), 1, s, s], data)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let pass = m.forward(&mut g, xv, Mode::Eval)?;
        let rows = g.data(pass.embedding);
        for r in 0..chunk.len() {
            let row = &rows[r * emb_dim..][..emb_dim];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Invalid("zero-norm embedding cannot be normalized".into()));
            }
            out.push(row.iter().map(|v| v / norm).collect());
        }
    }
    Ok(out)
}

/// Fold-wise verification accuracy from precomputed unit embeddings.
/// For each fold the threshold is chosen on the other folds by maximizing
/// accuracy over a 1000-point sweep of [-1, 1] (lowest winning threshold on
/// ties), then applied to the held-out fold. Returns (mean, sample std).
pub fn verify_with_embeddings(
    probes: &[Vec<f64>],
    galleries: &[Vec<f64>],
    protocol: &VerificationProtocol,
) -> Result<(f64, f64)> {
    let mut scored = Vec::with_capacity(protocol.pairs.len());
    for p in &protocol.pairs {
        let pe = probes
            .get(p.probe)
            .ok_or_else(|| Error::Invalid(format!("probe index {} out of range", p.probe)))?;
        let ge = galleries
            .get(p.gallery)
            .ok_or_else(|| Error::Invalid(format!("gallery index {} out of range", p.gallery)))?;
        let dot: f64 = pe.iter().zip(ge).map(|(a, b)| a * b).sum();
        scored.push((dot, p.same));
    }
    let thresholds: Vec<f64> = (0..THRESHOLD_SWEEP)
        .map(|i| -1.0 + 2.0 * i as f64 / (THRESHOLD_SWEEP - 1) as f64)
        .collect();

    let mut fold_acc = Vec::with_capacity(protocol.folds.len());
    for (f, fold) in protocol.folds.iter().enumerate() {
        if fold.is_empty() {
            return Err(Error::Invalid(format!("fold {f} is empty")));
        }
        let train: Vec<(f64, bool)> = protocol
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != f)
            .flat_map(|(_, members)| members.iter().map(|&pi| scored[pi]))
            .collect();
        let accuracy = |pairs: &[(f64, bool)], t: f64| {
            let hits = pairs.iter().filter(|&&(s, same)| (s >= t) == same).count();
            hits as f64 / pairs.len() as f64
        };
        let mut best = (f64::NEG_INFINITY, 0.0);
        for &t in &thresholds {
            let acc = accuracy(&train, t);
            if acc > best.0 {
                best = (acc, t);
            }
        }
        let held_out: Vec<(f64, bool)> = fold.iter().map(|&pi| scored[pi]).collect();
        fold_acc.push(accuracy(&held_out, best.1));
    }

    let n = fold_acc.len() as f64;
    let mean = fold_acc.iter().sum::<f64>() / n;
    let std = if fold_acc.len() > 1 {
        (fold_acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

/// HR gallery tensors and probe tensors at a given resolution, in
/// `eval_indices` order — the index space the protocol refers to.
fn eval_images(dataset: &Dataset, probe_resolution: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let s = dataset.images.shape()[2];
    let mut galleries = Vec::with_capacity(dataset.eval_indices.len());
    let mut probes = Vec::with_capacity(dataset.eval_indices.len());
    for &idx in &dataset.eval_indices {
        let hr = dataset.image(idx)?;
        probes.push(if probe_resolution == s {
            hr.clone()
        } else {
            eval_downsample(&hr, probe_resolution)?
        });
        galleries.push(hr);
    }
    Ok((galleries, probes))
}

/// Verification accuracy over the dataset's eval split: probes cleanly
/// downsampled to `probe_resolution`, galleries kept at HR.
pub fn verify_accuracy(
    model: &Model,
    dataset: &Dataset,
    protocol: &VerificationProtocol,
    probe_resolution: usize,
) -> Result<(f64, f64)> {
    let (galleries, probes) = eval_images(dataset, probe_resolution)?;
    let gallery_emb = embed_images(model, &galleries)?;
    let probe_emb = embed_images(model, &probes)?;
    verify_with_embeddings(&probe_emb, &gallery_emb, protocol)
}

/// One metrics row: a configuration evaluated at one probe resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub config: String,
    pub resolution: usize,
    pub fold_mean: f64,
    pub fold_std: f64,
    pub seed: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut text = String::from("config,resolution,fold_mean,fold_std,seed,wall_seconds\n");
        for r in &self.rows {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.config, r.resolution, r.fold_mean, r.fold_std, r.seed, r.wall_seconds
            ));
        }
        text
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::File::create(path)?.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn accuracy(&self, config: &str, resolution: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.config == config && r.resolution == resolution)
            .map(|r| r.fold_mean)
    }

    /// Zeroes wall-clock columns so deterministic reruns are byte-identical.
    pub fn strip_wall_seconds(&mut self) {
        for r in &mut self.rows {
            r.wall_seconds = 0.0;
        }
    }
}

/// The five Table-1 configurations, in presentation order.
pub const ABLATION_CONFIGS: [&str; 5] =
    ["resnet", "waveresnet", "+degradation", "+kd", "+kd+wavesim"];

/// Ablation output: long-format rows plus the wide accuracy table.
#[derive(Debug, Clone)]
pub struct AblationReport {
    pub report: EvalReport,
    /// Probe resolutions, HR first then LR sizes descending.
    pub resolutions: Vec<usize>,
}

impl AblationReport {
    /// Table-1 layout: one row per configuration, one accuracy column per
    /// resolution plus their average.
    pub fn wide_csv(&self) -> String {
        let mut text = String::from("config");
        for r in &self.resolutions {
            text.push_str(&format!(",res_{r}"));
        }
        text.push_str(",average\n");
        for config in ABLATION_CONFIGS {
            text.push_str(config);
            let mut sum = 0.0;
            for &res in &self.resolutions {
                let acc = self.report.accuracy(config, res).unwrap_or(f64::NAN);
                sum += acc;
                text.push_str(&format!(",{acc}"));
            }
            text.push_str(&format!(",{}\n", sum / self.resolutions.len() as f64));
        }
        text
    }
}

/// Probe resolutions for reports: HR first, then LR sizes descending.
pub fn report_resolutions(image_size: usize, lr_sizes: &[usize]) -> Vec<usize> {
    let mut res = vec![image_size];
    let mut lr: Vec<usize> = lr_sizes.iter().copied().filter(|&s| s != image_size).collect();
    lr.sort_unstable_by(|a, b| b.cmp(a));
    res.extend(lr);
    res
}

/// Trains the five ablation configurations with a shared seed and evaluates
/// each at every probe resolution. The row-1 ResNet doubles as the
/// distillation teacher for the KD rows.
pub fn run_ablation(
    dataset: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    degcfg: &DegradationConfig,
) -> Result<AblationReport> {
    degcfg.validate()?;
    if spec.num_classes != dataset.num_identities {
        return Err(Error::config(format!(
            "spec.num_classes {} != dataset identities {}",
            spec.num_classes, dataset.num_identities
        )));
    }
    let eval_labels: Vec<usize> =
        dataset.eval_indices.iter().map(|&i| dataset.labels[i]).collect();
    let protocol = build_protocol(&eval_labels, cfg.seed)?;
    let resolutions = report_resolutions(spec.input_size, &degcfg.lr_sizes);

    let with_kind = |kind: DownsampleKind| NetworkSpec { downsample: kind, ..spec.clone() };
    let mut report = EvalReport::default();
    let mut teacher: Option<Model> = None;

    for config in ABLATION_CONFIGS {
        let started = Instant::now();
        let trained = match config {
            "resnet" => train_model(
                dataset,
                &with_kind(DownsampleKind::StrideConv),
                cfg,
                &TrainPlan::default(),
            )?,
            "waveresnet" => train_model(
                dataset,
                &with_kind(DownsampleKind::WaveConv),
                cfg,
                &TrainPlan::default(),
            )?,
            "+degradation" => train_model(
                dataset,
                &with_kind(DownsampleKind::WaveConv),
                cfg,
                &TrainPlan { degrade: Some(degcfg), teacher: None },
            )?,
            "+kd" => train_model(
                dataset,
                &with_kind(DownsampleKind::WaveConv),
                &TrainConfig { lambda2: 0.0, ..cfg.clone() },
                &TrainPlan { degrade: Some(degcfg), teacher: teacher.as_ref() },
            )?,
            "+kd+wavesim" => train_model(
                dataset,
                &with_kind(DownsampleKind::WaveConv),
                cfg,
                &TrainPlan { degrade: Some(degcfg), teacher: teacher.as_ref() },
            )?,
            other => unreachable!("unknown ablation config {other}"),
        };
        let model = trained.model;
        let mut rows = Vec::with_capacity(resolutions.len());
        for &res in &resolutions {
            let (mean, std) = verify_accuracy(&model, dataset, &protocol, res)?;
            rows.push(EvalRow {
                config: config.to_string(),
                resolution: res,
                fold_mean: mean,
                fold_std: std,
                seed: cfg.seed,
                wall_seconds: 0.0,
            });
        }
        let wall = started.elapsed().as_secs_f64();
        for r in &mut rows {
            r.wall_seconds = wall;
        }
        report.rows.extend(rows);
        if config == "resnet" {
            teacher = Some(model);
        }
    }
    Ok(AblationReport { report, resolutions })
}
