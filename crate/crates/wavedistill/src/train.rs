//! Two-phase training: an HR teacher first, then a student distilled onto
//! degraded multi-scale LR inputs.
//!
//! All stochastic choices (shuffle order, per-sample degradation) come from
//! counter-based streams keyed by `(derived seed, sample index, epoch)`, so
//! a run is a pure function of `(dataset, configs, seed)` and a resumed
//! [`Trainer`] continues bitwise-identically: nothing about RNG state needs
//! saving, only parameters, batch-norm buffers, momentum, and the epoch.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::degrade::{degrade_sample, DegradationConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{
    arcface_loss, cosine_logits, distill_kl_loss, total_loss, wavesim_loss, ArcFaceConfig,
    DistillConfig,
};
use crate::net::{DownsampleKind, Mode, Model, NetworkSpec};
use crate::optim::SgdState;
use crate::rng::{derive_seed, StreamKey};
use crate::synth::Dataset;
use crate::tensor::Tensor;

/// How many leading stages feed the wavelet-similarity loss. Later stages
/// are nearly spatial-free and belong to the logit term instead.
pub const WAVESIM_STAGES: usize = 2;

/// The learning-rate schedule drops by 10x at these fractions of the total
/// epoch budget (the classic 10/13/16-of-18 milestones).
const LR_MILESTONES: [(u32, u32); 3] = [(10, 18), (13, 18), (16, 18)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the distillation KL term.
    pub lambda1: f64,
    /// Weight of the wavelet-similarity term.
    pub lambda2: f64,
    pub temperature: f64,
    pub arcface_scale: f64,
    pub arcface_margin: f64,
    /// Global gradient-norm ceiling per step (`inf` disables). The
    /// wavelet-similarity term sums squared errors over whole feature maps,
    /// so its early gradients dwarf the recognition term by orders of
    /// magnitude; without a ceiling the 0.1 learning rate diverges within
    /// the first epoch at this model size.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            lambda1: 1.0,
            lambda2: 0.05,
            temperature: 4.0,
            arcface_scale: 16.0,
            arcface_margin: 0.5,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        SgdState::new(self.lr, self.momentum, self.clip_norm)?;
        self.arcface().validate()?;
        self.distill().validate()
    }

    pub fn arcface(&self) -> ArcFaceConfig {
        ArcFaceConfig { scale: self.arcface_scale, margin: self.arcface_margin }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            temperature: self.temperature,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }
}

/// Learning rate in force at a (0-based) epoch.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let mut lr = cfg.lr;
    for (num, den) in LR_MILESTONES {
        let milestone = cfg.epochs * num as usize / den as usize;
        if epoch >= milestone {
            lr /= 10.0;
        }
    }
    lr
}

/// What surrounds the ArcFace core: degraded inputs and/or a frozen teacher.
/// With no teacher (or both lambdas zero) training is plain ArcFace.
#[derive(Clone, Copy, Default)]
pub struct TrainPlan<'a> {
    pub degrade: Option<&'a DegradationConfig>,
    pub teacher: Option<&'a Model>,
}

/// Per-epoch mean loss components over batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub arc: f64,
    pub kl: f64,
    pub wavesim: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub wall_seconds: f64,
}

/// Writes the per-epoch loss log as CSV.
pub fn save_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::from("epoch,lr,arc,kl,wavesim,total\n");
    for row in log {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.epoch, row.lr, row.arc, row.kl, row.wavesim, row.total
        ));
    }
    fs::File::create(path)?.write_all(text.as_bytes())?;
    Ok(())
}

/// Network input normalization: 0-255 pixels to roughly unit scale.
pub fn normalize_pixel(v: f64) -> f64 {
    (v - 127.5) / 128.0
}

/// Stacks dataset images (by index) into a normalized `[n, 1, s, s]` batch,
/// degrading each sample first when a config is given. Degradation streams
/// are keyed by `(seed, sample index, epoch)`, never by batch position.
fn assemble_batch(
    dataset: &Dataset,
    indices: &[usize],
    degrade: Option<(&DegradationConfig, u64, usize)>,
) -> Result<(Tensor, Vec<usize>)> {
    let s = dataset.images.shape()[2];
    let mut data = Vec::with_capacity(indices.len() * s * s);
    let mut labels = Vec::with_capacity(indices.len());
    for &idx in indices {
        let img = dataset.image(idx)?;
        let img = match degrade {
            Some((cfg, seed, epoch)) => {
                degrade_sample(&img, cfg, &StreamKey::new(seed, idx as u64, epoch as u64))?.0
            }
            None => img,
        };
        data.extend(img.data().iter().map(|&v| normalize_pixel(v)));
        labels.push(dataset.labels[idx]);
    }
    Ok((Tensor::new(&[indices.len(), 1, s, s], data)?, labels))
}

/// Frozen-teacher outputs for every training image, computed once in eval
/// mode. Valid for the whole run because the teacher never changes; lets
/// distillation pay for one network's backward instead of two forwards.
struct TeacherCache {
    logits: HashMap<usize, Vec<f64>>,
    stages: HashMap<usize, Vec<Tensor>>,
    classes: usize,
}

impl TeacherCache {
    fn build(teacher: &Model, dataset: &Dataset, cfg: &TrainConfig, batch: usize) -> Result<Self> {
        let mut model = teacher.clone();
        let classes = model.spec().num_classes;
        let mut cache = TeacherCache {
            logits: HashMap::new(),
            stages: HashMap::new(),
            classes,
        };
        for chunk in dataset.train_indices.chunks(batch.max(1)) {
            let (x, _) = assemble_batch(dataset, chunk, None)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let pass = model.forward(&mut g, xv, Mode::Eval)?;
            let logits = cosine_logits(&mut g, pass.embedding, pass.head_weight, cfg.arcface_scale)?;
            let logit_data = g.data(logits).to_vec();
            let kept = pass.stages.len().min(WAVESIM_STAGES);
            for (row, &idx) in chunk.iter().enumerate() {
                cache
                    .logits
                    .insert(idx, logit_data[row * classes..][..classes].to_vec());
                let mut per_stage = Vec::with_capacity(kept);
                for &stage in pass.stages.iter().take(kept) {
                    let shape = g.shape(stage).to_vec();
                    let plane = shape[1] * shape[2] * shape[3];
                    per_stage.push(Tensor::new(
                        &shape[1..],
                        g.data(stage)[row * plane..][..plane].to_vec(),
                    )?);
                }
                cache.stages.insert(idx, per_stage);
            }
        }
        Ok(cache)
    }

    fn logits_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.classes);
        for idx in indices {
            let row = self
                .logits
                .get(idx)
                .ok_or_else(|| Error::Invalid(format!("no cached teacher logits for image {idx}")))?;
            data.extend_from_slice(row);
        }
        Tensor::new(&[indices.len(), self.classes], data)
    }

    fn stages_batch(&self, indices: &[usize], stage: usize) -> Result<Tensor> {
        let shape = {
            let first = &self.stages[&indices[0]][stage];
            let mut s = vec![indices.len()];
            s.extend_from_slice(first.shape());
            s
        };
        let mut data = Vec::with_capacity(shape.iter().product());
        for idx in indices {
            let t = self
                .stages
                .get(idx)
                .and_then(|v| v.get(stage))
                .ok_or_else(|| Error::Invalid(format!("no cached teacher stage for image {idx}")))?;
            data.extend_from_slice(t.data());
        }
        Tensor::new(&shape, data)
    }
}

/// Resumable training state: the model plus optimizer momentum and the next
/// epoch index. Everything else a run depends on is re-derived from configs.
pub struct Trainer {
    model: Model,
    opt: SgdState,
    cfg: TrainConfig,
    next_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainerManifest {
    format: String,
    next_epoch: usize,
    velocity_count: usize,
}

const TRAINER_FORMAT: &str = "wavedistill-trainer-v1";

impl Trainer {
    pub fn new(model: Model, cfg: &TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        Ok(Trainer {
            model,
            opt: SgdState::new(cfg.lr, cfg.momentum, cfg.clip_norm)?,
            cfg: cfg.clone(),
            next_epoch: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    /// Persists model, momentum, and epoch cursor under `dir`.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        self.model.save_checkpoint(dir.join("model"))?;
        let vel = self.opt.velocities();
        let manifest = TrainerManifest {
            format: TRAINER_FORMAT.into(),
            next_epoch: self.next_epoch,
            velocity_count: vel.len(),
        };
        fs::write(
            dir.join("trainer.toml"),
            toml::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        let vdir = dir.join("velocity");
        fs::create_dir_all(&vdir)?;
        for (i, v) in vel.iter().enumerate() {
            Tensor::new(&[v.len()], v.clone())?.save(vdir.join(format!("v{i:04}.wdt1")))?;
        }
        Ok(())
    }

    /// Restores a state written by [`Trainer::save_state`]. The config must
    /// agree with the original run for the continuation to mean anything;
    /// hyperparameters are taken from `cfg`, not from disk.
    pub fn load_state(dir: &Path, cfg: &TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let manifest: TrainerManifest =
            toml::from_str(&fs::read_to_string(dir.join("trainer.toml"))?)
                .map_err(|e| Error::Format(format!("trainer.toml: {e}")))?;
        if manifest.format != TRAINER_FORMAT {
            return Err(Error::Format(format!(
                "unsupported trainer state format `{}`",
                manifest.format
            )));
        }
        let model = Model::load_checkpoint(dir.join("model"))?;
        let mut opt = SgdState::new(cfg.lr, cfg.momentum, cfg.clip_norm)?;
        let mut velocity = Vec::with_capacity(manifest.velocity_count);
        for i in 0..manifest.velocity_count {
            let t = Tensor::load(dir.join("velocity").join(format!("v{i:04}.wdt1")))?;
            velocity.push(t.data().to_vec());
        }
        opt.restore_velocities(velocity);
        Ok(Trainer { model, opt, cfg: cfg.clone(), next_epoch: manifest.next_epoch })
    }

    /// Runs all remaining epochs (`next_epoch..cfg.epochs`).
    pub fn run(&mut self, dataset: &Dataset, plan: &TrainPlan) -> Result<Vec<EpochLog>> {
        self.run_epochs(dataset, plan, usize::MAX)
    }

    /// Runs at most `count` epochs of the `cfg.epochs`-long schedule,
    /// returning one log row per epoch run. The learning-rate schedule is a
    /// function of the absolute epoch index, so stopping and resuming (via
    /// [`Trainer::save_state`]) changes nothing about the trajectory.
    pub fn run_epochs(
        &mut self,
        dataset: &Dataset,
        plan: &TrainPlan,
        count: usize,
    ) -> Result<Vec<EpochLog>> {
        let cfg = self.cfg.clone();
        // A teacher with both loss weights zero contributes nothing; skip
        // it entirely so the run is literally plain ArcFace.
        let teacher = plan
            .teacher
            .filter(|_| cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0);
        if teacher.is_some() && plan.degrade.is_none() {
            return Err(Error::config("distillation requires a degradation config"));
        }
        if let Some(dc) = plan.degrade {
            dc.validate()?;
            if !dc.upsample_back {
                return Err(Error::config(
                    "training inputs must stay at the network extent; set upsample_back = true",
                ));
            }
        }
        if let Some(t) = teacher {
            let ts = t.stage_shapes(1);
            let ss = self.model.stage_shapes(1);
            if ts != ss {
                return Err(Error::config(format!(
                    "teacher/student stage shapes differ: {ts:?} vs {ss:?}"
                )));
            }
            if t.spec().num_classes != self.model.spec().num_classes {
                return Err(Error::config("teacher and student must share the class set"));
            }
        }

        let cache = match teacher {
            Some(t) => Some(TeacherCache::build(t, dataset, &cfg, cfg.batch_size)?),
            None => None,
        };
        let shuffle_seed = derive_seed(cfg.seed, "shuffle");
        let degrade_seed = derive_seed(cfg.seed, "degrade");
        let arc_cfg = cfg.arcface();
        let distill_cfg = cfg.distill();

        let mut logs = Vec::new();
        let end = cfg.epochs.min(self.next_epoch.saturating_add(count));
        for epoch in self.next_epoch..end {
            let lr = lr_at(&cfg, epoch);
            self.opt.set_lr(lr)?;
            let mut order = dataset.train_indices.clone();
            order.shuffle(&mut StreamKey::new(shuffle_seed, 0, epoch as u64).rng());

            let mut sums = [0.0f64; 4];
            let mut batches = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                let model = &mut self.model;
                let opt = &mut self.opt;
                let mut step = || -> Result<[f64; 4]> {
                    let (x, labels) = assemble_batch(
                        dataset,
                        batch,
                        plan.degrade.map(|dc| (dc, degrade_seed, epoch)),
                    )?;
                    let mut g = Graph::new();
                    let xv = g.constant(x);
                    let pass = model.forward(&mut g, xv, Mode::Train)?;
                    let arc =
                        arcface_loss(&mut g, pass.embedding, pass.head_weight, &labels, &arc_cfg)?;

                    let mut kl = None;
                    let mut ws = None;
                    if let Some(cache) = &cache {
                        if cfg.lambda1 > 0.0 {
                            let t_logits = cache.logits_batch(batch)?;
                            let s_logits = cosine_logits(
                                &mut g,
                                pass.embedding,
                                pass.head_weight,
                                cfg.arcface_scale,
                            )?;
                            kl = Some(distill_kl_loss(&mut g, &t_logits, s_logits, cfg.temperature)?);
                        }
                        if cfg.lambda2 > 0.0 {
                            let kept = pass.stages.len().min(WAVESIM_STAGES);
                            let mut t_stages = Vec::with_capacity(kept);
                            for stage in 0..kept {
                                t_stages.push(g.constant(cache.stages_batch(batch, stage)?));
                            }
                            ws = Some(wavesim_loss(&mut g, &t_stages, &pass.stages[..kept])?);
                        }
                    }
                    let total = total_loss(&mut g, arc, kl, ws, &distill_cfg)?;
                    g.backward(total)?;
                    model.harvest_grads(&g, &pass)?;
                    let mut params = model.params_mut();
                    opt.step(&mut params)?;
                    Ok([
                        g.item(arc)?,
                        kl.map_or(Ok(0.0), |v| g.item(v))?,
                        ws.map_or(Ok(0.0), |v| g.item(v))?,
                        g.item(total)?,
                    ])
                };
                // Non-finiteness anywhere in the step is divergence; tag it
                // with where the run was. Structural errors pass through.
                let batch_sums = step().map_err(|e| match e {
                    Error::NonFinite(_) => Error::Train(format!(
                        "training diverged (non-finite loss) at seed {} epoch {epoch}: {e}",
                        cfg.seed
                    )),
                    other => other,
                })?;
                for (s, b) in sums.iter_mut().zip(batch_sums) {
                    *s += b;
                }
                batches += 1;
            }
            let n = batches.max(1) as f64;
            logs.push(EpochLog {
                epoch,
                lr,
                arc: sums[0] / n,
                kl: sums[1] / n,
                wavesim: sums[2] / n,
                total: sums[3] / n,
            });
            self.next_epoch = epoch + 1;
        }
        Ok(logs)
    }
}

/// Trains a fresh model under `plan`. The initializer stream depends only
/// on `cfg.seed`, so every architecture in a seed group starts from the
/// same per-parameter draws.
pub fn train_model(
    dataset: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    plan: &TrainPlan,
) -> Result<TrainResult> {
    let started = Instant::now();
    let model = Model::build(spec, derive_seed(cfg.seed, "init"))?;
    let mut trainer = Trainer::new(model, cfg)?;
    let log = trainer.run(dataset, plan)?;
    Ok(TrainResult {
        model: trainer.into_model(),
        log,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Phase one: ArcFace on clean HR images with the stride-conv backbone.
pub fn train_teacher(dataset: &Dataset, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<TrainResult> {
    if spec.downsample != DownsampleKind::StrideConv {
        return Err(Error::config(format!(
            "train_teacher requires the stride-conv backbone, got {:?}",
            spec.downsample
        )));
    }
    train_model(dataset, spec, cfg, &TrainPlan::default())
}

/// Phase two: the waveconv student on degraded inputs, distilling from the
/// frozen teacher. The teacher is checksummed before and after.
pub fn train_student(
    dataset: &Dataset,
    teacher: &Model,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    degcfg: &DegradationConfig,
) -> Result<TrainResult> {
    if spec.downsample != DownsampleKind::WaveConv {
        return Err(Error::config(format!(
            "train_student requires the waveconv backbone, got {:?}",
            spec.downsample
        )));
    }
    if teacher.spec().input_size != spec.input_size {
        return Err(Error::config(format!(
            "teacher input size {} != student input size {}",
            teacher.spec().input_size,
            spec.input_size
        )));
    }
    let before = teacher.checksum();
    let result = train_model(
        dataset,
        spec,
        cfg,
        &TrainPlan { degrade: Some(degcfg), teacher: Some(teacher) },
    )?;
    if teacher.checksum() != before {
        return Err(Error::Train("teacher parameters changed during distillation".into()));
    }
    Ok(result)
}
