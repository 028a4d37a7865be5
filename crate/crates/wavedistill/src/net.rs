//! The backbone: a small residual network whose only difference between
//! teacher and student is how stages downsample.
//!
//! Layout: a stride-1 stem (conv3x3 - BN - PReLU), then one stage per entry
//! of `channels_per_stage`. Each stage halves the spatial extents with a
//! downsample unit (1x1 conv - BN - PReLU) and runs residual blocks
//! (conv3x3 - BN - PReLU - conv3x3 - BN plus identity, no post-add
//! activation). Global average pooling and a linear projection produce the
//! embedding; an ArcFace weight matrix of per-class directions rides along.
//!
//! The teacher's downsample convolution has stride 2; the student first
//! rejects the detail bands with [`crate::wavelet::waveconv_downsample`] and
//! then applies the same 1x1 convolution at stride 1. Both variants have
//! identical parameter shapes, so parameter counts match exactly and
//! same-seed initializations are element-for-element identical.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::rng::{derive_seed, StreamKey};
use crate::tensor::Tensor;
use crate::wavelet;

/// How a stage halves its spatial extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownsampleKind {
    /// 1x1 convolution with stride 2: keeps whichever pixels the stride
    /// lands on (the teacher / plain-ResNet path).
    StrideConv,
    /// Haar LL subband followed by the same 1x1 convolution at stride 1
    /// (the student / WaveResNet path).
    WaveConv,
    /// 2x2 average pooling scaled by 2 followed by the 1x1 convolution.
    /// Architectural cross-check: bit-identical to `WaveConv`.
    AvgPoolScaled,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub input_size: usize,
    pub input_channels: usize,
    pub channels_per_stage: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub downsample: DownsampleKind,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkSpec {
    /// Desk scale with the waveconv path and the default dataset's 20
    /// classes; run-level resolution overwrites the dataset-coupled fields.
    fn default() -> Self {
        NetworkSpec::desk(DownsampleKind::WaveConv, 20)
    }
}

impl NetworkSpec {
    /// Desk-scale default: 32x32 grayscale in, stages [16, 32, 64] x [1, 1, 1],
    /// 64-d embeddings.
    pub fn desk(downsample: DownsampleKind, num_classes: usize) -> Self {
        NetworkSpec {
            input_size: 32,
            input_channels: 1,
            channels_per_stage: vec![16, 32, 64],
            blocks_per_stage: vec![1, 1, 1],
            embedding_dim: 64,
            num_classes,
            downsample,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.channels_per_stage.len();
        if stages == 0 {
            return Err(Error::config("at least one stage is required"));
        }
        if self.blocks_per_stage.len() != stages {
            return Err(Error::config(format!(
                "blocks_per_stage has {} entries for {} stages",
                self.blocks_per_stage.len(),
                stages
            )));
        }
        if self.channels_per_stage.iter().any(|&c| c == 0) {
            return Err(Error::config("stage channel counts must be positive"));
        }
        if self.input_channels == 0 || self.embedding_dim == 0 {
            return Err(Error::config("input_channels and embedding_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes {} must be at least 2",
                self.num_classes
            )));
        }
        let down_factor = 1usize << stages;
        if self.input_size == 0 || self.input_size % down_factor != 0 {
            return Err(Error::config(format!(
                "input_size {} must be a positive multiple of {down_factor} for {stages} stages",
                self.input_size
            )));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_eps must be > 0 and bn_momentum in [0, 1]"));
        }
        Ok(())
    }

    /// Spatial extent after `k + 1` stages.
    fn stage_size(&self, k: usize) -> usize {
        self.input_size >> (k + 1)
    }
}

/// Whether a forward pass updates batch-norm running statistics and tracks
/// gradients for the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    tensor: Tensor,
}

#[derive(Debug, Clone)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// A network with its parameters and batch-norm running buffers.
#[derive(Debug, Clone)]
pub struct Model {
    spec: NetworkSpec,
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    bn_names: Vec<String>,
    running: HashMap<String, RunningStats>,
}

/// Handles produced by one forward pass.
pub struct ForwardPass {
    /// Output of each stage, in order; the distillation losses read these.
    pub stages: Vec<Value>,
    /// Raw (unnormalized) embedding rows, `[n, embedding_dim]`.
    pub embedding: Value,
    /// The ArcFace class-direction matrix, `[embedding_dim, num_classes]`.
    pub head_weight: Value,
    bindings: Vec<(usize, Value)>,
}

impl Model {
    /// Initializes a model: He fan-in normals for weights (one counter-based
    /// stream per parameter index, so teacher and student draws coincide),
    /// BN gamma 1 / beta 0, PReLU slopes 0.25, zero biases.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut model = Model {
            spec: spec.clone(),
            params: Vec::new(),
            by_name: HashMap::new(),
            bn_names: Vec::new(),
            running: HashMap::new(),
        };
        let init_seed = derive_seed(seed, "init");

        let c0 = spec.channels_per_stage[0];
        model.add_conv(init_seed, "stem.conv", c0, spec.input_channels, 3)?;
        model.add_bn("stem.bn", c0)?;
        model.add_prelu("stem.prelu", c0)?;

        let mut prev = c0;
        for (k, &ch) in spec.channels_per_stage.iter().enumerate() {
            let s = format!("stage{k}");
            model.add_conv(init_seed, &format!("{s}.down.conv"), ch, prev, 1)?;
            model.add_bn(&format!("{s}.down.bn"), ch)?;
            model.add_prelu(&format!("{s}.down.prelu"), ch)?;
            for b in 0..spec.blocks_per_stage[k] {
                let p = format!("{s}.block{b}");
                model.add_conv(init_seed, &format!("{p}.conv1"), ch, ch, 3)?;
                model.add_bn(&format!("{p}.bn1"), ch)?;
                model.add_prelu(&format!("{p}.prelu"), ch)?;
                model.add_conv(init_seed, &format!("{p}.conv2"), ch, ch, 3)?;
                model.add_bn(&format!("{p}.bn2"), ch)?;
            }
            prev = ch;
        }

        model.add_weight(init_seed, "embed.weight", &[prev, spec.embedding_dim], prev)?;
        model.add_param("embed.bias", Tensor::zeros(&[spec.embedding_dim])?)?;
        model.add_weight(
            init_seed,
            "head.weight",
            &[spec.embedding_dim, spec.num_classes],
            spec.embedding_dim,
        )?;
        Ok(model)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        let idx = self
            .by_name
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        Ok(&self.params[*idx].tensor)
    }

    /// Parameters in their fixed construction order, for the optimizer.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// FNV-1a over every parameter and running-stat bit, in a fixed order.
    /// Two models with equal checksums went through identical training.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |v: f64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            p.tensor.data().iter().copied().for_each(&mut eat);
        }
        for name in &self.bn_names {
            let rs = &self.running[name];
            rs.mean.iter().copied().for_each(&mut eat);
            rs.var.iter().copied().for_each(&mut eat);
        }
        h
    }

    /// Runs the backbone. Input must be `[n, input_channels, s, s]` with `s`
    /// exactly `spec.input_size`; the model never resizes silently.
    pub fn forward(&mut self, g: &mut Graph, x: Value, mode: Mode) -> Result<ForwardPass> {
        let shape = g.shape(x).to_vec();
        let expect = [self.spec.input_channels, self.spec.input_size, self.spec.input_size];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::shape(format!(
                "input {shape:?}, expected [n, {}, {}, {}]",
                expect[0], expect[1], expect[2]
            )));
        }

        let mut bindings = Vec::new();
        let mut cur = self.conv_bn_prelu(g, x, "stem", 3, 1, 1, mode, &mut bindings)?;

        let mut stages = Vec::new();
        for k in 0..self.spec.channels_per_stage.len() {
            cur = self.downsample(g, cur, k, mode, &mut bindings)?;
            for b in 0..self.spec.blocks_per_stage[k] {
                cur = self.residual_block(g, cur, k, b, mode, &mut bindings)?;
            }
            stages.push(cur);
        }

        let pooled = g.gap(cur)?;
        let w = self.bind(g, "embed.weight", mode, &mut bindings);
        let b = self.bind(g, "embed.bias", mode, &mut bindings);
        let embedding = g.linear(pooled, w, b)?;
        let head_weight = self.bind(g, "head.weight", mode, &mut bindings);

        Ok(ForwardPass { stages, embedding, head_weight, bindings })
    }

    /// Moves gradients off the tape into the parameters, additively.
    /// Errors if any parameter bound in this pass received no gradient.
    pub fn harvest_grads(&mut self, g: &Graph, pass: &ForwardPass) -> Result<()> {
        for &(idx, value) in &pass.bindings {
            let name = &self.params[idx].name;
            let grad = g
                .grad(value)
                .ok_or_else(|| Error::Train(format!("parameter `{name}` received no gradient")))?;
            self.params[idx].tensor.accumulate_grad(grad)?;
        }
        Ok(())
    }

    /// Shapes of each stage output for a batch of `n`, without running the
    /// network. Used to validate teacher/student compatibility up front.
    pub fn stage_shapes(&self, n: usize) -> Vec<[usize; 4]> {
        self.spec
            .channels_per_stage
            .iter()
            .enumerate()
            .map(|(k, &c)| [n, c, self.spec.stage_size(k), self.spec.stage_size(k)])
            .collect()
    }

    // ---- layers ----

    #[allow(clippy::too_many_arguments)]
    fn conv_bn_prelu(
        &mut self,
        g: &mut Graph,
        x: Value,
        prefix: &str,
        _ksize: usize,
        stride: usize,
        pad: usize,
        mode: Mode,
        bindings: &mut Vec<(usize, Value)>,
    ) -> Result<Value> {
        let k = self.bind(g, &format!("{prefix}.conv"), mode, bindings);
        let y = g.conv2d(x, k, stride, pad)?;
        let y = self.batch_norm(g, y, &format!("{prefix}.bn"), mode, bindings)?;
        let slope = self.bind(g, &format!("{prefix}.prelu"), mode, bindings);
        g.prelu(y, slope)
    }

    fn downsample(
        &mut self,
        g: &mut Graph,
        x: Value,
        k: usize,
        mode: Mode,
        bindings: &mut Vec<(usize, Value)>,
    ) -> Result<Value> {
        let prefix = format!("stage{k}.down");
        let (x, stride) = match self.spec.downsample {
            DownsampleKind::StrideConv => (x, 2),
            DownsampleKind::WaveConv => (wavelet::waveconv_downsample(g, x)?, 1),
            DownsampleKind::AvgPoolScaled => (g.avg_pool2_scaled(x, 2.0)?, 1),
        };
        self.conv_bn_prelu(g, x, &prefix, 1, stride, 0, mode, bindings)
    }

    fn residual_block(
        &mut self,
        g: &mut Graph,
        x: Value,
        k: usize,
        b: usize,
        mode: Mode,
        bindings: &mut Vec<(usize, Value)>,
    ) -> Result<Value> {
        let p = format!("stage{k}.block{b}");
        let k1 = self.bind(g, &format!("{p}.conv1"), mode, bindings);
        let y = g.conv2d(x, k1, 1, 1)?;
        let y = self.batch_norm(g, y, &format!("{p}.bn1"), mode, bindings)?;
        let slope = self.bind(g, &format!("{p}.prelu"), mode, bindings);
        let y = g.prelu(y, slope)?;
        let k2 = self.bind(g, &format!("{p}.conv2"), mode, bindings);
        let y = g.conv2d(y, k2, 1, 1)?;
        let y = self.batch_norm(g, y, &format!("{p}.bn2"), mode, bindings)?;
        g.add(y, x)
    }

    fn batch_norm(
        &mut self,
        g: &mut Graph,
        x: Value,
        name: &str,
        mode: Mode,
        bindings: &mut Vec<(usize, Value)>,
    ) -> Result<Value> {
        let gamma = self.bind(g, &format!("{name}.gamma"), mode, bindings);
        let beta = self.bind(g, &format!("{name}.beta"), mode, bindings);
        match mode {
            Mode::Train => {
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.spec.bn_eps)?;
                let m = self.spec.bn_momentum;
                let rs = self
                    .running
                    .get_mut(name)
                    .expect("running stats exist for every bn layer");
                for (r, b) in rs.mean.iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, b) in rs.var.iter_mut().zip(&var) {
                    *r = (1.0 - m) * *r + m * b;
                }
                Ok(y)
            }
            Mode::Eval => {
                let rs = &self.running[name];
                g.batch_norm_eval(x, gamma, beta, &rs.mean, &rs.var, self.spec.bn_eps)
            }
        }
    }

    fn bind(
        &self,
        g: &mut Graph,
        name: &str,
        mode: Mode,
        bindings: &mut Vec<(usize, Value)>,
    ) -> Value {
        let idx = self.by_name[name];
        let mut t = self.params[idx].tensor.clone();
        t.zero_grad();
        t.set_requires_grad(mode == Mode::Train);
        let v = g.leaf(t);
        if mode == Mode::Train {
            bindings.push((idx, v));
        }
        v
    }

    // ---- construction ----

    fn add_param(&mut self, name: &str, mut tensor: Tensor) -> Result<()> {
        tensor.set_requires_grad(true);
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), tensor });
        Ok(())
    }

    fn add_conv(&mut self, init_seed: u64, name: &str, f: usize, c: usize, k: usize) -> Result<()> {
        self.add_weight(init_seed, name, &[f, c, k, k], c * k * k)
    }

    fn add_weight(
        &mut self,
        init_seed: u64,
        name: &str,
        shape: &[usize],
        fan_in: usize,
    ) -> Result<()> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let mut rng = StreamKey::new(init_seed, self.params.len() as u64, 0).rng();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        self.add_param(name, Tensor::new(shape, data)?)
    }

    fn add_bn(&mut self, name: &str, c: usize) -> Result<()> {
        self.add_param(&format!("{name}.gamma"), Tensor::filled(&[c], 1.0)?)?;
        self.add_param(&format!("{name}.beta"), Tensor::zeros(&[c])?)?;
        self.bn_names.push(name.to_string());
        self.running
            .insert(name.to_string(), RunningStats { mean: vec![0.0; c], var: vec![1.0; c] });
        Ok(())
    }

    fn add_prelu(&mut self, name: &str, c: usize) -> Result<()> {
        self.add_param(name, Tensor::filled(&[c], 0.25)?)
    }

    // ---- checkpoints ----

    /// Writes `manifest.toml` plus one `WDT1` file per parameter and running
    /// buffer into `dir` (created if needed).
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("params"))?;
        std::fs::create_dir_all(dir.join("running"))?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            spec: self.spec.clone(),
            params: self.params.iter().map(|p| p.name.clone()).collect(),
            bn_layers: self.bn_names.clone(),
        };
        let text = toml::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        let mut f = std::fs::File::create(dir.join("manifest.toml"))?;
        f.write_all(text.as_bytes())?;
        for p in &self.params {
            p.tensor.save(dir.join("params").join(format!("{}.wdt1", p.name)))?;
        }
        for name in &self.bn_names {
            let rs = &self.running[name];
            Tensor::new(&[rs.mean.len()], rs.mean.clone())?
                .save(dir.join("running").join(format!("{name}.mean.wdt1")))?;
            Tensor::new(&[rs.var.len()], rs.var.clone())?
                .save(dir.join("running").join(format!("{name}.var.wdt1")))?;
        }
        Ok(())
    }

    /// Rebuilds a model from [`Model::save_checkpoint`] output, validating
    /// every shape against the manifest's architecture.
    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("manifest.toml"))?;
        let manifest: CheckpointManifest =
            toml::from_str(&text).map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "checkpoint format `{}`, expected `{CHECKPOINT_FORMAT}`",
                manifest.format
            )));
        }
        let mut model = Model::build(&manifest.spec, 0)?;
        let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
        if names != manifest.params {
            return Err(Error::Format(
                "checkpoint parameter list does not match its architecture".into(),
            ));
        }
        for idx in 0..model.params.len() {
            let name = model.params[idx].name.clone();
            let loaded = Tensor::load(dir.join("params").join(format!("{name}.wdt1")))?;
            if loaded.shape() != model.params[idx].tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    loaded.shape(),
                    model.params[idx].tensor.shape()
                )));
            }
            model.params[idx].tensor = loaded.with_requires_grad();
        }
        if model.bn_names != manifest.bn_layers {
            return Err(Error::Format("checkpoint bn layer list mismatch".into()));
        }
        for name in &model.bn_names.clone() {
            let mean = Tensor::load(dir.join("running").join(format!("{name}.mean.wdt1")))?;
            let var = Tensor::load(dir.join("running").join(format!("{name}.var.wdt1")))?;
            let rs = model.running.get_mut(name).expect("bn layer exists");
            if mean.numel() != rs.mean.len() || var.numel() != rs.var.len() {
                return Err(Error::Format(format!("running stats size mismatch for `{name}`")));
            }
            if let Some(v) = var.data().iter().find(|v| **v < 0.0) {
                return Err(Error::Format(format!("negative running variance {v} in `{name}`")));
            }
            rs.mean = mean.data().to_vec();
            rs.var = var.data().to_vec();
        }
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "wavedistill-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    spec: NetworkSpec,
    params: Vec<String>,
    bn_layers: Vec<String>,
}
