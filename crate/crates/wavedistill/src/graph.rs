//! Tape-based reverse-mode autodiff over `f64` tensors.
//!
//! A [`Graph`] owns every intermediate value of one forward pass; ops append
//! nodes and return copyable [`Value`] handles. [`Graph::backward`] walks the
//! tape once in reverse, accumulating gradients additively into every node
//! reachable from the loss that requires gradients. Graphs are single-shot:
//! build, run backward once, read gradients, drop.

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp bound keeping `acos` inputs strictly inside (-1, 1).
pub const COS_CLAMP: f64 = 1.0 - 1e-7;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

/// The four orthonormal Haar analysis kernels, as 2x2 taps in row-major
/// order. `Ll` is the half-scaled average; the rest are detail filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Ll,
    Lh,
    Hl,
    Hh,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::Ll, Band::Lh, Band::Hl, Band::Hh];

    /// Taps `[k00, k01, k10, k11]` applied to each 2x2 block.
    pub fn taps(self) -> [f64; 4] {
        match self {
            Band::Ll => [0.5, 0.5, 0.5, 0.5],
            Band::Lh => [0.5, 0.5, -0.5, -0.5],
            Band::Hl => [0.5, -0.5, 0.5, -0.5],
            Band::Hh => [0.5, -0.5, -0.5, 0.5],
        }
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Bias(usize, usize),
    Conv2d { x: usize, k: usize, geom: ConvGeom },
    Prelu { x: usize, slope: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Gap(usize),
    Haar { x: usize, band: Band },
    HaarInverse { ll: usize, lh: usize, hl: usize, hh: usize },
    AvgPool2 { x: usize, scale: f64 },
    Sum(usize),
    LogSoftmax(usize),
    GatherTarget { x: usize, labels: Vec<usize> },
    ArcMargin { cos: usize, labels: Vec<usize>, margin: f64 },
    RowNormalize { x: usize, inv_norms: Vec<f64> },
    ColNormalize { x: usize, inv_norms: Vec<f64> },
    Detach,
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// The autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf; its `requires_grad` flag decides whether
    /// backward will accumulate a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> Value {
        let requires_grad = t.requires_grad();
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), requires_grad)
    }

    /// Inserts a tensor as a constant leaf regardless of its flag.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.node(v).data
    }

    /// The single element of a scalar node.
    pub fn item(&self, v: Value) -> Result<f64> {
        let n = self.node(v);
        if n.data.len() != 1 {
            return Err(Error::shape(format!("item() on shape {:?}", n.shape)));
        }
        Ok(n.data[0])
    }

    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.node(v).requires_grad
    }

    /// Copies a node out as a standalone tensor (no gradient, no flag).
    pub fn to_tensor(&self, v: Value) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.data.clone()).expect("node data is always a valid tensor")
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape(a, b, "add")?;
        let data = zip_map(&self.node(a).data, &self.node(b).data, |x, y| x + y);
        Ok(self.push_like(Op::Add(a.0, b.0), a, data))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape(a, b, "sub")?;
        let data = zip_map(&self.node(a).data, &self.node(b).data, |x, y| x - y);
        Ok(self.push_like(Op::Sub(a.0, b.0), a, data))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape(a, b, "mul")?;
        let data = zip_map(&self.node(a).data, &self.node(b).data, |x, y| x * y);
        Ok(self.push_like(Op::Mul(a.0, b.0), a, data))
    }

    pub fn scale(&mut self, x: Value, c: f64) -> Result<Value> {
        finite_scalar(c, "scale factor")?;
        let data = self.node(x).data.iter().map(|v| c * v).collect();
        Ok(self.push_like(Op::Scale(x.0, c), x, data))
    }

    pub fn shift(&mut self, x: Value, c: f64) -> Result<Value> {
        finite_scalar(c, "shift offset")?;
        let data = self.node(x).data.iter().map(|v| v + c).collect();
        Ok(self.push_like(Op::Shift(x.0), x, data))
    }

    // ---- linear algebra ----

    /// `[n, d] x [d, k] -> [n, k]`.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let lhs = self.rank2(a, "matmul lhs")?;
        let rhs = self.rank2(b, "matmul rhs")?;
        let (n, d) = (lhs[0], lhs[1]);
        let (d2, k) = (rhs[0], rhs[1]);
        if d != d2 {
            return Err(Error::shape(format!("matmul inner dims {d} vs {d2}")));
        }
        let (ad, bd) = (&self.node(a).data, &self.node(b).data);
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &mut out[i * k..][..k];
            for j in 0..d {
                let av = ad[i * d + j];
                for (o, bv) in row.iter_mut().zip(&bd[j * k..][..k]) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a.0, b.0), vec![n, k], out, rg))
    }

    /// Adds a length-`k` bias row-wise to `[n, k]`.
    pub fn bias(&mut self, x: Value, b: Value) -> Result<Value> {
        let &[n, k] = &self.rank2(x, "bias input")?[..] else { unreachable!() };
        if self.node(b).shape != [k] {
            return Err(Error::shape(format!(
                "bias shape {:?} for input [{n}, {k}]",
                self.node(b).shape
            )));
        }
        let (xd, bd) = (&self.node(x).data, &self.node(b).data);
        let data = xd
            .chunks_exact(k)
            .flat_map(|row| row.iter().zip(bd).map(|(v, bv)| v + bv))
            .collect();
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(Op::Bias(x.0, b.0), vec![n, k], data, rg))
    }

    /// `linear(x, w, b) = x.w + b` over rows.
    pub fn linear(&mut self, x: Value, w: Value, b: Value) -> Result<Value> {
        let y = self.matmul(x, w)?;
        self.bias(y, b)
    }

    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(&mut self, x: Value, k: Value, stride: usize, pad: usize) -> Result<Value> {
        let geom = ConvGeom::new(&self.node(x).shape, &self.node(k).shape, stride, pad)?;
        let mut out = vec![0.0; geom.n * geom.f * geom.oh * geom.ow];
        conv::forward(&self.node(x).data, &self.node(k).data, &geom, &mut out);
        let rg = self.any_grad(&[x, k]);
        let shape = geom.out_shape().to_vec();
        Ok(self.push(Op::Conv2d { x: x.0, k: k.0, geom }, shape, out, rg))
    }

    // ---- activations and normalization ----

    /// PReLU with one learned slope per channel; the subgradient at 0 takes
    /// the positive branch.
    pub fn prelu(&mut self, x: Value, slope: Value) -> Result<Value> {
        let [_, c, _, _] = self.rank4(x, "prelu input")?;
        if self.node(slope).shape != [c] {
            return Err(Error::shape(format!(
                "prelu slope shape {:?} for {c} channels",
                self.node(slope).shape
            )));
        }
        let (xd, sd) = (&self.node(x).data, &self.node(slope).data);
        let plane = self.node(x).data.len() / (self.node(x).shape[0] * c);
        let mut out = Vec::with_capacity(xd.len());
        for (i, &v) in xd.iter().enumerate() {
            let ch = (i / plane) % c;
            out.push(if v >= 0.0 { v } else { sd[ch] * v });
        }
        let rg = self.any_grad(&[x, slope]);
        let shape = self.node(x).shape.clone();
        Ok(self.push(Op::Prelu { x: x.0, slope: slope.0 }, shape, out, rg))
    }

    /// Batch normalization in training mode: normalizes with the biased batch
    /// statistics and returns them `(out, mean, var)` so callers can update
    /// running buffers.
    pub fn batch_norm_train(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        eps: f64,
    ) -> Result<(Value, Vec<f64>, Vec<f64>)> {
        let [n, c, h, w] = self.rank4(x, "batch_norm input")?;
        self.check_channel_param(gamma, c, "gamma")?;
        self.check_channel_param(beta, c, "beta")?;
        if eps <= 0.0 {
            return Err(Error::config(format!("batch_norm eps must be > 0, got {eps}")));
        }
        let m = (n * h * w) as f64;
        let xd = &self.node(x).data;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                let base = (ni * c + ch) * h * w;
                for &v in &xd[base..base + h * w] {
                    s += v;
                }
            }
            mean[ch] = s / m;
            let mut s2 = 0.0;
            for ni in 0..n {
                let base = (ni * c + ch) * h * w;
                for &v in &xd[base..base + h * w] {
                    let d = v - mean[ch];
                    s2 += d * d;
                }
            }
            var[ch] = s2 / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        let rg = self.any_grad(&[x, gamma, beta]);
        let shape = self.node(x).shape.clone();
        let v = self.push(
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean: mean.clone(), inv_std, train: true },
            shape,
            out,
            rg,
        );
        Ok((v, mean, var))
    }

    /// Batch normalization in inference mode, using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Value> {
        let [_, c, _, _] = self.rank4(x, "batch_norm input")?;
        self.check_channel_param(gamma, c, "gamma")?;
        self.check_channel_param(beta, c, "beta")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(format!(
                "running stats of lengths {}/{} for {c} channels",
                running_mean.len(),
                running_var.len()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::config(format!("batch_norm eps must be > 0, got {eps}")));
        }
        if let Some(v) = running_var.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::NonFinite(format!("running variance {v}")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, running_mean, &inv_std);
        let rg = self.any_grad(&[x, gamma, beta]);
        let shape = self.node(x).shape.clone();
        Ok(self.push(
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: running_mean.to_vec(),
                inv_std,
                train: false,
            },
            shape,
            out,
            rg,
        ))
    }

    fn bn_apply(&self, x: Value, gamma: Value, beta: Value, mean: &[f64], inv_std: &[f64]) -> Vec<f64> {
        let shape = &self.node(x).shape;
        let (n, c) = (shape[0], shape[1]);
        let plane = shape[2] * shape[3];
        let xd = &self.node(x).data;
        let (gd, bd) = (&self.node(gamma).data, &self.node(beta).data);
        let mut out = Vec::with_capacity(xd.len());
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * plane;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                out.extend(xd[base..base + plane].iter().map(|&v| g * ((v - mu) * is) + b));
            }
        }
        out
    }

    /// Global average pooling: `[n, c, h, w] -> [n, c]`.
    pub fn gap(&mut self, x: Value) -> Result<Value> {
        let [n, c, h, w] = self.rank4(x, "gap input")?;
        let plane = (h * w) as f64;
        let xd = &self.node(x).data;
        let mut out = Vec::with_capacity(n * c);
        for chunk in xd.chunks_exact(h * w) {
            out.push(chunk.iter().sum::<f64>() / plane);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::Gap(x.0), vec![n, c], out, rg))
    }

    // ---- wavelets and pooling ----

    /// One orthonormal Haar subband: `[n, c, h, w] -> [n, c, h/2, w/2]`.
    /// Height and width must be even.
    pub fn haar(&mut self, x: Value, band: Band) -> Result<Value> {
        let [n, c, h, w] = self.even_spatial(x, "haar input")?;
        let taps = band.taps();
        let xd = &self.node(x).data;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in xd.chunks_exact(h * w) {
            for i in 0..oh {
                let top = &plane[2 * i * w..][..w];
                let bot = &plane[(2 * i + 1) * w..][..w];
                for j in 0..ow {
                    out.push(
                        taps[0] * top[2 * j]
                            + taps[1] * top[2 * j + 1]
                            + taps[2] * bot[2 * j]
                            + taps[3] * bot[2 * j + 1],
                    );
                }
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::Haar { x: x.0, band }, vec![n, c, oh, ow], out, rg))
    }

    /// Reassembles the full-resolution signal from its four Haar subbands.
    pub fn haar_inverse(&mut self, ll: Value, lh: Value, hl: Value, hh: Value) -> Result<Value> {
        let shape = self.node(ll).shape.clone();
        for (v, name) in [(lh, "lh"), (hl, "hl"), (hh, "hh")] {
            if self.node(v).shape != shape {
                return Err(Error::shape(format!(
                    "subband {name} shape {:?} differs from ll {:?}",
                    self.node(v).shape, shape
                )));
            }
        }
        let [n, c, sh, sw] = self.rank4(ll, "haar_inverse input")?;
        let (h, w) = (sh * 2, sw * 2);
        let mut out = vec![0.0; n * c * h * w];
        for (band, v) in Band::ALL.iter().zip([ll, lh, hl, hh]) {
            let taps = band.taps();
            let bd = &self.node(v).data;
            for (plane_idx, plane) in bd.chunks_exact(sh * sw).enumerate() {
                let out_plane = &mut out[plane_idx * h * w..][..h * w];
                for i in 0..sh {
                    for j in 0..sw {
                        let s = plane[i * sw + j];
                        out_plane[2 * i * w + 2 * j] += taps[0] * s;
                        out_plane[2 * i * w + 2 * j + 1] += taps[1] * s;
                        out_plane[(2 * i + 1) * w + 2 * j] += taps[2] * s;
                        out_plane[(2 * i + 1) * w + 2 * j + 1] += taps[3] * s;
                    }
                }
            }
        }
        let rg = self.any_grad(&[ll, lh, hl, hh]);
        Ok(self.push(
            Op::HaarInverse { ll: ll.0, lh: lh.0, hl: hl.0, hh: hh.0 },
            vec![n, c, h, w],
            out,
            rg,
        ))
    }

    /// 2x2 average pooling scaled by `scale`. With `scale = 2` this equals
    /// the Haar LL subband bit-for-bit (both halve an identically-ordered
    /// 2x2 sum, and scaling by powers of two commutes with rounding).
    pub fn avg_pool2_scaled(&mut self, x: Value, scale: f64) -> Result<Value> {
        finite_scalar(scale, "pool scale")?;
        let [n, c, h, w] = self.even_spatial(x, "avg_pool2 input")?;
        let factor = scale * 0.25;
        let xd = &self.node(x).data;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in xd.chunks_exact(h * w) {
            for i in 0..oh {
                let top = &plane[2 * i * w..][..w];
                let bot = &plane[(2 * i + 1) * w..][..w];
                for j in 0..ow {
                    let s = top[2 * j] + top[2 * j + 1] + bot[2 * j] + bot[2 * j + 1];
                    out.push(s * factor);
                }
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::AvgPool2 { x: x.0, scale }, vec![n, c, oh, ow], out, rg))
    }

    // ---- reductions and losses ----

    /// Sum of all elements, as a `[1]` scalar node.
    pub fn sum(&mut self, x: Value) -> Result<Value> {
        let s = self.node(x).data.iter().sum();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::Sum(x.0), vec![1], vec![s], rg))
    }

    /// Row-wise log-softmax over `[n, k]`, computed with max subtraction.
    pub fn log_softmax(&mut self, x: Value) -> Result<Value> {
        let &[_, k] = &self.rank2(x, "log_softmax input")?[..] else { unreachable!() };
        let xd = &self.node(x).data;
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let rg = self.node(x).requires_grad;
        let shape = self.node(x).shape.clone();
        Ok(self.push(Op::LogSoftmax(x.0), shape, out, rg))
    }

    /// Picks `x[i, labels[i]]` per row: `[n, k] -> [n]`.
    pub fn gather_target(&mut self, x: Value, labels: &[usize]) -> Result<Value> {
        let &[n, k] = &self.rank2(x, "gather_target input")?[..] else { unreachable!() };
        if labels.len() != n {
            return Err(Error::Invalid(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
        }
        let xd = &self.node(x).data;
        let out: Vec<f64> = labels.iter().enumerate().map(|(i, &l)| xd[i * k + l]).collect();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::GatherTarget { x: x.0, labels: labels.to_vec() }, vec![n], out, rg))
    }

    /// Additive-angular-margin transform on cosine logits: the target-class
    /// entry becomes `cos(theta + margin)`, or `cos(theta) - margin*sin(margin)`
    /// when `theta + margin` would exceed pi. Cosines are clamped to
    /// `[-COS_CLAMP, COS_CLAMP]` before the angle is recovered.
    pub fn arc_margin(&mut self, cos: Value, labels: &[usize], margin: f64) -> Result<Value> {
        let &[n, k] = &self.rank2(cos, "arc_margin input")?[..] else { unreachable!() };
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(Error::config(format!("margin {margin} outside [0, pi/2)")));
        }
        if labels.len() != n {
            return Err(Error::Invalid(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
        }
        let (cos_m, sin_m) = (margin.cos(), margin.sin());
        let xd = &self.node(cos).data;
        let mut out = xd.clone();
        for (i, &l) in labels.iter().enumerate() {
            let c = xd[i * k + l].clamp(-COS_CLAMP, COS_CLAMP);
            out[i * k + l] = if c >= -cos_m {
                // cos(theta + m) via the angle-addition identity.
                c * cos_m - (1.0 - c * c).sqrt() * sin_m
            } else {
                c - margin * sin_m
            };
        }
        let rg = self.node(cos).requires_grad;
        Ok(self.push(
            Op::ArcMargin { cos: cos.0, labels: labels.to_vec(), margin },
            vec![n, k],
            out,
            rg,
        ))
    }

    /// L2-normalizes each row of `[n, d]`. Zero rows are an error.
    pub fn row_normalize(&mut self, x: Value) -> Result<Value> {
        let &[_, d] = &self.rank2(x, "row_normalize input")?[..] else { unreachable!() };
        let xd = &self.node(x).data;
        let mut inv_norms = Vec::with_capacity(xd.len() / d);
        let mut out = Vec::with_capacity(xd.len());
        for (i, row) in xd.chunks_exact(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 0.0 || !norm.is_finite() {
                return Err(Error::NonFinite(format!("row {i} has norm {norm}")));
            }
            let inv = 1.0 / norm;
            inv_norms.push(inv);
            out.extend(row.iter().map(|v| v * inv));
        }
        let rg = self.node(x).requires_grad;
        let shape = self.node(x).shape.clone();
        Ok(self.push(Op::RowNormalize { x: x.0, inv_norms }, shape, out, rg))
    }

    /// L2-normalizes each column of `[d, k]`. Zero columns are an error.
    pub fn col_normalize(&mut self, x: Value) -> Result<Value> {
        let &[d, k] = &self.rank2(x, "col_normalize input")?[..] else { unreachable!() };
        let xd = &self.node(x).data;
        let mut inv_norms = Vec::with_capacity(k);
        for j in 0..k {
            let norm = (0..d).map(|i| xd[i * k + j] * xd[i * k + j]).sum::<f64>().sqrt();
            if norm <= 0.0 || !norm.is_finite() {
                return Err(Error::NonFinite(format!("column {j} has norm {norm}")));
            }
            inv_norms.push(1.0 / norm);
        }
        let out: Vec<f64> = xd
            .iter()
            .enumerate()
            .map(|(idx, &v)| v * inv_norms[idx % k])
            .collect();
        let rg = self.node(x).requires_grad;
        let shape = self.node(x).shape.clone();
        Ok(self.push(Op::ColNormalize { x: x.0, inv_norms }, shape, out, rg))
    }

    /// Copies a value out of the gradient flow.
    pub fn detach(&mut self, x: Value) -> Value {
        let shape = self.node(x).shape.clone();
        let data = self.node(x).data.clone();
        self.push(Op::Detach, shape, data, false)
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
    /// into every node reachable from `loss` that requires gradients. A graph
    /// supports exactly one backward pass.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; rebuild the forward pass first".into(),
            ));
        }
        let n = self.node(loss);
        if n.data.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        if !n.requires_grad {
            return Err(Error::Graph(
                "loss does not depend on any tensor that requires gradients".into(),
            ));
        }
        if !n.data[0].is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", n.data[0])));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize) {
        let (left, right) = self.nodes.split_at_mut(i);
        let node = &right[0];
        let g = node.grad.as_deref().expect("checked by caller");
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(left, *a, g);
                accumulate(left, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(left, *a, g);
                accumulate_owned(left, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (left[*a].data.clone(), left[*b].data.clone());
                accumulate_owned(left, *a, zip_map(g, &bd, |gv, bv| gv * bv));
                accumulate_owned(left, *b, zip_map(g, &ad, |gv, av| gv * av));
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate_owned(left, *x, g.iter().map(|v| c * v).collect());
            }
            Op::Shift(x) => accumulate(left, *x, g),
            Op::MatMul(a, b) => {
                let (n, d) = (left[*a].shape[0], left[*a].shape[1]);
                let k = left[*b].shape[1];
                let (ad, bd) = (left[*a].data.clone(), left[*b].data.clone());
                if left[*a].requires_grad {
                    let mut da = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            da[i * d + j] = conv::dot(&g[i * k..][..k], &bd[j * k..][..k]);
                        }
                    }
                    accumulate_owned(left, *a, da);
                }
                if left[*b].requires_grad {
                    let mut db = vec![0.0; d * k];
                    for j in 0..d {
                        let row = &mut db[j * k..][..k];
                        for i in 0..n {
                            let av = ad[i * d + j];
                            for (o, gv) in row.iter_mut().zip(&g[i * k..][..k]) {
                                *o += av * gv;
                            }
                        }
                    }
                    accumulate_owned(left, *b, db);
                }
            }
            Op::Bias(x, b) => {
                let k = left[*b].data.len();
                if left[*b].requires_grad {
                    let mut db = vec![0.0; k];
                    for row in g.chunks_exact(k) {
                        for (o, gv) in db.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                    accumulate_owned(left, *b, db);
                }
                accumulate(left, *x, g);
            }
            Op::Conv2d { x, k, geom } => {
                let geom = *geom;
                let (xd, kd) = (left[*x].data.clone(), left[*k].data.clone());
                if left[*x].requires_grad {
                    let mut dx = vec![0.0; xd.len()];
                    conv::backward_input(g, &kd, &geom, &mut dx);
                    accumulate_owned(left, *x, dx);
                }
                if left[*k].requires_grad {
                    let mut dk = vec![0.0; kd.len()];
                    conv::backward_kernel(g, &xd, &geom, &mut dk);
                    accumulate_owned(left, *k, dk);
                }
            }
            Op::Prelu { x, slope } => {
                let xd = left[*x].data.clone();
                let sd = left[*slope].data.clone();
                let c = sd.len();
                let plane = xd.len() / (left[*x].shape[0] * c);
                if left[*x].requires_grad {
                    let dx: Vec<f64> = xd
                        .iter()
                        .zip(g)
                        .enumerate()
                        .map(|(i, (&v, &gv))| if v >= 0.0 { gv } else { sd[(i / plane) % c] * gv })
                        .collect();
                    accumulate_owned(left, *x, dx);
                }
                if left[*slope].requires_grad {
                    let mut ds = vec![0.0; c];
                    for (i, (&v, &gv)) in xd.iter().zip(g).enumerate() {
                        if v < 0.0 {
                            ds[(i / plane) % c] += v * gv;
                        }
                    }
                    accumulate_owned(left, *slope, ds);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let train = *train;
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let xd = left[*x].data.clone();
                let gd = left[*gamma].data.clone();
                let shape = left[*x].shape.clone();
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let m = (n * plane) as f64;

                // Per-channel sums of g and g * x_hat.
                let mut s1 = vec![0.0; c];
                let mut s2 = vec![0.0; c];
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * plane;
                        for idx in base..base + plane {
                            let xh = (xd[idx] - mean[ch]) * inv_std[ch];
                            s1[ch] += g[idx];
                            s2[ch] += g[idx] * xh;
                        }
                    }
                }
                if left[*beta].requires_grad {
                    accumulate(left, *beta, &s1);
                }
                if left[*gamma].requires_grad {
                    accumulate(left, *gamma, &s2);
                }
                if left[*x].requires_grad {
                    let mut dx = vec![0.0; xd.len()];
                    for ni in 0..n {
                        for ch in 0..c {
                            let base = (ni * c + ch) * plane;
                            let scale = gd[ch] * inv_std[ch];
                            if train {
                                let (m1, m2) = (s1[ch] / m, s2[ch] / m);
                                for idx in base..base + plane {
                                    let xh = (xd[idx] - mean[ch]) * inv_std[ch];
                                    dx[idx] = scale * (g[idx] - m1 - xh * m2);
                                }
                            } else {
                                for idx in base..base + plane {
                                    dx[idx] = scale * g[idx];
                                }
                            }
                        }
                    }
                    accumulate_owned(left, *x, dx);
                }
            }
            Op::Gap(x) => {
                let shape = left[*x].shape.clone();
                let plane = shape[2] * shape[3];
                let inv = 1.0 / plane as f64;
                let mut dx = Vec::with_capacity(left[*x].data.len());
                for &gv in g {
                    dx.extend(std::iter::repeat(gv * inv).take(plane));
                }
                accumulate_owned(left, *x, dx);
            }
            Op::Haar { x, band } => {
                let taps = band.taps();
                let shape = left[*x].shape.clone();
                let (h, w) = (shape[2], shape[3]);
                let (sh, sw) = (h / 2, w / 2);
                let mut dx = vec![0.0; left[*x].data.len()];
                for (plane_idx, gp) in g.chunks_exact(sh * sw).enumerate() {
                    let dx_plane = &mut dx[plane_idx * h * w..][..h * w];
                    for i in 0..sh {
                        for j in 0..sw {
                            let gv = gp[i * sw + j];
                            dx_plane[2 * i * w + 2 * j] += taps[0] * gv;
                            dx_plane[2 * i * w + 2 * j + 1] += taps[1] * gv;
                            dx_plane[(2 * i + 1) * w + 2 * j] += taps[2] * gv;
                            dx_plane[(2 * i + 1) * w + 2 * j + 1] += taps[3] * gv;
                        }
                    }
                }
                accumulate_owned(left, *x, dx);
            }
            Op::HaarInverse { ll, lh, hl, hh } => {
                let shape = left[*ll].shape.clone();
                let (sh, sw) = (shape[2], shape[3]);
                let (h, w) = (sh * 2, sw * 2);
                for (band, &src) in Band::ALL.iter().zip([ll, lh, hl, hh].iter()) {
                    if !left[*src].requires_grad {
                        continue;
                    }
                    let taps = band.taps();
                    let mut db = vec![0.0; left[*src].data.len()];
                    for (plane_idx, dbp) in db.chunks_exact_mut(sh * sw).enumerate() {
                        let gp = &g[plane_idx * h * w..][..h * w];
                        for i in 0..sh {
                            for j in 0..sw {
                                dbp[i * sw + j] = taps[0] * gp[2 * i * w + 2 * j]
                                    + taps[1] * gp[2 * i * w + 2 * j + 1]
                                    + taps[2] * gp[(2 * i + 1) * w + 2 * j]
                                    + taps[3] * gp[(2 * i + 1) * w + 2 * j + 1];
                            }
                        }
                    }
                    accumulate_owned(left, *src, db);
                }
            }
            Op::AvgPool2 { x, scale } => {
                let factor = scale * 0.25;
                let shape = left[*x].shape.clone();
                let (h, w) = (shape[2], shape[3]);
                let (sh, sw) = (h / 2, w / 2);
                let mut dx = vec![0.0; left[*x].data.len()];
                for (plane_idx, gp) in g.chunks_exact(sh * sw).enumerate() {
                    let dx_plane = &mut dx[plane_idx * h * w..][..h * w];
                    for i in 0..sh {
                        for j in 0..sw {
                            let gv = gp[i * sw + j] * factor;
                            dx_plane[2 * i * w + 2 * j] += gv;
                            dx_plane[2 * i * w + 2 * j + 1] += gv;
                            dx_plane[(2 * i + 1) * w + 2 * j] += gv;
                            dx_plane[(2 * i + 1) * w + 2 * j + 1] += gv;
                        }
                    }
                }
                accumulate_owned(left, *x, dx);
            }
            Op::Sum(x) => {
                let gv = g[0];
                accumulate_owned(left, *x, vec![gv; left[*x].data.len()]);
            }
            Op::LogSoftmax(x) => {
                let k = node.shape[1];
                let y = &node.data;
                let mut dx = Vec::with_capacity(y.len());
                for (grow, yrow) in g.chunks_exact(k).zip(y.chunks_exact(k)) {
                    let gsum: f64 = grow.iter().sum();
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| gv - yv.exp() * gsum));
                }
                accumulate_owned(left, *x, dx);
            }
            Op::GatherTarget { x, labels } => {
                let k = left[*x].shape[1];
                let mut dx = vec![0.0; left[*x].data.len()];
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] += g[i];
                }
                accumulate_owned(left, *x, dx);
            }
            Op::ArcMargin { cos, labels, margin } => {
                let k = node.shape[1];
                let (cos_m, sin_m) = (margin.cos(), margin.sin());
                let margin = *margin;
                let cd = left[*cos].data.clone();
                let mut dx = g.to_vec();
                for (i, &l) in labels.iter().enumerate() {
                    let raw = cd[i * k + l];
                    let c = raw.clamp(-COS_CLAMP, COS_CLAMP);
                    let pass = raw.abs() <= COS_CLAMP;
                    let d = if !pass {
                        0.0
                    } else if c >= -cos_m {
                        // d/dc [c*cos_m - sqrt(1 - c^2)*sin_m]
                        cos_m + c / (1.0 - c * c).sqrt() * sin_m
                    } else {
                        let _ = margin;
                        1.0
                    };
                    dx[i * k + l] = g[i * k + l] * d;
                }
                accumulate_owned(left, *cos, dx);
            }
            Op::RowNormalize { x, inv_norms } => {
                let d = node.shape[1];
                let y = &node.data;
                let mut dx = Vec::with_capacity(y.len());
                for ((grow, yrow), &inv) in
                    g.chunks_exact(d).zip(y.chunks_exact(d)).zip(inv_norms)
                {
                    let dot = conv::dot(grow, yrow);
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| inv * (gv - yv * dot)));
                }
                accumulate_owned(left, *x, dx);
            }
            Op::ColNormalize { x, inv_norms } => {
                let (d, k) = (node.shape[0], node.shape[1]);
                let y = &node.data;
                let mut dx = vec![0.0; y.len()];
                for j in 0..k {
                    let mut dot = 0.0;
                    for i in 0..d {
                        dot += g[i * k + j] * y[i * k + j];
                    }
                    let inv = inv_norms[j];
                    for i in 0..d {
                        dx[i * k + j] = inv * (g[i * k + j] - y[i * k + j] * dot);
                    }
                }
                accumulate_owned(left, *x, dx);
            }
            Op::Detach => {}
        }
    }

    // ---- internals ----

    fn node(&self, v: Value) -> &Node {
        &self.nodes[v.0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Value {
        self.nodes.push(Node { op, shape, data, grad: None, requires_grad });
        Value(self.nodes.len() - 1)
    }

    fn push_like(&mut self, op: Op, like: Value, data: Vec<f64>) -> Value {
        let shape = self.node(like).shape.clone();
        let rg = match &op {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.nodes[*a].requires_grad || self.nodes[*b].requires_grad
            }
            Op::Scale(x, _) | Op::Shift(x) => self.nodes[*x].requires_grad,
            _ => unreachable!("push_like is only used by elementwise ops"),
        };
        self.push(op, shape, data, rg)
    }

    fn any_grad(&self, vs: &[Value]) -> bool {
        vs.iter().any(|v| self.node(*v).requires_grad)
    }

    fn binary_same_shape(&self, a: Value, b: Value, what: &str) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::shape(format!(
                "{what} operands {:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        Ok(())
    }

    fn rank2(&self, v: Value, what: &str) -> Result<Vec<usize>> {
        let s = &self.node(v).shape;
        if s.len() != 2 {
            return Err(Error::shape(format!("{what} must be rank 2, got {s:?}")));
        }
        Ok(s.clone())
    }

    fn rank4(&self, v: Value, what: &str) -> Result<[usize; 4]> {
        match self.node(v).shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::shape(format!("{what} must be rank 4, got {s:?}"))),
        }
    }

    fn even_spatial(&self, v: Value, what: &str) -> Result<[usize; 4]> {
        let [n, c, h, w] = self.rank4(v, what)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "{what} needs even spatial extents, got {h}x{w}"
            )));
        }
        Ok([n, c, h, w])
    }

    fn check_channel_param(&self, v: Value, c: usize, what: &str) -> Result<()> {
        if self.node(v).shape != [c] {
            return Err(Error::shape(format!(
                "{what} shape {:?} for {c} channels",
                self.node(v).shape
            )));
        }
        Ok(())
    }
}

fn accumulate(left: &mut [Node], idx: usize, delta: &[f64]) {
    let node = &mut left[idx];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => {
            for (gv, dv) in g.iter_mut().zip(delta) {
                *gv += dv;
            }
        }
        None => node.grad = Some(delta.to_vec()),
    }
}

fn accumulate_owned(left: &mut [Node], idx: usize, delta: Vec<f64>) {
    let node = &mut left[idx];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => {
            for (gv, dv) in g.iter_mut().zip(&delta) {
                *gv += dv;
            }
        }
        None => node.grad = Some(delta),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn finite_scalar(c: f64, what: &str) -> Result<()> {
    if !c.is_finite() {
        return Err(Error::NonFinite(format!("{what} {c}")));
    }
    Ok(())
}

/// Finite-difference verification of the tape.
pub mod grad_check {
    use super::{Graph, Value};
    use crate::error::{Error, Result};
    use crate::tensor::Tensor;

    /// Central-difference step.
    pub const H: f64 = 1e-5;

    /// Builds the scalar loss twice per perturbed element and compares the
    /// analytic leaf gradients against `(f(x+h) - f(x-h)) / 2h`. Returns the
    /// worst relative error `|a - n| / max(|a|, |n|, 1)` over all elements.
    pub fn max_rel_err(
        inputs: &[Tensor],
        build: &dyn Fn(&mut Graph, &[Value]) -> Result<Value>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Value> = inputs
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad()))
            .collect();
        let loss = build(&mut g, &leaves)?;
        g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = leaves
            .iter()
            .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.data(v).len()]))
            .collect();

        let eval = |perturbed: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let leaves: Vec<Value> =
                perturbed.iter().map(|t| g.leaf(t.clone().with_requires_grad())).collect();
            let loss = build(&mut g, &leaves)?;
            g.item(loss)
        };

        let mut worst = 0.0f64;
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (ti, t) in inputs.iter().enumerate() {
            for e in 0..t.numel() {
                let orig = t.data()[e];
                work[ti].data_mut()[e] = orig + H;
                let plus = eval(&work)?;
                work[ti].data_mut()[e] = orig - H;
                let minus = eval(&work)?;
                work[ti].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * H);
                let a = analytic[ti][e];
                if !numeric.is_finite() || !a.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient check hit {a} vs {numeric}"
                    )));
                }
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                worst = worst.max(rel);
            }
        }
        Ok(worst)
    }
}
