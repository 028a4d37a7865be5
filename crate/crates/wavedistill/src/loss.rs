//! Training losses: additive-angular-margin classification, temperature-
//! scaled distillation KL, and low-band feature matching.
//!
//! The total objective is `arc + lambda1 * kl + lambda2 * wavesim`. All three
//! terms are plain scalar graph nodes, so any can be dropped or reweighted,
//! and a weight of exactly zero contributes exactly nothing to the gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Band, Graph, Value};
use crate::tensor::Tensor;

/// ArcFace hyperparameters: `scale` stretches cosine logits, `margin` is the
/// additive angle (radians) applied to the target class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcFaceConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for ArcFaceConfig {
    /// Desk-scale defaults. The canonical large-scale setting is `s = 64`;
    /// with 20 classes and 64-d embeddings a gentler `s = 16` keeps early
    /// softmax gradients healthy.
    fn default() -> Self {
        ArcFaceConfig { scale: 16.0, margin: 0.5 }
    }
}

impl ArcFaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::config(format!("arcface scale {} must be > 0", self.scale)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::config(format!(
                "arcface margin {} outside [0, pi/2)",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Distillation weights: `temperature` softens both logit sets, `lambda1`
/// weighs the KL term and `lambda2` the wavelet-similarity term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { temperature: 4.0, lambda1: 1.0, lambda2: 0.05 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Scaled cosine similarities between embedding rows and class directions:
/// `scale * normalize_rows(embedding) . normalize_cols(head_weight)`.
pub fn cosine_logits(g: &mut Graph, embedding: Value, head_weight: Value, scale: f64) -> Result<Value> {
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::config(format!("logit scale {scale} must be > 0")));
    }
    let e = g.row_normalize(embedding)?;
    let w = g.col_normalize(head_weight)?;
    let cos = g.matmul(e, w)?;
    g.scale(cos, scale)
}

/// Mean negative target log-probability of `logits` rows.
pub fn cross_entropy(g: &mut Graph, logits: Value, labels: &[usize]) -> Result<Value> {
    let n = g.shape(logits)[0];
    let lp = g.log_softmax(logits)?;
    let target = g.gather_target(lp, labels)?;
    let s = g.sum(target)?;
    g.scale(s, -1.0 / n as f64)
}

/// ArcFace: cross-entropy over scaled cosines after pushing the target-class
/// angle out by `margin`. Invariant to positive rescaling of embeddings.
pub fn arcface_loss(
    g: &mut Graph,
    embedding: Value,
    head_weight: Value,
    labels: &[usize],
    cfg: &ArcFaceConfig,
) -> Result<Value> {
    cfg.validate()?;
    let e = g.row_normalize(embedding)?;
    let w = g.col_normalize(head_weight)?;
    let cos = g.matmul(e, w)?;
    let margined = g.arc_margin(cos, labels, cfg.margin)?;
    let logits = g.scale(margined, cfg.scale)?;
    cross_entropy(g, logits, labels)
}

/// Temperature-scaled distillation KL, Hinton-style:
/// `(T^2 / n) * sum_rows KL(softmax(z_t / T) || softmax(z_s / T))`.
///
/// Teacher logits enter as plain data, so no gradient ever reaches the
/// teacher. The value includes the teacher-entropy constant, making it a true
/// KL: non-negative, and zero exactly when the softened distributions match.
pub fn distill_kl_loss(
    g: &mut Graph,
    teacher_logits: &Tensor,
    student_logits: Value,
    temperature: f64,
) -> Result<Value> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::config(format!("temperature {temperature} must be > 0")));
    }
    let shape = teacher_logits.shape();
    if shape.len() != 2 || g.shape(student_logits) != shape {
        return Err(Error::shape(format!(
            "teacher logits {:?} vs student logits {:?}",
            shape,
            g.shape(student_logits)
        )));
    }
    let (n, k) = (shape[0], shape[1]);

    // Teacher side on the host: softened probabilities and their log.
    let mut probs = Vec::with_capacity(n * k);
    let mut teacher_term = 0.0; // sum of p * log p over all rows
    for row in teacher_logits.data().chunks_exact(k) {
        let max = row.iter().map(|v| v / temperature).fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + row
                .iter()
                .map(|v| (v / temperature - max).exp())
                .sum::<f64>()
                .ln();
        for &z in row {
            let lp = z / temperature - lse;
            let p = lp.exp();
            probs.push(p);
            teacher_term += p * lp;
        }
    }

    let coeff = temperature * temperature / n as f64;
    let p_t = g.constant(Tensor::new(&[n, k], probs)?);
    let zs = g.scale(student_logits, 1.0 / temperature)?;
    let lp_s = g.log_softmax(zs)?;
    let cross = g.mul(p_t, lp_s)?;
    let s = g.sum(cross)?;
    let neg_cross = g.scale(s, -coeff)?;
    g.shift(neg_cross, coeff * teacher_term)
}

/// Low-band feature matching: for each provided stage pair, the squared
/// distance between the Haar LL bands of teacher and student features,
/// summed over elements and averaged over the batch. Teacher stages are
/// detached, so only the student receives gradients.
pub fn wavesim_loss(g: &mut Graph, teacher_stages: &[Value], student_stages: &[Value]) -> Result<Value> {
    if teacher_stages.is_empty() || teacher_stages.len() != student_stages.len() {
        return Err(Error::Invalid(format!(
            "wavesim needs matching non-empty stage lists, got {} vs {}",
            teacher_stages.len(),
            student_stages.len()
        )));
    }
    let n = g.shape(teacher_stages[0])[0];
    let mut total: Option<Value> = None;
    for (i, (&t, &s)) in teacher_stages.iter().zip(student_stages).enumerate() {
        if g.shape(t) != g.shape(s) {
            return Err(Error::shape(format!(
                "stage {i}: teacher {:?} vs student {:?}",
                g.shape(t),
                g.shape(s)
            )));
        }
        if g.shape(t)[0] != n {
            return Err(Error::shape(format!("stage {i} batch differs from stage 0")));
        }
        let t = g.detach(t);
        let t_ll = g.haar(t, Band::Ll)?;
        let s_ll = g.haar(s, Band::Ll)?;
        let d = g.sub(t_ll, s_ll)?;
        let sq = g.mul(d, d)?;
        let sum = g.sum(sq)?;
        total = Some(match total {
            Some(acc) => g.add(acc, sum)?,
            None => sum,
        });
    }
    g.scale(total.expect("at least one stage"), 1.0 / n as f64)
}

/// `arc + lambda1 * kl + lambda2 * wavesim`; absent terms contribute nothing.
/// Rejects non-finite terms before they can poison the backward pass.
pub fn total_loss(
    g: &mut Graph,
    arc: Value,
    kl: Option<Value>,
    wavesim: Option<Value>,
    cfg: &DistillConfig,
) -> Result<Value> {
    cfg.validate()?;
    for (name, v) in [("arc", Some(arc)), ("kl", kl), ("wavesim", wavesim)] {
        if let Some(v) = v {
            let val = g.item(v)?;
            if !val.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss is {val}")));
            }
        }
    }
    let mut out = arc;
    if let Some(kl) = kl {
        let w = g.scale(kl, cfg.lambda1)?;
        out = g.add(out, w)?;
    }
    if let Some(ws) = wavesim {
        let w = g.scale(ws, cfg.lambda2)?;
        out = g.add(out, w)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = StreamKey::new(seed, 0, 0).rng();
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn kl_oracle_unit_temperature() {
        // z_t = [1, 0], z_s = [0, 1], T = 1, n = 1: the value is tanh(1/2).
        let mut g = Graph::new();
        let zt = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let zs = g.constant(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
        let kl = distill_kl_loss(&mut g, &zt, zs, 1.0).unwrap();
        let v = g.item(kl).unwrap();
        assert!((v - 0.5f64.tanh()).abs() < 1e-12, "{v}");
        assert!((v - 0.46212).abs() < 1e-5);
    }

    #[test]
    fn kl_matches_independent_reference() {
        // Straightforward reference: explicit softmax, explicit sum.
        let reference = |zt: &[f64], zs: &[f64], k: usize, t: f64| -> f64 {
            let soft = |z: &[f64]| {
                let e: Vec<f64> = z.iter().map(|v| (v / t).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
            };
            let n = zt.len() / k;
            let mut total = 0.0;
            for r in 0..n {
                let (p, q) = (soft(&zt[r * k..][..k]), soft(&zs[r * k..][..k]));
                for j in 0..k {
                    total += p[j] * (p[j] / q[j]).ln();
                }
            }
            t * t * total / n as f64
        };
        let zt = rand_tensor(&[3, 5], 41, -2.0, 2.0);
        let zs_t = rand_tensor(&[3, 5], 42, -2.0, 2.0);
        for t in [1.0, 2.5, 4.0] {
            let mut g = Graph::new();
            let zs = g.constant(zs_t.clone());
            let kl = distill_kl_loss(&mut g, &zt, zs, t).unwrap();
            let got = g.item(kl).unwrap();
            let want = reference(zt.data(), zs_t.data(), 5, t);
            assert!((got - want).abs() < 1e-12, "T={t}: {got} vs {want}");
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_shifted_rows() {
        let zt = rand_tensor(&[4, 6], 43, -3.0, 3.0);
        // Student rows are teacher rows plus per-row constants: same softmax.
        let shifted: Vec<f64> = zt
            .data()
            .chunks_exact(6)
            .enumerate()
            .flat_map(|(i, row)| {
                let c = i as f64 * 0.7 - 1.0;
                row.iter().map(move |v| v + c).collect::<Vec<f64>>()
            })
            .collect();
        let mut g = Graph::new();
        let zs = g.constant(Tensor::new(&[4, 6], shifted).unwrap());
        let kl = distill_kl_loss(&mut g, &zt, zs, 2.0).unwrap();
        assert!(g.item(kl).unwrap().abs() < 1e-12);

        for seed in 50..55 {
            let other = rand_tensor(&[4, 6], seed, -3.0, 3.0);
            let mut g = Graph::new();
            let zs = g.constant(other);
            let kl = distill_kl_loss(&mut g, &zt, zs, 2.0).unwrap();
            assert!(g.item(kl).unwrap() > 0.0);
        }
    }

    #[test]
    fn kl_validates_inputs() {
        let zt = rand_tensor(&[2, 3], 44, -1.0, 1.0);
        let mut g = Graph::new();
        let zs = g.constant(rand_tensor(&[2, 4], 45, -1.0, 1.0));
        assert!(distill_kl_loss(&mut g, &zt, zs, 1.0).is_err());
        let zs = g.constant(rand_tensor(&[2, 3], 45, -1.0, 1.0));
        assert!(distill_kl_loss(&mut g, &zt, zs, 0.0).is_err());
        assert!(distill_kl_loss(&mut g, &zt, zs, -1.0).is_err());
    }

    #[test]
    fn arcface_zero_margin_equals_cross_entropy_on_scaled_cosines() {
        let emb = rand_tensor(&[4, 8], 46, -1.0, 1.0);
        let w = rand_tensor(&[8, 5], 47, -1.0, 1.0);
        let labels = [0usize, 3, 1, 4];
        let cfg = ArcFaceConfig { scale: 16.0, margin: 0.0 };

        let mut g = Graph::new();
        let (e, wv) = (g.constant(emb.clone()), g.constant(w.clone()));
        let arc = arcface_loss(&mut g, e, wv, &labels, &cfg).unwrap();
        let arc_v = g.item(arc).unwrap();

        let mut g2 = Graph::new();
        let (e2, w2) = (g2.constant(emb), g2.constant(w));
        let logits = cosine_logits(&mut g2, e2, w2, 16.0).unwrap();
        let ce = cross_entropy(&mut g2, logits, &labels).unwrap();
        let ce_v = g2.item(ce).unwrap();
        assert!((arc_v - ce_v).abs() < 1e-9, "{arc_v} vs {ce_v}");
    }

    #[test]
    fn arcface_is_invariant_to_embedding_rescaling() {
        let emb = rand_tensor(&[3, 8], 48, -1.0, 1.0);
        let w = rand_tensor(&[8, 4], 49, -1.0, 1.0);
        let labels = [2usize, 0, 3];
        let cfg = ArcFaceConfig::default();
        let value = |e: &Tensor| {
            let mut g = Graph::new();
            let (ev, wv) = (g.constant(e.clone()), g.constant(w.clone()));
            let l = arcface_loss(&mut g, ev, wv, &labels, &cfg).unwrap();
            g.item(l).unwrap()
        };
        let base = value(&emb);
        let scaled =
            Tensor::new(emb.shape(), emb.data().iter().map(|v| v * 37.5).collect()).unwrap();
        assert!((value(&scaled) - base).abs() < 1e-12);
    }

    #[test]
    fn margin_strictly_increases_the_loss() {
        let emb = rand_tensor(&[5, 8], 50, -1.0, 1.0);
        let w = rand_tensor(&[8, 6], 51, -1.0, 1.0);
        let labels = [0usize, 1, 2, 3, 4];
        let value = |m: f64| {
            let mut g = Graph::new();
            let (ev, wv) = (g.constant(emb.clone()), g.constant(w.clone()));
            let l = arcface_loss(&mut g, ev, wv, &labels, &ArcFaceConfig { scale: 16.0, margin: m })
                .unwrap();
            g.item(l).unwrap()
        };
        assert!(value(0.5) > value(0.2));
        assert!(value(0.2) > value(0.0));
    }

    #[test]
    fn wavesim_zero_for_identical_stages_and_closed_form_for_offsets() {
        let stage = rand_tensor(&[3, 4, 8, 8], 52, -1.0, 1.0);
        let mut g = Graph::new();
        let t = g.constant(stage.clone());
        let s = g.constant(stage.clone());
        let l = wavesim_loss(&mut g, &[t], &[s]).unwrap();
        assert_eq!(g.item(l).unwrap(), 0.0);

        // Student = teacher + c: every LL coefficient differs by exactly 2c,
        // so the loss is channels * (h/2) * (w/2) * (2c)^2.
        let c = 0.35;
        let offset =
            Tensor::new(stage.shape(), stage.data().iter().map(|v| v + c).collect()).unwrap();
        let mut g = Graph::new();
        let t = g.constant(stage);
        let s = g.constant(offset);
        let l = wavesim_loss(&mut g, &[t], &[s]).unwrap();
        let want = 4.0 * 4.0 * 4.0 * (2.0 * c) * (2.0 * c);
        assert!((g.item(l).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn wavesim_gradient_flows_only_into_the_student() {
        let t = rand_tensor(&[2, 2, 4, 4], 53, -1.0, 1.0).with_requires_grad();
        let s = rand_tensor(&[2, 2, 4, 4], 54, -1.0, 1.0).with_requires_grad();
        let mut g = Graph::new();
        let (tv, sv) = (g.leaf(t), g.leaf(s));
        let l = wavesim_loss(&mut g, &[tv], &[sv]).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(tv).is_none(), "teacher stage must stay detached");
        assert!(g.grad(sv).is_some());
    }

    #[test]
    fn wavesim_rejects_mismatched_stages() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
        let b = g.constant(Tensor::zeros(&[1, 2, 8, 8]).unwrap());
        assert!(wavesim_loss(&mut g, &[a], &[b]).is_err());
        assert!(wavesim_loss(&mut g, &[], &[]).is_err());
        assert!(wavesim_loss(&mut g, &[a, b], &[a]).is_err());
    }

    #[test]
    fn total_loss_composes_linearly() {
        let mut g = Graph::new();
        let arc = g.leaf(Tensor::scalar(1.25).unwrap().with_requires_grad());
        let kl = g.leaf(Tensor::scalar(0.5).unwrap().with_requires_grad());
        let ws = g.leaf(Tensor::scalar(2.0).unwrap().with_requires_grad());
        let cfg = DistillConfig { temperature: 4.0, lambda1: 1.0, lambda2: 0.05 };
        let total = total_loss(&mut g, arc, Some(kl), Some(ws), &cfg).unwrap();
        assert_eq!(g.item(total).unwrap(), 1.25 + 1.0 * 0.5 + 0.05 * 2.0);

        // Weighted gradients reach each term.
        g.backward(total).unwrap();
        assert_eq!(g.grad(arc).unwrap(), &[1.0]);
        assert_eq!(g.grad(kl).unwrap(), &[1.0]);
        assert_eq!(g.grad(ws).unwrap(), &[0.05]);
    }

    #[test]
    fn total_loss_with_zero_weights_is_bitwise_the_arc_term() {
        let mut g = Graph::new();
        let arc = g.leaf(Tensor::scalar(0.731).unwrap().with_requires_grad());
        let kl = g.leaf(Tensor::scalar(0.37).unwrap().with_requires_grad());
        let ws = g.leaf(Tensor::scalar(1.7).unwrap().with_requires_grad());
        let cfg = DistillConfig { temperature: 4.0, lambda1: 0.0, lambda2: 0.0 };
        let total = total_loss(&mut g, arc, Some(kl), Some(ws), &cfg).unwrap();
        assert_eq!(g.item(total).unwrap().to_bits(), 0.731f64.to_bits());
    }

    #[test]
    fn config_validation() {
        assert!(ArcFaceConfig { scale: 0.0, margin: 0.5 }.validate().is_err());
        assert!(ArcFaceConfig { scale: 16.0, margin: 1.6 }.validate().is_err());
        assert!(DistillConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { lambda1: -0.1, ..Default::default() }.validate().is_err());
        assert!(DistillConfig::default().validate().is_ok());
    }
}
