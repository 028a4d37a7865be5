//! Finite-difference verification of the reverse-mode tape: every building
//! block of the networks, plus the full composite loss, checked against
//! central differences.

use rand_distr::{Distribution, StandardNormal};
use wavedistill::graph::{grad_check, Graph, Value};
use wavedistill::loss::{arcface_loss, ArcFaceConfig};
use wavedistill::rng::StreamKey;
use wavedistill::tensor::Tensor;
use wavedistill::{Band, Result};

fn randn(shape: &[usize], stream: u64) -> Tensor {
    let mut rng = StreamKey::new(0xD1CE, stream, 0).rng();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape, data).unwrap()
}

fn check(name: &str, inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Value]) -> Result<Value>) {
    let err = grad_check::max_rel_err(inputs, build).unwrap();
    let verdict = if err < 1e-4 { "ok" } else { "FAIL" };
    println!("{name:<22} max rel err {err:.3e}  {verdict}");
}

fn main() {
    check("conv2d 3x3 pad 1", &[randn(&[2, 3, 6, 6], 1), randn(&[4, 3, 3, 3], 2)], &|g, v| {
        let y = g.conv2d(v[0], v[1], 1, 1)?;
        g.sum(y)
    });

    check("prelu", &[randn(&[2, 3, 4, 4], 3), randn(&[3], 4)], &|g, v| {
        let y = g.prelu(v[0], v[1])?;
        g.sum(y)
    });

    check("batch norm (train)", &[randn(&[4, 3, 5, 5], 5), randn(&[3], 6), randn(&[3], 7)], &|g, v| {
        let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });

    check("haar LL+HH", &[randn(&[2, 2, 8, 8], 8)], &|g, v| {
        let ll = g.haar(v[0], Band::Ll)?;
        let hh = g.haar(v[0], Band::Hh)?;
        let s1 = g.sum(ll)?;
        let hh2 = g.mul(hh, hh)?;
        let s2 = g.sum(hh2)?;
        g.add(s1, s2)
    });

    check("linear", &[randn(&[5, 7], 9), randn(&[7, 3], 10), randn(&[3], 11)], &|g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        g.sum(y)
    });

    let labels = [0usize, 2, 1, 3];
    let arc = ArcFaceConfig { scale: 16.0, margin: 0.5 };
    check("arcface loss", &[randn(&[4, 8], 12), randn(&[8, 4], 13)], &|g, v| {
        arcface_loss(g, v[0], v[1], &labels, &arc)
    });

    println!("\ncentral differences with h = {:.0e}", grad_check::H);
}
