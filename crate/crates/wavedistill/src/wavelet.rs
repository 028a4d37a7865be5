//! Orthonormal 2-D Haar transform over `[n, c, h, w]` tensors.
//!
//! Analysis splits each 2x2 block into one approximation (LL) and three
//! detail coefficients (LH, HL, HH) with +-0.5 taps; the transform is
//! orthonormal, so synthesis from all four bands is exact and energy is
//! conserved. [`waveconv_downsample`] is the network's detail-rejecting
//! downsampler: it is literally the LL analysis op, so anything proven about
//! `dwt2_forward(..).ll` holds for the network path bit for bit.

use crate::error::Result;
use crate::graph::{Band, Graph, Value};
use crate::tensor::Tensor;

/// The four subbands of one analysis level, as graph values.
#[derive(Debug, Clone, Copy)]
pub struct Subbands {
    pub ll: Value,
    pub lh: Value,
    pub hl: Value,
    pub hh: Value,
}

/// One level of Haar analysis; spatial extents must be even.
pub fn dwt2_forward(g: &mut Graph, x: Value) -> Result<Subbands> {
    Ok(Subbands {
        ll: g.haar(x, Band::Ll)?,
        lh: g.haar(x, Band::Lh)?,
        hl: g.haar(x, Band::Hl)?,
        hh: g.haar(x, Band::Hh)?,
    })
}

/// Exact inverse of [`dwt2_forward`].
pub fn dwt2_inverse(g: &mut Graph, s: &Subbands) -> Result<Value> {
    g.haar_inverse(s.ll, s.lh, s.hl, s.hh)
}

/// LL-only downsampling: halves both spatial extents and discards the three
/// detail bands. Same code path as the `ll` field of [`dwt2_forward`].
pub fn waveconv_downsample(g: &mut Graph, x: Value) -> Result<Value> {
    g.haar(x, Band::Ll)
}

/// The four subbands as plain tensors, for pipelines without gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandTensors {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl SubbandTensors {
    /// Per-band sums of squares, ordered `[ll, lh, hl, hh]`.
    pub fn energies(&self) -> [f64; 4] {
        [
            energy(&self.ll),
            energy(&self.lh),
            energy(&self.hl),
            energy(&self.hh),
        ]
    }
}

/// Analysis on a plain tensor; runs the same graph ops on a throwaway tape.
pub fn analyze(x: &Tensor) -> Result<SubbandTensors> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let s = dwt2_forward(&mut g, xv)?;
    Ok(SubbandTensors {
        ll: g.to_tensor(s.ll),
        lh: g.to_tensor(s.lh),
        hl: g.to_tensor(s.hl),
        hh: g.to_tensor(s.hh),
    })
}

/// Synthesis on plain tensors.
pub fn synthesize(s: &SubbandTensors) -> Result<Tensor> {
    let mut g = Graph::new();
    let sub = Subbands {
        ll: g.constant(s.ll.clone()),
        lh: g.constant(s.lh.clone()),
        hl: g.constant(s.hl.clone()),
        hh: g.constant(s.hh.clone()),
    };
    let back = dwt2_inverse(&mut g, &sub)?;
    Ok(g.to_tensor(back))
}

/// Sum of squared elements.
pub fn energy(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}
