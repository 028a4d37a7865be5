//! Low-level 2-D cross-correlation kernels used by the autodiff graph.
//!
//! Layouts are `x: [N, C, H, W]`, `k: [F, C, KH, KW]`, `out: [N, F, OH, OW]`,
//! all row-major. Padding is zero padding. Accumulation order is fixed by the
//! loop structure, so results are bit-identical across runs and thread counts
//! (parallelism only ever splits independent output regions).

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Resolved geometry of one convolution; constructing it performs all shape
/// validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], k_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = four(x_shape, "conv2d input")?;
        let [f, kc, kh, kw] = four(k_shape, "conv2d kernel")?;
        if kc != c {
            return Err(Error::shape(format!(
                "kernel expects {kc} input channels, input has {c}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { n, c, h, w, f, kh, kw, stride, pad, oh, ow })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.f, self.oh, self.ow]
    }

    /// Output-column range `[lo, hi)` whose input column `ow*stride + kw - pad`
    /// stays inside `[0, w)`.
    fn ow_range(&self, kw: usize) -> (usize, usize) {
        let lo = if kw >= self.pad {
            0
        } else {
            (self.pad - kw).div_ceil(self.stride)
        };
        if self.w + self.pad < kw + 1 {
            return (0, 0);
        }
        let hi = ((self.w - 1 + self.pad - kw) / self.stride + 1).min(self.ow);
        (lo.min(hi), hi)
    }

    /// Input row for `(oh, kh)`, if it falls inside the unpadded input.
    fn in_row(&self, oh: usize, kh: usize) -> Option<usize> {
        let ih = oh * self.stride + kh;
        if ih < self.pad {
            return None;
        }
        let ih = ih - self.pad;
        (ih < self.h).then_some(ih)
    }
}

/// `out[n,f] = sum_c x[n,c] (cross-)correlated with k[f,c]`.
pub fn forward(x: &[f64], k: &[f64], g: &ConvGeom, out: &mut [f64]) {
    debug_assert_eq!(out.len(), g.n * g.f * g.oh * g.ow);
    let per_n = g.f * g.oh * g.ow;
    out.par_chunks_mut(per_n).enumerate().for_each(|(n, out_n)| {
        let x_n = &x[n * g.c * g.h * g.w..][..g.c * g.h * g.w];
        for f in 0..g.f {
            let out_f = &mut out_n[f * g.oh * g.ow..][..g.oh * g.ow];
            for c in 0..g.c {
                let x_c = &x_n[c * g.h * g.w..][..g.h * g.w];
                let k_fc = &k[(f * g.c + c) * g.kh * g.kw..][..g.kh * g.kw];
                for oh in 0..g.oh {
                    let out_row = &mut out_f[oh * g.ow..][..g.ow];
                    for kh in 0..g.kh {
                        let Some(ih) = g.in_row(oh, kh) else { continue };
                        let x_row = &x_c[ih * g.w..][..g.w];
                        for kw in 0..g.kw {
                            let kv = k_fc[kh * g.kw + kw];
                            let (lo, hi) = g.ow_range(kw);
                            if g.stride == 1 && kw >= g.pad {
                                let off = kw - g.pad;
                                let xs = &x_row[lo + off..hi + off];
                                for (o, xv) in out_row[lo..hi].iter_mut().zip(xs) {
                                    *o += kv * xv;
                                }
                            } else {
                                for ow in lo..hi {
                                    out_row[ow] += kv * x_row[ow * g.stride + kw - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates `d loss / d x` into `dx` given the output gradient.
pub fn backward_input(gout: &[f64], k: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    debug_assert_eq!(dx.len(), g.n * g.c * g.h * g.w);
    let per_n = g.c * g.h * g.w;
    dx.par_chunks_mut(per_n).enumerate().for_each(|(n, dx_n)| {
        let g_n = &gout[n * g.f * g.oh * g.ow..][..g.f * g.oh * g.ow];
        for f in 0..g.f {
            let g_f = &g_n[f * g.oh * g.ow..][..g.oh * g.ow];
            for c in 0..g.c {
                let dx_c = &mut dx_n[c * g.h * g.w..][..g.h * g.w];
                let k_fc = &k[(f * g.c + c) * g.kh * g.kw..][..g.kh * g.kw];
                for oh in 0..g.oh {
                    let g_row = &g_f[oh * g.ow..][..g.ow];
                    for kh in 0..g.kh {
                        let Some(ih) = g.in_row(oh, kh) else { continue };
                        let dx_row = &mut dx_c[ih * g.w..][..g.w];
                        for kw in 0..g.kw {
                            let kv = k_fc[kh * g.kw + kw];
                            let (lo, hi) = g.ow_range(kw);
                            if g.stride == 1 && kw >= g.pad {
                                let off = kw - g.pad;
                                let dst = &mut dx_row[lo + off..hi + off];
                                for (d, gv) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                    *d += kv * gv;
                                }
                            } else {
                                for ow in lo..hi {
                                    dx_row[ow * g.stride + kw - g.pad] += kv * g_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates `d loss / d k` into `dk` given the output gradient.
pub fn backward_kernel(gout: &[f64], x: &[f64], g: &ConvGeom, dk: &mut [f64]) {
    debug_assert_eq!(dk.len(), g.f * g.c * g.kh * g.kw);
    let per_f = g.c * g.kh * g.kw;
    dk.par_chunks_mut(per_f).enumerate().for_each(|(f, dk_f)| {
        for c in 0..g.c {
            for kh in 0..g.kh {
                for kw in 0..g.kw {
                    let (lo, hi) = g.ow_range(kw);
                    let mut acc = 0.0;
                    for n in 0..g.n {
                        let x_c = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                        let g_f = &gout[(n * g.f + f) * g.oh * g.ow..][..g.oh * g.ow];
                        for oh in 0..g.oh {
                            let Some(ih) = g.in_row(oh, kh) else { continue };
                            let x_row = &x_c[ih * g.w..][..g.w];
                            let g_row = &g_f[oh * g.ow..][..g.ow];
                            if g.stride == 1 && kw >= g.pad {
                                let off = kw - g.pad;
                                acc += dot(&g_row[lo..hi], &x_row[lo + off..hi + off]);
                            } else {
                                for ow in lo..hi {
                                    acc += g_row[ow] * x_row[ow * g.stride + kw - g.pad];
                                }
                            }
                        }
                    }
                    dk_f[(c * g.kh + kh) * g.kw + kw] += acc;
                }
            }
        }
    });
}

/// Four-lane dot product. The lane split is part of the definition, so the
/// summation order is fixed and results stay reproducible.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            lanes[l] += a[i * 4 + l] * b[i * 4 + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

fn four(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(format!("{what} must be rank 4, got {shape:?}"))),
    }
}
