//! Synthetic identity dataset.
//!
//! Each identity is a unit-norm coefficient vector over 2-D cosine modes,
//! rendered as `clamp(128 + 100 * contrast * sum c_uv mode_uv)`. The energy
//! is split across two bands: the bulk sits in modes `u, v < B`, which
//! survive every probe size, and a minority signature
//! (`identity_hf_fraction`) sits in modes with `max(u, v)` just above `S/4`
//! and `min(u, v) < B`, which survive halving intact but fold to alien
//! frequencies at quarter resolution. Identities come as look-alike siblings
//! that share their low band and differ only in the signature, so telling
//! siblings apart at the smallest probe size requires reading the folded
//! residue of the signature — the regime a cross-resolution testbed exists
//! to probe, and one a model trained only on sharp images never sees.
//! Per-sample nuisance never enters either band: contrast jitter scales
//! identity, sub-pixel translation phase-shifts it, and additive texture
//! occupies modes with both axes in `[S/4, S/2)`, disjoint from the
//! signature band because signature modes keep one axis below `B`.
//!
//! Pixels are rounded to integers after clamping, so the PGM round-trip is
//! lossless and the in-memory and on-disk pipelines agree exactly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm;
use crate::rng::{derive_seed, StreamKey};
use crate::tensor::Tensor;

/// Number of high-frequency texture modes added per sample.
const TEXTURE_MODES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub image_size: usize,
    /// Low identity band is cosine modes `u, v < identity_basis_order`.
    pub identity_basis_order: usize,
    /// Fraction of identity energy in the high-band signature modes
    /// (`max(u, v)` in `[S/4, 3S/8)`, `min(u, v) < B`); the rest sits below
    /// `B`. The signature survives halving but not quartering, and it is
    /// all that separates look-alike siblings — the part of identity that
    /// the smallest probes lose.
    pub identity_hf_fraction: f64,
    /// Contrast multiplier is `1 +- contrast_jitter` (uniform).
    pub contrast_jitter: f64,
    /// Additive texture amplitude range (0-255 gray levels).
    pub texture_amplitude: [f64; 2],
    /// Maximum sub-pixel translation per axis, pixels.
    pub max_translation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_identities: 20,
            samples_per_identity: 60,
            image_size: 32,
            identity_basis_order: 4,
            identity_hf_fraction: 0.15,
            contrast_jitter: 0.2,
            texture_amplitude: [4.0, 12.0],
            max_translation: 1.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::config(format!(
                "num_identities = {} but verification needs at least 2 identities",
                self.num_identities
            )));
        }
        if self.samples_per_identity < 5 {
            return Err(Error::config(
                "samples_per_identity must be >= 5 so the 80/20 split leaves both sides non-empty",
            ));
        }
        let s = self.image_size;
        if s < 8 || s % 2 != 0 {
            return Err(Error::config(format!("image_size {s} must be even and >= 8")));
        }
        let b = self.identity_basis_order;
        if b == 0 || b > s / 4 {
            return Err(Error::config(format!(
                "identity_basis_order {b} must be in [1, image_size/4 = {}] to stay below the texture band",
                s / 4
            )));
        }
        if !(0.1..=0.5).contains(&self.identity_hf_fraction) {
            return Err(Error::config(
                "identity_hf_fraction must be in [0.1, 0.5]: the signature stays a minority of \
                 identity energy but must be large enough to separate look-alike siblings",
            ));
        }
        if !(0.0..1.0).contains(&self.contrast_jitter) {
            return Err(Error::config("contrast_jitter must be in [0, 1)"));
        }
        let [lo, hi] = self.texture_amplitude;
        if !(0.0 <= lo && lo <= hi) {
            return Err(Error::config(format!("texture_amplitude [{lo}, {hi}] invalid")));
        }
        if !(self.max_translation >= 0.0) {
            return Err(Error::config("max_translation must be >= 0"));
        }
        Ok(())
    }
}

/// Generated images with labels and the identity-stratified 80/20 split.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[M, 1, S, S]`, 0-255 scale, integral values.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
    pub num_identities: usize,
}

impl Dataset {
    pub fn image(&self, index: usize) -> Result<Tensor> {
        let s = self.images.shape()[2];
        let m = self.labels.len();
        if index >= m {
            return Err(Error::Invalid(format!("image index {index} out of {m}")));
        }
        let data = self.images.data()[index * s * s..][..s * s].to_vec();
        Tensor::new(&[1, s, s], data)
    }
}

/// High-band signature modes: `max(u, v)` just above `s/4`, `min(u, v) < b`.
fn signature_modes(s: usize, b: usize) -> Vec<(usize, usize)> {
    let lo = s / 4 + (s / 32).max(1);
    let hi = lo + (s / 16).max(1);
    let mut modes = Vec::new();
    for m in lo..hi {
        for w in 0..b {
            modes.push((m, w));
            modes.push((w, m));
        }
    }
    modes
}

/// Unit-norm identity coefficient vectors with min pairwise distance > 0.5,
/// found by rejection sampling. The first `low_dim` entries carry
/// `1 - hf_fraction` of the squared norm, the remaining `hf_dim` the rest.
///
/// Identities come as look-alike siblings: 2k and 2k+1 share their low-band
/// component exactly and differ only in the signature band, so a sibling
/// pair is separable precisely where the signature survives. Separation is
/// still enforced on the full vectors, which is why `hf_fraction` needs a
/// floor (a sibling pair sits at distance at most `2·sqrt(hf_fraction)`).
fn draw_identities(
    num: usize,
    low_dim: usize,
    hf_dim: usize,
    hf_fraction: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    fn draw_part(dim: usize, target: f64, rng: &mut impl Rng) -> Option<Vec<f64>> {
        let mut part: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = part.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return None;
        }
        part.iter_mut().for_each(|v| *v *= target / norm);
        Some(part)
    }

    let mut rng = StreamKey::new(derive_seed(seed, "identities"), 0, 0).rng();
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(num);
    let mut draws = 0usize;

    'family: while accepted.len() < num {
        draws += 1;
        if draws > 100_000 {
            return Err(Error::config(format!(
                "could not place {num} identities at pairwise distance > 0.5 in {} dimensions \
                 after 100000 draws; reduce num_identities or increase identity_hf_fraction",
                low_dim + hf_dim
            )));
        }
        let members = 2.min(num - accepted.len());
        let Some(low) = draw_part(low_dim, (1.0 - hf_fraction).sqrt(), &mut rng) else {
            continue;
        };
        let mut family = Vec::with_capacity(members);
        for _ in 0..members {
            let Some(high) = draw_part(hf_dim, hf_fraction.sqrt(), &mut rng) else {
                continue 'family;
            };
            let mut c = low.clone();
            c.extend(high);
            let far_enough = accepted.iter().chain(&family).all(|other: &Vec<f64>| {
                let d2: f64 = c.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 > 0.25
            });
            if !far_enough {
                continue 'family;
            }
            family.push(c);
        }
        accepted.append(&mut family);
    }
    Ok(accepted)
}

/// `cos(pi u (x + 0.5 + shift) / s)` for every x — one separable axis of a
/// translated DCT-II mode.
fn cos_axis(s: usize, u: usize, shift: f64) -> Vec<f64> {
    (0..s)
        .map(|x| (std::f64::consts::PI * u as f64 * (x as f64 + 0.5 + shift) / s as f64).cos())
        .collect()
}

/// Deterministically renders all images. Per-sample stream draw order:
/// contrast jitter, dx, dy, texture amplitude, texture mode indices
/// (u then v, 6 modes), texture coefficients.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.image_size;
    let b = spec.identity_basis_order;
    let mut id_modes: Vec<(usize, usize)> = (0..b * b).map(|mi| (mi / b, mi % b)).collect();
    id_modes.extend(signature_modes(s, b));
    let identities = draw_identities(
        spec.num_identities,
        b * b,
        id_modes.len() - b * b,
        spec.identity_hf_fraction,
        spec.seed,
    )?;

    let m = spec.num_identities * spec.samples_per_identity;
    let sample_seed = derive_seed(spec.seed, "samples");
    let mut images = vec![0.0; m * s * s];
    let mut labels = vec![0usize; m];

    for id in 0..spec.num_identities {
        for k in 0..spec.samples_per_identity {
            let index = id * spec.samples_per_identity + k;
            labels[index] = id;
            let mut rng = StreamKey::new(sample_seed, index as u64, 0).rng();

            let jitter = spec.contrast_jitter;
            let contrast = if jitter == 0.0 { 1.0 } else { 1.0 + rng.random_range(-jitter..jitter) };
            let t = spec.max_translation;
            let (dx, dy) = if t == 0.0 {
                (0.0, 0.0)
            } else {
                (rng.random_range(-t..t), rng.random_range(-t..t))
            };
            let [alo, ahi] = spec.texture_amplitude;
            let amplitude = if alo == ahi { alo } else { rng.random_range(alo..ahi) };
            let modes: Vec<(usize, usize)> = (0..TEXTURE_MODES)
                .map(|_| (rng.random_range(s / 4..s / 2), rng.random_range(s / 4..s / 2)))
                .collect();
            let mut coeffs: Vec<f64> =
                (0..TEXTURE_MODES).map(|_| StandardNormal.sample(&mut rng)).collect();
            let cnorm = coeffs.iter().map(|v| v * v).sum::<f64>().sqrt();
            if cnorm > 1e-9 {
                coeffs.iter_mut().for_each(|v| *v /= cnorm);
            }

            let img = &mut images[index * s * s..][..s * s];
            img.fill(128.0);
            for (&(u, v), c) in id_modes.iter().zip(&identities[id]) {
                let w = 100.0 * contrast * c;
                let cu = cos_axis(s, u, dy);
                let cv = cos_axis(s, v, dx);
                for y in 0..s {
                    for x in 0..s {
                        img[y * s + x] += w * cu[y] * cv[x];
                    }
                }
            }
            for (&(u, v), &c) in modes.iter().zip(&coeffs) {
                let w = amplitude * c;
                let cu = cos_axis(s, u, dy);
                let cv = cos_axis(s, v, dx);
                for y in 0..s {
                    for x in 0..s {
                        img[y * s + x] += w * cu[y] * cv[x];
                    }
                }
            }
            for p in img.iter_mut() {
                *p = p.clamp(0.0, 255.0).round();
            }
        }
    }

    let (train_indices, eval_indices) = split_indices(&labels, spec.seed);

    Ok(Dataset {
        images: Tensor::new(&[m, 1, s, s], images)?,
        labels,
        train_indices,
        eval_indices,
        num_identities: spec.num_identities,
    })
}

/// Identity-stratified 80/20 split: each label's positions are shuffled on
/// that label's own stream and the first 4/5 go to train. Returns sorted
/// (train, eval) index lists.
pub fn split_indices(labels: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let split_seed = derive_seed(seed, "split");
    let num_identities = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut train_indices = Vec::new();
    let mut eval_indices = Vec::new();
    for id in 0..num_identities {
        let mut order: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == id).collect();
        let mut rng = StreamKey::new(split_seed, id as u64, 0).rng();
        order.shuffle(&mut rng);
        let cut = order.len() * 4 / 5;
        train_indices.extend_from_slice(&order[..cut]);
        eval_indices.extend_from_slice(&order[cut..]);
    }
    train_indices.sort_unstable();
    eval_indices.sort_unstable();
    (train_indices, eval_indices)
}

/// Rebuilds a [`Dataset`] from individually loaded images (e.g. a directory
/// written by [`save_dataset`]), re-deriving the split from `seed`.
pub fn dataset_from_images(images: &[Tensor], labels: Vec<usize>, seed: u64) -> Result<Dataset> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::config(format!(
            "{} images against {} labels",
            images.len(),
            labels.len()
        )));
    }
    let shape = images[0].shape().to_vec();
    match shape[..] {
        [1, h, w] if h == w && h % 2 == 0 => {}
        ref s => {
            return Err(Error::shape(format!(
                "images must be [1, s, s] with even s, got {s:?}"
            )))
        }
    }
    let mut data = Vec::with_capacity(images.len() * shape[1] * shape[2]);
    for img in images {
        if img.shape() != shape {
            return Err(Error::shape(format!(
                "mixed image shapes: {:?} and {:?}",
                shape,
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let num_identities = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; num_identities];
    for &l in &labels {
        seen[l] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::config("identity labels must cover 0..k without gaps"));
    }
    let (train_indices, eval_indices) = split_indices(&labels, seed);
    Ok(Dataset {
        images: Tensor::new(&[images.len(), shape[0], shape[1], shape[2]], data)?,
        labels,
        train_indices,
        eval_indices,
        num_identities,
    })
}

/// One verification trial: compare `probe` against `gallery`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub probe: usize,
    pub gallery: usize,
    pub same: bool,
}

/// Balanced pair list split into 10 disjoint folds (index lists into
/// `pairs`); every fold is exactly half genuine, half impostor.
#[derive(Debug, Clone)]
pub struct VerificationProtocol {
    pub pairs: Vec<Pair>,
    pub folds: Vec<Vec<usize>>,
}

pub const PROTOCOL_FOLDS: usize = 10;

/// All unordered same-label and cross-label index pairs.
pub fn enumerate_pairs(labels: &[usize]) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                genuine.push((i, j));
            } else {
                impostor.push((i, j));
            }
        }
    }
    (genuine, impostor)
}

/// Builds the 10-fold balanced protocol over the given labels. Pair indices
/// refer to positions in `labels`.
pub fn build_protocol(labels: &[usize], seed: u64) -> Result<VerificationProtocol> {
    let distinct = {
        let mut seen = labels.to_vec();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    };
    if distinct < 2 {
        return Err(Error::config(format!(
            "protocol needs at least 2 identities, got {distinct}"
        )));
    }
    let (mut genuine, mut impostor) = enumerate_pairs(labels);
    // Equal genuine/impostor counts, divisible by the fold count.
    let per_class = genuine.len().min(impostor.len()) / PROTOCOL_FOLDS * PROTOCOL_FOLDS;
    if per_class == 0 {
        return Err(Error::config(format!(
            "insufficient samples: {} genuine and {} impostor pairs cannot fill {} balanced folds",
            genuine.len(),
            impostor.len(),
            PROTOCOL_FOLDS
        )));
    }
    let mut rng = StreamKey::new(derive_seed(seed, "protocol"), 0, 0).rng();
    genuine.shuffle(&mut rng);
    impostor.shuffle(&mut rng);
    genuine.truncate(per_class);
    impostor.truncate(per_class);

    let mut pairs = Vec::with_capacity(2 * per_class);
    let mut folds = vec![Vec::with_capacity(2 * per_class / PROTOCOL_FOLDS); PROTOCOL_FOLDS];
    let chunk = per_class / PROTOCOL_FOLDS;
    for fold in 0..PROTOCOL_FOLDS {
        for k in 0..chunk {
            let (p, g) = genuine[fold * chunk + k];
            folds[fold].push(pairs.len());
            pairs.push(Pair { probe: p, gallery: g, same: true });
            let (p, g) = impostor[fold * chunk + k];
            folds[fold].push(pairs.len());
            pairs.push(Pair { probe: p, gallery: g, same: false });
        }
    }
    Ok(VerificationProtocol { pairs, folds })
}

/// Writes one PGM per image plus `labels.csv` (`filename,identity`).
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut labels = String::from("filename,identity\n");
    for (i, &label) in dataset.labels.iter().enumerate() {
        let name = format!("img_{i:05}.pgm");
        pgm::write_pgm(&dir.join(&name), &dataset.image(i)?)?;
        labels.push_str(&format!("{name},{label}\n"));
    }
    fs::File::create(dir.join("labels.csv"))?.write_all(labels.as_bytes())?;
    Ok(())
}

/// Reads a directory written by [`save_dataset`]: images in `labels.csv`
/// order. The split is not stored on disk, so indices come back empty.
pub fn load_images(dir: &Path) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let text = fs::read_to_string(dir.join("labels.csv"))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "filename,identity" {
                return Err(Error::Format(format!("unexpected labels.csv header: {line}")));
            }
            continue;
        }
        let (name, label) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("labels.csv line {}: {line}", lineno + 1)))?;
        images.push(pgm::read_pgm(&dir.join(name))?);
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad identity `{label}` on line {}", lineno + 1)))?,
        );
    }
    Ok((images, labels))
}

/// Writes `pairs.csv` (`probe,gallery,same,fold`).
pub fn save_protocol(path: &Path, protocol: &VerificationProtocol) -> Result<()> {
    let mut text = String::from("probe,gallery,same,fold\n");
    for (fold, members) in protocol.folds.iter().enumerate() {
        for &pi in members {
            let p = protocol.pairs[pi];
            text.push_str(&format!("{},{},{},{fold}\n", p.probe, p.gallery, p.same as u8));
        }
    }
    fs::File::create(path)?.write_all(text.as_bytes())?;
    Ok(())
}
