//! Temporary: measure the synth band invariant margins.

use wavedistill::degrade;
use wavedistill::synth::{generate_dataset, SynthSpec};
use wavedistill::wavelet;
use wavedistill::Tensor;

fn band_energy(img: &Tensor, keep: impl Fn(usize, usize) -> bool) -> f64 {
    let s = img.shape()[2];
    let axis: Vec<Vec<f64>> = (0..s)
        .map(|u| {
            let a = if u == 0 { (1.0 / s as f64).sqrt() } else { (2.0 / s as f64).sqrt() };
            (0..s)
                .map(|x| a * (std::f64::consts::PI * u as f64 * (x as f64 + 0.5) / s as f64).cos())
                .collect()
        })
        .collect();
    let mut energy = 0.0;
    for u in 0..s {
        for v in 0..s {
            if !keep(u, v) {
                continue;
            }
            let mut acc = 0.0;
            for y in 0..s {
                for x in 0..s {
                    acc += axis[u][y] * axis[v][x] * (img.data()[y * s + x] - 128.0);
                }
            }
            energy += acc * acc;
        }
    }
    energy
}

fn main() {
    let mut args = std::env::args().skip(1);
    let f: f64 = args.next().map(|a| a.parse().unwrap()).unwrap_or(0.25);
    let spec = SynthSpec { identity_hf_fraction: f, ..Default::default() };
    let s = spec.image_size;
    let b = spec.identity_basis_order;
    println!("f = {f}");

    // LL fraction of the nuisance-free identity component.
    let clean = generate_dataset(&SynthSpec {
        num_identities: 6,
        samples_per_identity: 5,
        contrast_jitter: 0.0,
        texture_amplitude: [0.0, 0.0],
        max_translation: 0.0,
        identity_hf_fraction: f,
        ..Default::default()
    })
    .unwrap();
    let mut worst = 1.0f64;
    for id in 0..6 {
        let img = clean.image(id * 5).unwrap();
        let centered =
            Tensor::new(&[1, 1, 32, 32], img.data().iter().map(|v| v - 128.0).collect()).unwrap();
        let e = wavelet::analyze(&centered).unwrap().energies();
        let frac = e[0] / e.iter().sum::<f64>();
        worst = worst.min(frac);
    }
    println!("LL fraction worst over 6 ids: {worst:.4}  (must be > 0.9)");

    // Band keep/strip through the 8px round trip, on the default dataset.
    let data = generate_dataset(&spec).unwrap();
    let id_band = |u: usize, v: usize| u.min(v) < b + 2 && u.max(v) < 3 * s / 8 + 2;
    let low_band = |u: usize, v: usize| u < b + 2 && v < b + 2;
    let hf_band = |u: usize, v: usize| u.min(v) < b + 2 && (b + 2..3 * s / 8 + 2).contains(&u.max(v));
    let tex_band = |u: usize, v: usize| u.min(v) >= b + 2;
    let (mut id_kept, mut low_kept, mut hf_kept, mut tex_kept) = (0.0, 0.0, 0.0, 0.0);
    let n = 12;
    for i in 0..n {
        let img = data.image(i * 60 + i).unwrap();
        let down = degrade::bicubic_resize(&img, 8).unwrap();
        let back = degrade::bicubic_resize(&down, s).unwrap();
        id_kept += band_energy(&back, id_band) / band_energy(&img, id_band);
        low_kept += band_energy(&back, low_band) / band_energy(&img, low_band);
        hf_kept += band_energy(&back, hf_band) / band_energy(&img, hf_band);
        tex_kept += band_energy(&back, tex_band) / band_energy(&img, tex_band);
    }
    println!("kept@8: identity {:.4} (>0.7), low-only {:.4}, signature-only {:.4}", id_kept / n as f64, low_kept / n as f64, hf_kept / n as f64);
    println!("kept@8: texture {:.4}  (must be < 0.1)", tex_kept / n as f64);

    // Nearest-centroid on two-level Haar LL.
    let ll1 = wavelet::analyze(&data.images).unwrap().ll;
    let ll2 = wavelet::analyze(&ll1).unwrap().ll;
    let dim = 64;
    let feats = ll2.data();
    let mut centroids = vec![vec![0.0; dim]; data.num_identities];
    let mut counts = vec![0usize; data.num_identities];
    for &i in &data.train_indices {
        let fv = &feats[i * dim..][..dim];
        let c = &mut centroids[data.labels[i]];
        c.iter_mut().zip(fv).for_each(|(a, b)| *a += b);
        counts[data.labels[i]] += 1;
    }
    for (c, &cnt) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= cnt as f64);
    }
    let mut correct = 0usize;
    for &i in &data.train_indices {
        let fv = &feats[i * dim..][..dim];
        let best = (0..data.num_identities)
            .min_by(|&a, &b| {
                let da: f64 = fv.iter().zip(&centroids[a]).map(|(x, c)| (x - c) * (x - c)).sum();
                let db: f64 = fv.iter().zip(&centroids[b]).map(|(x, c)| (x - c) * (x - c)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        correct += (best == data.labels[i]) as usize;
    }
    println!(
        "nearest-centroid LL2 train accuracy: {:.4}  (must be > 0.95)",
        correct as f64 / data.train_indices.len() as f64
    );
}
