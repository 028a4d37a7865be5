//! Temporary diagnostic: instrument the first student batches at desk scale.
//! Usage: bench_epoch [clip] [batches]

use wavedistill::degrade::{degrade_sample, DegradationConfig};
use wavedistill::graph::Graph;
use wavedistill::net::Mode;
use wavedistill::loss::{
    arcface_loss, cosine_logits, distill_kl_loss, total_loss, wavesim_loss,
};
use wavedistill::net::{DownsampleKind, Model, NetworkSpec};
use wavedistill::optim::SgdState;
use wavedistill::rng::{derive_seed, StreamKey};
use wavedistill::synth::{generate_dataset, SynthSpec};
use wavedistill::tensor::Tensor;
use wavedistill::train::{normalize_pixel, train_teacher, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let clip: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let batches: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);

    let synth = SynthSpec { seed: 1, ..SynthSpec::default() };
    let dataset = generate_dataset(&synth).unwrap();
    let cfg = TrainConfig { epochs: 5, seed: 1, ..TrainConfig::default() };
    let tspec = NetworkSpec::desk(DownsampleKind::StrideConv, synth.num_identities);
    eprintln!("training teacher ({} epochs)...", cfg.epochs);
    let teacher = train_teacher(&dataset, &tspec, &cfg).unwrap();
    let mut teacher_model = teacher.model;

    // Teacher feature magnitudes on one clean batch.
    let sspec = NetworkSpec::desk(DownsampleKind::WaveConv, synth.num_identities);
    let degcfg = DegradationConfig::default();
    let batch: Vec<usize> = dataset.train_indices[..32].to_vec();
    let (x_clean, labels) = assemble(&dataset, &batch, None);
    let mut g = Graph::new();
    let xv = g.constant(x_clean);
    let tpass = teacher_model.forward(&mut g, xv, Mode::Eval).unwrap();
    let t_logits_full = {
        let l = cosine_logits(&mut g, tpass.embedding, tpass.head_weight, cfg.arcface_scale).unwrap();
        Tensor::new(g.shape(l), g.data(l).to_vec()).unwrap()
    };
    let mut t_stages_t = Vec::new();
    for (k, &s) in tpass.stages.iter().take(2).enumerate() {
        let d = g.data(s);
        let rms = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
        let amax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        eprintln!("teacher stage{} shape {:?} rms {rms:.3} max {amax:.3}", k + 1, g.shape(s));
        t_stages_t.push(Tensor::new(g.shape(s), d.to_vec()).unwrap());
    }

    let mut student = Model::build(&sspec, derive_seed(cfg.seed, "init")).unwrap();
    let mut opt = SgdState::new(cfg.lr, cfg.momentum, cfg.clip_norm).unwrap();
    let arc_cfg = cfg.arcface();
    let distill_cfg = cfg.distill();
    let degrade_seed = derive_seed(cfg.seed, "degrade");

    eprintln!("step |     arc |      kl |       ws |    total | gradnorm | maxparam");
    for step_i in 0..batches {
        // Same batch every step: worst-case repetition, cleanest signal.
        let (x, _) = assemble(&dataset, &batch, Some((&degcfg, degrade_seed, step_i)));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let pass = match student.forward(&mut g, xv, Mode::Train) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("step {step_i}: forward failed: {e}");
                return;
            }
        };
        let arc = arcface_loss(&mut g, pass.embedding, pass.head_weight, &labels, &arc_cfg).unwrap();
        let s_logits = cosine_logits(&mut g, pass.embedding, pass.head_weight, cfg.arcface_scale).unwrap();
        let kl = distill_kl_loss(&mut g, &t_logits_full, s_logits, cfg.temperature).unwrap();
        let t_stage_vals: Vec<_> = t_stages_t.iter().map(|t| g.constant(t.clone())).collect();
        let ws = match wavesim_loss(&mut g, &t_stage_vals, &pass.stages[..2]) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("step {step_i}: wavesim failed: {e}");
                return;
            }
        };
        let total = match total_loss(&mut g, arc, Some(kl), Some(ws), &distill_cfg) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("step {step_i}: total failed: {e}");
                return;
            }
        };
        g.backward(total).unwrap();
        student.harvest_grads(&g, &pass).unwrap();
        let mut params = student.params_mut();
        let mut sq = 0.0;
        for p in params.iter() {
            if let Some(gr) = p.grad() {
                sq += gr.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if clip > 0.0 && norm > clip {
            let scale = clip / norm;
            for p in params.iter_mut() {
                if let Some(gr) = p.grad() {
                    let scaled: Vec<f64> = gr.iter().map(|v| v * scale).collect();
                    p.zero_grad();
                    p.accumulate_grad(&scaled).unwrap();
                }
            }
        }
        let maxp = params
            .iter()
            .flat_map(|p| p.data().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        eprintln!(
            "{step_i:4} | {:7.3} | {:7.3} | {:8.1} | {:8.1} | {:8.1} | {maxp:8.2}",
            g.item(arc).unwrap(),
            g.item(kl).unwrap(),
            g.item(ws).unwrap(),
            g.item(total).unwrap(),
            norm
        );
        if let Err(e) = opt.step(&mut params) {
            eprintln!("step {step_i}: optimizer: {e}");
            return;
        }
    }
}

fn assemble(
    dataset: &wavedistill::synth::Dataset,
    indices: &[usize],
    degrade: Option<(&DegradationConfig, u64, usize)>,
) -> (Tensor, Vec<usize>) {
    let s = dataset.images.shape()[2];
    let mut data = Vec::with_capacity(indices.len() * s * s);
    let mut labels = Vec::with_capacity(indices.len());
    for &idx in indices {
        let img = dataset.image(idx).unwrap();
        let img = match degrade {
            Some((cfg, seed, epoch)) => {
                degrade_sample(&img, cfg, &StreamKey::new(seed, idx as u64, epoch as u64))
                    .unwrap()
                    .0
            }
            None => img,
        };
        data.extend(img.data().iter().map(|&v| normalize_pixel(v)));
        labels.push(dataset.labels[idx]);
    }
    (Tensor::new(&[indices.len(), 1, s, s], data).unwrap(), labels)
}
