//! Phase two of the pipeline: the waveconv student trains on degraded
//! low-resolution inputs while a frozen high-resolution teacher supervises
//! it through the temperature-scaled KL and the wavelet-similarity loss.
//! Pass an epoch count to train both phases longer (default 5).

use wavedistill::degrade::DegradationConfig;
use wavedistill::eval::verify_accuracy;
use wavedistill::net::{DownsampleKind, NetworkSpec};
use wavedistill::synth::{build_protocol, generate_dataset, SynthSpec};
use wavedistill::train::{train_student, train_teacher, TrainConfig};

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let data = generate_dataset(&SynthSpec::default()).unwrap();
    let cfg = TrainConfig { epochs, seed: 2, ..TrainConfig::default() };
    let degrade = DegradationConfig::default();

    println!("teacher: stride-conv on clean 32x32");
    let teacher_spec = NetworkSpec::desk(DownsampleKind::StrideConv, data.num_identities);
    let teacher = train_teacher(&data, &teacher_spec, &cfg).unwrap();
    println!("  final arc loss {:.4} in {:.1}s\n", teacher.log.last().unwrap().arc, teacher.wall_seconds);

    println!("student: waveconv on degraded LR {:?}, lambda1 {} lambda2 {} T {}",
        degrade.lr_sizes, cfg.lambda1, cfg.lambda2, cfg.temperature);
    let student_spec = NetworkSpec::desk(DownsampleKind::WaveConv, data.num_identities);
    let student = train_student(&data, &teacher.model, &student_spec, &cfg, &degrade).unwrap();
    for log in &student.log {
        println!(
            "  epoch {:>2}  arc {:.4}  kl {:.4}  wavesim {:.4}  total {:.4}",
            log.epoch, log.arc, log.kl, log.wavesim, log.total
        );
    }
    println!("  trained in {:.1}s\n", student.wall_seconds);

    let protocol = build_protocol(
        &data.eval_indices.iter().map(|&i| data.labels[i]).collect::<Vec<_>>(),
        cfg.seed,
    )
    .unwrap();
    println!("verification accuracy (HR galleries, clean downsampled probes):");
    println!("  res   teacher  student");
    for res in [32, 16, 8] {
        let (t, _) = verify_accuracy(&teacher.model, &data, &protocol, res).unwrap();
        let (s, _) = verify_accuracy(&student.model, &data, &protocol, res).unwrap();
        println!("  {res:>3}   {t:.4}   {s:.4}");
    }
}
