//! Phase one of the pipeline: ArcFace training of the stride-conv teacher
//! on clean high-resolution images, with verification accuracy before and
//! after. Pass an epoch count to train longer (default 6).

use wavedistill::eval::verify_accuracy;
use wavedistill::net::{DownsampleKind, Model, NetworkSpec};
use wavedistill::rng::derive_seed;
use wavedistill::synth::{build_protocol, generate_dataset, SynthSpec};
use wavedistill::train::{train_teacher, TrainConfig};

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let data = generate_dataset(&SynthSpec::default()).unwrap();
    let spec = NetworkSpec::desk(DownsampleKind::StrideConv, data.num_identities);
    let cfg = TrainConfig { epochs, seed: 1, ..TrainConfig::default() };
    let protocol = build_protocol(
        &data.eval_indices.iter().map(|&i| data.labels[i]).collect::<Vec<_>>(),
        cfg.seed,
    )
    .unwrap();

    let untrained = Model::build(&spec, derive_seed(cfg.seed, "init")).unwrap();
    let (acc0, _) = verify_accuracy(&untrained, &data, &protocol, 32).unwrap();
    println!("untrained HR verification accuracy: {acc0:.4}\n");

    let result = train_teacher(&data, &spec, &cfg).unwrap();
    for log in &result.log {
        println!("epoch {:>2}  lr {:<7} arc loss {:.4}", log.epoch, log.lr, log.arc);
    }
    println!("\ntrained in {:.1}s", result.wall_seconds);

    let (hr, hr_std) = verify_accuracy(&result.model, &data, &protocol, 32).unwrap();
    let (lr8, lr8_std) = verify_accuracy(&result.model, &data, &protocol, 8).unwrap();
    println!("HR 32x32 accuracy: {hr:.4} +- {hr_std:.4}");
    println!("LR  8x8  accuracy: {lr8:.4} +- {lr8_std:.4}  (clean downsampled probes)");
}
