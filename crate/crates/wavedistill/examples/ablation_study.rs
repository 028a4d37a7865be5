//! The five-row ablation table: ResNet baseline, WaveResNet, +degradation,
//! +KD, +KD+WaveSim, each evaluated at every probe resolution. The first
//! row's model doubles as the distillation teacher for the KD rows.
//!
//! Usage: ablation_study [EPOCHS] [SEED] — defaults 4 and 1. Around ten
//! epochs the low-resolution ordering from the paper becomes stable.

use wavedistill::degrade::DegradationConfig;
use wavedistill::eval::run_ablation;
use wavedistill::net::{DownsampleKind, NetworkSpec};
use wavedistill::synth::{generate_dataset, SynthSpec};
use wavedistill::train::TrainConfig;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);

    let data = generate_dataset(&SynthSpec { seed, ..SynthSpec::default() }).unwrap();
    let spec = NetworkSpec::desk(DownsampleKind::WaveConv, data.num_identities);
    let cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let degrade = DegradationConfig::default();

    println!("training 5 configurations for {epochs} epochs (seed {seed})...");
    let ablation = run_ablation(&data, &spec, &cfg, &degrade).unwrap();
    println!();
    for line in ablation.wide_csv().lines() {
        let mut cols = line.split(',');
        print!("{:<14}", cols.next().unwrap());
        for c in cols {
            match c.parse::<f64>() {
                Ok(v) => print!(" {v:>7.4}"),
                Err(_) => print!(" {c:>7}"),
            }
        }
        println!();
    }

    let acc = |c: &str, r: usize| ablation.report.accuracy(c, r).unwrap();
    let lowest = *ablation.resolutions.last().unwrap();
    println!();
    println!(
        "full method vs baseline at {lowest}x{lowest}: {:+.4}",
        acc("+kd+wavesim", lowest) - acc("resnet", lowest)
    );
    println!(
        "waveresnet  vs baseline at {lowest}x{lowest}: {:+.4}",
        acc("waveresnet", lowest) - acc("resnet", lowest)
    );
    println!(
        "KD's HR recovery over degradation-only:   {:+.4}",
        acc("+kd", 32) - acc("+degradation", 32)
    );
}
