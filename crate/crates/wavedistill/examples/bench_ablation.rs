use std::time::Instant;

use wavedistill::degrade::DegradationConfig;
use wavedistill::eval::run_ablation;
use wavedistill::net::{DownsampleKind, NetworkSpec};
use wavedistill::synth::{generate_dataset, SynthSpec};
use wavedistill::train::TrainConfig;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let data = generate_dataset(&SynthSpec { seed, ..SynthSpec::default() }).unwrap();
    let spec = NetworkSpec::desk(DownsampleKind::WaveConv, 20);
    let cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let deg = DegradationConfig::default();
    let t0 = Instant::now();
    let report = run_ablation(&data, &spec, &cfg, &deg).unwrap();
    println!("seed {seed} epochs {epochs} in {:.1}s", t0.elapsed().as_secs_f64());
    print!("{}", report.wide_csv());

    let acc = |c: &str, r: usize| report.report.accuracy(c, r).unwrap();
    println!("(a) full - resnet @8   = {:+.4}", acc("+kd+wavesim", 8) - acc("resnet", 8));
    println!("(b) kd - resnet @32    = {:+.4}", acc("+kd", 32) - acc("resnet", 32));
    println!("    deg - resnet @32   = {:+.4}", acc("+degradation", 32) - acc("resnet", 32));
    println!("(c) wave - resnet @8   = {:+.4}", acc("waveresnet", 8) - acc("resnet", 8));
}
