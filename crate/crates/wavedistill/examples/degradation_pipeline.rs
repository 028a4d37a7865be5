//! The realistic low-resolution pipeline, stage by stage and end to end:
//! Gaussian blur, additive noise, JPEG blocking, bicubic down/up. Writes
//! before/after images to out/degradation/ and prints what each stage and
//! each stochastic draw did to the PSNR.

use std::path::Path;

use wavedistill::degrade::{
    bicubic_resize, degrade_sample, gaussian_blur, jpeg_artifact, psnr, DegradationConfig,
};
use wavedistill::pgm::write_pgm;
use wavedistill::rng::{derive_seed, StreamKey};
use wavedistill::synth::{generate_dataset, SynthSpec};

fn main() {
    let data = generate_dataset(&SynthSpec { seed: 11, ..SynthSpec::default() }).unwrap();
    let hr = data.image(0).unwrap();
    let dir = Path::new("out/degradation");
    std::fs::create_dir_all(dir).unwrap();
    write_pgm(&dir.join("clean.pgm"), &hr).unwrap();

    println!("single stages (PSNR vs clean):");
    let blurred = gaussian_blur(&hr, 1.5).unwrap();
    println!("  blur sigma 1.5        {:6.2} dB", psnr(&hr, &blurred).unwrap());
    write_pgm(&dir.join("blur.pgm"), &blurred).unwrap();

    let jpeg = jpeg_artifact(&hr, 30).unwrap();
    println!("  jpeg quality 30       {:6.2} dB", psnr(&hr, &jpeg).unwrap());
    write_pgm(&dir.join("jpeg_q30.pgm"), &jpeg).unwrap();

    let down = bicubic_resize(&hr, 8).unwrap();
    let up = bicubic_resize(&down, 32).unwrap();
    println!("  bicubic 32->8->32     {:6.2} dB", psnr(&hr, &up).unwrap());
    write_pgm(&dir.join("bicubic_8.pgm"), &up).unwrap();

    println!("\nfull pipeline, five independent draws:");
    let cfg = DegradationConfig::default();
    let stream = derive_seed(3, "degrade");
    for i in 0..5 {
        let key = StreamKey::new(stream, i, 0);
        let (lr, record) = degrade_sample(&hr, &cfg, &key).unwrap();
        let fmt = |v: Option<f64>| v.map_or("  off".into(), |x| format!("{x:5.2}"));
        println!(
            "  draw {i}: blur {} noise {} jpeg {}  size {:>2}  ->  {:5.2} dB",
            fmt(record.blur_sigma),
            fmt(record.noise_sigma),
            record.jpeg_quality.map_or("off".into(), |q| format!("q{q:<3}")),
            record.chosen_size,
            psnr(&hr, &lr).unwrap()
        );
        write_pgm(&dir.join(format!("degraded_{i}.pgm")), &lr).unwrap();
    }
    println!("\nimages in {}", dir.display());
}
