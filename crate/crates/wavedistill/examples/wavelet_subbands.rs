//! One level of the orthonormal Haar transform on a composite image:
//! energy shares per subband, perfect reconstruction, and Parseval's
//! identity. The left half is a smooth ramp (energy concentrates in LL),
//! the right half a checkerboard (energy concentrates in HH).

use wavedistill::tensor::Tensor;
use wavedistill::wavelet::{analyze, energy, synthesize};

fn main() {
    let s = 32;
    let mut data = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            data[y * s + x] = if x < s / 2 {
                128.0 + 4.0 * (x + y) as f64
            } else if (x + y) % 2 == 0 {
                192.0
            } else {
                64.0
            };
        }
    }
    let img = Tensor::new(&[1, 1, s, s], data).unwrap();

    let bands = analyze(&img).unwrap();
    let energies = bands.energies();
    let total: f64 = energies.iter().sum();
    println!("subband energy shares:");
    for (name, e) in ["ll", "lh", "hl", "hh"].iter().zip(energies) {
        println!("  {name}  {:.6}", e / total);
    }

    let input_energy = energy(&img);
    println!("\nparseval: |x|^2 = {input_energy:.6}");
    println!("          sum of subband energies = {total:.6}");
    println!("          difference = {:.3e}", (input_energy - total).abs());

    let back = synthesize(&bands).unwrap();
    let worst = img
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("round trip max abs err = {worst:.3e}");
}
