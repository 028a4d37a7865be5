//! Binary PGM (P5, maxval 255) image files.
//!
//! The on-disk unit is a single-channel `[1, h, w]` tensor on the 0-255
//! scale; writing rounds to nearest and clamps.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let [h, w] = match img.shape()[..] {
        [1, h, w] => [h, w],
        ref s => return Err(Error::shape(format!("pgm wants [1, h, w], got {s:?}"))),
    };
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let raw = fs::read(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));

    // Header: magic, width, height, maxval as whitespace-separated tokens
    // (comment lines start with '#'), then one whitespace byte and raster.
    let mut pos = 0usize;
    let mut token = |raw: &[u8]| -> Result<String> {
        while pos < raw.len() {
            match raw[pos] {
                b'#' => {
                    while pos < raw.len() && raw[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };

    if token(&raw).map_err(|_| bad("truncated header"))? != "P5" {
        return Err(bad("not a binary PGM (want magic P5)"));
    }
    let parse = |s: String| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let w = parse(token(&raw).map_err(|_| bad("missing width"))?)?;
    let h = parse(token(&raw).map_err(|_| bad("missing height"))?)?;
    let maxval = parse(token(&raw).map_err(|_| bad("missing maxval"))?)?;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval} (want 255)")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero image extent"));
    }
    pos += 1; // single whitespace separator before the raster
    let raster = raw.get(pos..pos + w * h).ok_or_else(|| bad("raster shorter than header promises"))?;
    Tensor::new(&[1, h, w], raster.iter().map(|&b| b as f64).collect())
}
