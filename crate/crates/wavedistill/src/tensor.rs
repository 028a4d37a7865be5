//! Dense row-major `f64` tensors and the `WDT1` on-disk format.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes at the start of every serialized tensor.
pub const WDT1_MAGIC: [u8; 4] = *b"WDT1";

/// Highest rank `WDT1` encodes (rank is stored as one byte; 8 is plenty here).
pub const WDT1_MAX_RANK: usize = 8;

/// A dense row-major tensor of `f64` with an optional gradient buffer.
///
/// Invariants: every extent is positive, `data.len()` equals the product of
/// the extents, and a gradient (when present) has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and matching data, rejecting empty
    /// extents, length mismatches, and non-finite elements.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel = checked_numel(shape)?;
        if data.len() != numel {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor with shape {shape:?} contains {bad}"
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = checked_numel(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        })
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let mut t = Tensor::zeros(shape)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("fill value {value}")));
        }
        t.data.fill(value);
        Ok(t)
    }

    /// A rank-1 tensor holding a single value; the shape used for scalars
    /// throughout the crate.
    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizers and builders; callers keep the
    /// finiteness invariant.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() needs one element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` element-wise into the gradient buffer, allocating zeros
    /// on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient length {} for tensor of {} elements",
                delta.len(),
                self.data.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Flat offset of a multi-index, row-major.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "index {:?} into shape {:?}",
                index, self.shape
            )));
        }
        let mut off = 0usize;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            if ix >= ext {
                return Err(Error::Invalid(format!(
                    "index {ix} out of range for axis {i} with extent {ext}"
                )));
            }
            off = off * ext + ix;
        }
        Ok(off)
    }

    pub fn at(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel = checked_numel(shape)?;
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Tensor::new(shape, self.data.clone())
    }

    /// Serializes as `WDT1`: magic, rank byte, little-endian `u32` extents,
    /// then elements as little-endian `f64` in row-major order.
    pub fn write_wdt1<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&WDT1_MAGIC)?;
        if self.shape.len() > WDT1_MAX_RANK {
            return Err(Error::Format(format!(
                "rank {} exceeds WDT1 limit {WDT1_MAX_RANK}",
                self.shape.len()
            )));
        }
        w.write_all(&[self.shape.len() as u8])?;
        for &ext in &self.shape {
            let ext32 = u32::try_from(ext)
                .map_err(|_| Error::Format(format!("extent {ext} exceeds u32")))?;
            w.write_all(&ext32.to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_wdt1<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != WDT1_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {magic:?}, expected {WDT1_MAGIC:?}"
            )));
        }
        let mut rank_byte = [0u8; 1];
        r.read_exact(&mut rank_byte)?;
        let rank = rank_byte[0] as usize;
        if rank > WDT1_MAX_RANK {
            return Err(Error::Format(format!("rank {rank} exceeds {WDT1_MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut ext = [0u8; 4];
            r.read_exact(&mut ext)?;
            shape.push(u32::from_le_bytes(ext) as usize);
        }
        let numel = checked_numel(&shape)?;
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Tensor::new(&shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_wdt1(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_wdt1(&mut file)
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("rank-0 tensors are not supported"));
    }
    let mut numel = 1usize;
    for &ext in shape {
        if ext == 0 {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        numel = numel
            .checked_mul(ext)
            .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows usize")))?;
    }
    Ok(numel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_shape_and_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::new(&[2, 0], vec![]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::new(&[1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(Tensor::new(&[], vec![]), Err(Error::Shape(_))));
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[0, 0, 0]).unwrap(), 0.0);
        assert_eq!(t.at(&[0, 0, 3]).unwrap(), 3.0);
        assert_eq!(t.at(&[0, 1, 0]).unwrap(), 4.0);
        assert_eq!(t.at(&[1, 0, 0]).unwrap(), 12.0);
        assert_eq!(t.at(&[1, 2, 3]).unwrap(), 23.0);
        assert!(t.at(&[1, 3, 0]).is_err());
        assert!(t.at(&[1, 2]).is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::zeros(&[3]).unwrap();
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5, 3.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
        assert!(t.accumulate_grad(&[0.0; 2]).is_err());
    }

    #[test]
    fn wdt1_round_trip_is_byte_stable() {
        let t = Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap();
        let mut bytes = Vec::new();
        t.write_wdt1(&mut bytes).unwrap();
        // magic + rank + 2 extents + 4 doubles
        assert_eq!(bytes.len(), 4 + 1 + 8 + 32);
        assert_eq!(&bytes[..4], b"WDT1");
        assert_eq!(bytes[4], 2);
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());

        let back = Tensor::read_wdt1(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());

        let mut again = Vec::new();
        back.write_wdt1(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn wdt1_rejects_bad_magic() {
        let mut bytes = Vec::new();
        Tensor::scalar(1.0).unwrap().write_wdt1(&mut bytes).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Tensor::read_wdt1(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn wdt1_rejects_truncation() {
        let mut bytes = Vec::new();
        Tensor::new(&[3], vec![1.0, 2.0, 3.0])
            .unwrap()
            .write_wdt1(&mut bytes)
            .unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(Tensor::read_wdt1(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wdt1");
        let t = Tensor::new(&[1, 2, 2], vec![9.0, 8.0, 7.0, 6.0]).unwrap();
        t.save(&path).unwrap();
        let back = Tensor::load(&path).unwrap();
        assert_eq!(back, Tensor::new(&[1, 2, 2], vec![9.0, 8.0, 7.0, 6.0]).unwrap());
    }
}
