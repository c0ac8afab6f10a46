use std::io::{Read, Write};

use crate::error::{shape_err, Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Every stored value is finite; constructors reject NaN and infinities.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return shape_err("tensor", format!("extents must be positive, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} holds {numel} values but {} were given", data.len()),
            );
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose values are already known to be finite and consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() || shape.iter().any(|&d| d == 0) {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    /// Replaces the value at `flat`; used by finite-difference probes.
    pub fn with_value(&self, flat: usize, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "with_value" });
        }
        let mut data = self.data.clone();
        data[flat] = value;
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Writes the little-endian dump: rank (u64), extents (u64 each), values (f64 each).
    pub fn write_dump<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_dump<R: Read>(r: &mut R) -> Result<Self> {
        let rank = read_u64(r)? as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::Malformed(format!("tensor dump rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n <= 1 << 32)
            .ok_or_else(|| Error::Malformed(format!("tensor dump extents {shape:?}")))?;
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::new(shape, data)
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Malformed("truncated tensor dump".into())
    } else {
        Error::Io(e)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    index.iter().zip(shape).fold(0, |acc, (&i, &d)| {
        assert!(i < d, "index {i} out of range for extent {d}");
        acc * d + i
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_and_nonfinite() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn dump_round_trip_is_bit_exact() {
        let t = Tensor::from_fn(vec![2, 3, 1], |i| (i as f64).sin() * 1e-3).unwrap();
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 3 * 8 + 6 * 8);
        assert_eq!(&buf[..8], &3u64.to_le_bytes());
        let back = Tensor::read_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_dump_is_reported() {
        let t = Tensor::ones(vec![4]).unwrap();
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Tensor::read_dump(&mut buf.as_slice()), Err(Error::Malformed(_))));
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(flat_index(&[2, 3, 4], &[1, 2, 3]), 23);
    }
}
