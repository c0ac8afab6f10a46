//! Unnormalized 2D-DCT-II basis grids for frequency-domain pooling.
//!
//! `B[i,j](f,t) = cos(pi*i*(f+1/2)/F) * cos(pi*j*(t+1/2)/T)`. No orthonormal
//! scaling is applied; `B[0,0]` is all ones, so pooling with it is a plain sum.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

pub fn basis_weight(i: usize, j: usize, f: usize, t: usize, f_len: usize, t_len: usize) -> Result<f64> {
    if i >= f_len || f >= f_len || j >= t_len || t >= t_len {
        return invalid(format!(
            "DCT index (i={i}, j={j}, f={f}, t={t}) out of range for a {f_len}x{t_len} grid"
        ));
    }
    Ok(weight_unchecked(i, j, f, t, f_len, t_len))
}

fn weight_unchecked(i: usize, j: usize, f: usize, t: usize, f_len: usize, t_len: usize) -> f64 {
    let a = PI * i as f64 * (f as f64 + 0.5) / f_len as f64;
    let b = PI * j as f64 * (t as f64 + 0.5) / t_len as f64;
    a.cos() * b.cos()
}

/// One basis grid, `f_len x t_len`, row-major over frequency then time.
#[derive(Clone, Debug, PartialEq)]
pub struct DctBasis {
    pub i: usize,
    pub j: usize,
    pub f_len: usize,
    pub t_len: usize,
    weights: Vec<f64>,
}

impl DctBasis {
    pub fn new(i: usize, j: usize, f_len: usize, t_len: usize) -> Result<Self> {
        if i >= f_len || j >= t_len {
            return invalid(format!("component ({i},{j}) outside a {f_len}x{t_len} grid"));
        }
        let mut weights = Vec::with_capacity(f_len * t_len);
        for f in 0..f_len {
            for t in 0..t_len {
                weights.push(weight_unchecked(i, j, f, t, f_len, t_len));
            }
        }
        Ok(Self { i, j, f_len, t_len, weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, f: usize, t: usize) -> f64 {
        self.weights[f * self.t_len + t]
    }
}

/// The `K` lowest components of an `F x T` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DctBasisSet {
    components: Vec<DctBasis>,
    pub f_len: usize,
    pub t_len: usize,
}

/// All `(i, j)` of an `F x T` grid, ascending by `i + j`, ties by smaller `i`.
pub fn low_frequency_order(f_len: usize, t_len: usize) -> Vec<(usize, usize)> {
    let mut idx: Vec<(usize, usize)> = (0..f_len).flat_map(|i| (0..t_len).map(move |j| (i, j))).collect();
    idx.sort_by_key(|&(i, j)| (i + j, i));
    idx
}

pub fn build_basis_set(f_len: usize, t_len: usize, k: usize) -> Result<DctBasisSet> {
    if f_len == 0 || t_len == 0 {
        return invalid("DCT grid extents must be positive");
    }
    if k == 0 || k > f_len * t_len {
        return invalid(format!("K={k} outside 1..={} for a {f_len}x{t_len} grid", f_len * t_len));
    }
    let components = low_frequency_order(f_len, t_len)
        .into_iter()
        .take(k)
        .map(|(i, j)| DctBasis::new(i, j, f_len, t_len))
        .collect::<Result<_>>()?;
    Ok(DctBasisSet { components, f_len, t_len })
}

impl DctBasisSet {
    pub fn shared(f_len: usize, t_len: usize, k: usize) -> Result<Arc<Self>> {
        build_basis_set(f_len, t_len, k).map(Arc::new)
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[DctBasis] {
        &self.components
    }

    pub fn indices(&self) -> Vec<(usize, usize)> {
        self.components.iter().map(|b| (b.i, b.j)).collect()
    }

    /// Column-stacked `[F*T, K]` matrix, so `X[rows, F*T] x M` pools every row at once.
    pub fn as_matrix(&self) -> Tensor {
        let (ft, k) = (self.f_len * self.t_len, self.len());
        Tensor::from_fn(vec![ft, k], |idx| self.components[idx % k].weights[idx / k])
            .expect("cosines are finite")
    }
}

/// `sum_{f,t} B[f,t] * X[f,t]` over one channel slice.
pub fn dct2_pool(map: &[f64], f_len: usize, t_len: usize, basis: &DctBasis) -> Result<f64> {
    if f_len != basis.f_len || t_len != basis.t_len || map.len() != f_len * t_len {
        return shape_err(
            "dct2_pool",
            format!("{f_len}x{t_len} map ({} values) vs {}x{} basis", map.len(), basis.f_len, basis.t_len),
        );
    }
    Ok(map.iter().zip(&basis.weights).map(|(x, b)| x * b).sum())
}
