//! Dense numeric kernels shared by the graph operations.

use crate::error::{shape_err, Error, Result};

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    pub(crate) fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub(crate) fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

/// `c = a(m x k) * b(k x n) + beta * c`, with `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, c: &mut [f64], beta: f64) {
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len(), "gemm lhs out of bounds");
    assert!((k - 1) * b.rs + (n - 1) * b.cs < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major walk over `shape`, yielding `sum(index[i] * eff[i])` per element.
pub(crate) fn index_map(shape: &[usize], eff: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    if rank == 0 {
        out.push(0);
        return out;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    loop {
        for j in 0..shape[last] {
            out.push(off + j * eff[last]);
        }
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            off += eff[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= eff[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn invalid_op<T>(op: &'static str, msg: &str) -> Result<T> {
    Err(Error::InvalidArgument(format!("{op}: {msg}")))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub(crate) fn new(x: &[usize], w: &[usize], stride: (usize, usize), pad: (usize, usize)) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return shape_err("conv2d", format!("input {x:?} and weight {w:?} must both be rank 4"));
        }
        if w[1] != x[1] {
            return shape_err("conv2d", format!("weight expects {} input channels, input has {}", w[1], x[1]));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return shape_err("conv2d", "stride must be positive");
        }
        let (h, wd) = (x[2] + 2 * pad.0, x[3] + 2 * pad.1);
        if w[2] > h || w[3] > wd {
            return shape_err("conv2d", format!("kernel {}x{} exceeds padded input {h}x{wd}", w[2], w[3]));
        }
        Ok(Self {
            n: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            kh: w[2],
            kw: w[3],
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            oh: (h - w[2]) / stride.0 + 1,
            ow: (wd - w[3]) / stride.1 + 1,
        })
    }

    pub(crate) fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub(crate) fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub(crate) fn in_sample(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }

    /// Input row/column touched by output `o` at kernel tap `k`, if inside the unpadded input.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&v| v < extent)
    }

    pub(crate) fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let plane = self.out_plane();
        let mut cols = vec![0.0; self.k() * plane];
        for c in 0..self.cin {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * plane;
                    for oy in 0..self.oh {
                        let Some(iy) = Self::src(oy, i, self.sh, self.ph, self.h) else { continue };
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let src = &xc[iy * self.w..(iy + 1) * self.w];
                        if self.sw == 1 {
                            // contiguous run of valid columns
                            let lo = self.pw.saturating_sub(j).min(self.ow);
                            let hi = (self.w + self.pw).saturating_sub(j).min(self.ow);
                            if lo < hi {
                                dst[lo..hi].copy_from_slice(&src[lo + j - self.pw..hi + j - self.pw]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                if let Some(ix) = Self::src(ox, j, self.sw, self.pw, self.w) {
                                    *d = src[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub(crate) fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.cin {
            let dxc = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * plane;
                    for oy in 0..self.oh {
                        let Some(iy) = Self::src(oy, i, self.sh, self.ph, self.h) else { continue };
                        let src = &cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let dst = &mut dxc[iy * self.w..(iy + 1) * self.w];
                        for (ox, &v) in src.iter().enumerate() {
                            if let Some(ix) = Self::src(ox, j, self.sw, self.pw, self.w) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adaptive average pooling bins: output cell `i` averages input `[floor(i*in/out), ceil((i+1)*in/out))`.
pub(crate) struct AdaptivePool {
    h: usize,
    w: usize,
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

fn bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| ((i * input) / output, ((i + 1) * input).div_ceil(output)))
        .collect()
}

impl AdaptivePool {
    pub(crate) fn new(h: usize, w: usize, oh: usize, ow: usize) -> Self {
        Self { h, w, rows: bins(h, oh), cols: bins(w, ow) }
    }

    pub(crate) fn forward(&self, x: &[f64], planes: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(planes * self.rows.len() * self.cols.len());
        for p in 0..planes {
            let xp = &x[p * self.h * self.w..(p + 1) * self.h * self.w];
            for &(r0, r1) in &self.rows {
                for &(c0, c1) in &self.cols {
                    let mut s = 0.0;
                    for r in r0..r1 {
                        s += xp[r * self.w + c0..r * self.w + c1].iter().sum::<f64>();
                    }
                    out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        out
    }

    pub(crate) fn backward(&self, gout: &[f64], planes: usize) -> Vec<f64> {
        let mut g = vec![0.0; planes * self.h * self.w];
        let mut it = gout.iter();
        for p in 0..planes {
            let gp = &mut g[p * self.h * self.w..(p + 1) * self.h * self.w];
            for &(r0, r1) in &self.rows {
                for &(c0, c1) in &self.cols {
                    let d = it.next().expect("gradient length") / ((r1 - r0) * (c1 - c0)) as f64;
                    for r in r0..r1 {
                        gp[r * self.w + c0..r * self.w + c1].iter_mut().for_each(|v| *v += d);
                    }
                }
            }
        }
        g
    }
}
