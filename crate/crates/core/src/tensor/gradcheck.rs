use super::graph::{Graph, Var};
use super::value::Tensor;
use crate::error::{invalid, Error, Result};

/// Default central-difference step for double precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of `f` at `x` with central differences.
///
/// `f` receives a fresh graph and the leaf holding `x` and must return a
/// `[1]`-shaped value. Returns `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, h, &all)
}

/// Like [`finite_diff_check`] but probes only the listed flat indices.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, h: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return invalid("finite-difference step must be positive");
    }
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    if g.shape(out) != [1] {
        return Err(Error::NotScalar(g.shape(out).to_vec()));
    }
    g.backward(out)?;
    let analytic = g.grad(leaf).unwrap_or_else(|| Tensor::from_parts(x.shape().to_vec(), vec![0.0; x.numel()]));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(t);
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    for &i in indices {
        let v = x.data()[i];
        let plus = eval(x.with_value(i, v + h)?)?;
        let minus = eval(x.with_value(i, v - h)?)?;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
