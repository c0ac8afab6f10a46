//! Angular prototypical and softmax cross-entropy objectives.

use crate::error::{invalid, shape_err, Result};
use crate::params::{self, ParamStore, Rng64, Scope};
use crate::tensor::{Graph, Tensor, Var};

pub const PROTO_SCALE_INIT: f64 = 10.0;
pub const PROTO_BIAS_INIT: f64 = -5.0;
pub const PROTO_SCALE_FLOOR: f64 = 1e-6;

/// Learnable scale `w` and bias `b`, both `[1]`.
#[derive(Clone, Copy, Debug)]
pub struct AngularProtoParams {
    pub w: Var,
    pub b: Var,
}

/// Classifier weight `[S, D]` and bias `[S]`.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierHead {
    pub weight: Var,
    pub bias: Var,
}

pub fn init_proto(store: &mut ParamStore) -> Result<()> {
    store.insert("proto.w", params::filled(&[1], PROTO_SCALE_INIT))?;
    store.insert("proto.b", params::filled(&[1], PROTO_BIAS_INIT))
}

pub fn init_head(store: &mut ParamStore, speakers: usize, dim: usize, rng: &mut Rng64) -> Result<()> {
    if speakers == 0 || dim == 0 {
        return invalid("classifier extents must be positive");
    }
    store.insert("head.weight", params::linear_init(&[speakers, dim], dim, rng))?;
    store.insert("head.bias", params::filled(&[speakers], 0.0))
}

pub fn bind_proto(scope: &Scope<'_>) -> Result<AngularProtoParams> {
    Ok(AngularProtoParams { w: scope.p("proto.w")?, b: scope.p("proto.b")? })
}

pub fn bind_head(scope: &Scope<'_>) -> Result<ClassifierHead> {
    Ok(ClassifierHead { weight: scope.p("head.weight")?, bias: scope.p("head.bias")? })
}

/// Keeps the scale above its floor after an optimizer step.
pub fn clamp_proto_scale(store: &mut ParamStore) -> Result<()> {
    if let Some(w) = store.get("proto.w") {
        let v = w.data()[0].max(PROTO_SCALE_FLOOR);
        store.set("proto.w", Tensor::scalar(v)?)?;
    }
    Ok(())
}

fn batch_dims(g: &Graph, batch: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(batch) {
        [n, m, d] if m >= 2 => Ok((n, m, d)),
        ref s => shape_err("prototypical batch", format!("expected [N, M >= 2, D], got {s:?}")),
    }
}

/// Mean of the first `M - 1` utterances of speaker `j`, `[D]`.
pub fn speaker_prototype(g: &mut Graph, batch: Var, j: usize) -> Result<Var> {
    let (n, m, d) = batch_dims(g, batch)?;
    if j >= n {
        return invalid(format!("speaker {j} out of range for {n} speakers"));
    }
    let row = g.narrow(batch, 0, j, 1)?;
    let support = g.narrow(row, 1, 0, m - 1)?;
    let c = g.mean(support, &[1])?;
    g.reshape(c, &[d])
}

/// Every prototype at once, `[N, D]`.
pub fn prototypes(g: &mut Graph, batch: Var) -> Result<Var> {
    let (n, m, d) = batch_dims(g, batch)?;
    let support = g.narrow(batch, 1, 0, m - 1)?;
    let c = g.mean(support, &[1])?;
    g.reshape(c, &[n, d])
}

fn unit_rows(g: &mut Graph, x: Var, what: &str) -> Result<Var> {
    let sq = g.square(x)?;
    let ss = g.sum(sq, &[1])?;
    if g.value(ss).data().iter().any(|&v| v == 0.0) {
        return invalid(format!("zero-norm {what} in cosine similarity"));
    }
    let norm = g.sqrt(ss)?;
    g.div(x, norm)
}

/// `-(1/N) sum_j log softmax_j(w * cos(x_{j,M}, c_k) + b)`.
pub fn angular_proto_loss(g: &mut Graph, batch: Var, p: &AngularProtoParams) -> Result<Var> {
    let (n, m, d) = batch_dims(g, batch)?;
    let centroids = prototypes(g, batch)?;
    let queries = g.narrow(batch, 1, m - 1, 1)?;
    let queries = g.reshape(queries, &[n, d])?;
    let q = unit_rows(g, queries, "query")?;
    let c = unit_rows(g, centroids, "prototype")?;
    let ct = g.permute(c, &[1, 0])?;
    let cos = g.matmul(q, ct)?;
    let w = g.clamp_min(p.w, PROTO_SCALE_FLOOR)?;
    let w = g.reshape(w, &[1, 1])?;
    let b = g.reshape(p.b, &[1, 1])?;
    let s = g.mul(cos, w)?;
    let s = g.add(s, b)?;
    let ls = g.log_softmax_over(s, &[1])?;
    let eye = g.constant(Tensor::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })?);
    let diag = g.mul(ls, eye)?;
    let total = g.sum_all(diag)?;
    g.scale(total, -1.0 / n as f64)
}

/// Mean negative log-likelihood of `labels` under `embeddings x W^T + b`.
pub fn softmax_ce_loss(g: &mut Graph, embeddings: Var, labels: &[usize], head: &ClassifierHead) -> Result<Var> {
    let (rows, d) = match *g.shape(embeddings) {
        [r, d] => (r, d),
        ref s => return shape_err("softmax_ce_loss", format!("embeddings must be [B, D], got {s:?}")),
    };
    let classes = g.shape(head.weight)[0];
    if g.shape(head.weight) != [classes, d] || g.shape(head.bias) != [classes] {
        return shape_err(
            "softmax_ce_loss",
            format!("head {:?} / {:?} for dimension {d}", g.shape(head.weight), g.shape(head.bias)),
        );
    }
    if labels.len() != rows {
        return shape_err("softmax_ce_loss", format!("{} labels for {rows} rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return invalid(format!("label {bad} out of range for {classes} classes"));
    }
    let wt = g.permute(head.weight, &[1, 0])?;
    let logits = g.matmul(embeddings, wt)?;
    let bias = g.reshape(head.bias, &[1, classes])?;
    let logits = g.add(logits, bias)?;
    logits_ce(g, logits, labels)
}

/// Cross-entropy from precomputed `[B, C]` logits.
pub fn logits_ce(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = match *g.shape(logits) {
        [r, c] => (r, c),
        ref s => return shape_err("logits_ce", format!("logits must be [B, C], got {s:?}")),
    };
    if labels.len() != rows || labels.iter().any(|&l| l >= classes) {
        return invalid(format!("labels {labels:?} do not fit {rows} x {classes} logits"));
    }
    let ls = g.log_softmax_over(logits, &[1])?;
    let onehot = g.constant(Tensor::from_fn(vec![rows, classes], |i| {
        if labels[i / classes] == i % classes {
            1.0
        } else {
            0.0
        }
    })?);
    let picked = g.mul(ls, onehot)?;
    let total = g.sum_all(picked)?;
    g.scale(total, -1.0 / rows as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub ce: Var,
    pub proto: Var,
    pub total: Var,
}

/// `L = L_s + L_p`.
///
/// `batch` holds the embeddings fed to the prototypical term as `[N, M, D]`;
/// `ce_inputs` are the rows fed to the classifier with matching `labels`.
pub fn combined_loss(
    g: &mut Graph,
    batch: Var,
    ce_inputs: Var,
    labels: &[usize],
    head: &ClassifierHead,
    p: &AngularProtoParams,
) -> Result<LossParts> {
    let ce = softmax_ce_loss(g, ce_inputs, labels, head)?;
    let proto = angular_proto_loss(g, batch, p)?;
    let total = g.add(ce, proto)?;
    Ok(LossParts { ce, proto, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proto(g: &mut Graph, w: f64, b: f64) -> AngularProtoParams {
        AngularProtoParams { w: g.param(Tensor::scalar(w).unwrap()), b: g.param(Tensor::scalar(b).unwrap()) }
    }

    #[test]
    fn single_speaker_loss_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 3], vec![1.0, 0.0, 0.0, 0.6, 0.8, 0.0]).unwrap());
        let p = proto(&mut g, 10.0, -5.0);
        let l = angular_proto_loss(&mut g, x, &p).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn orthogonal_speakers_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap());
        let p = proto(&mut g, 10.0, 0.0);
        let l = angular_proto_loss(&mut g, x, &p).unwrap();
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((g.value(l).data()[0] - expected).abs() < 1e-15);
        assert!((expected - 4.5399e-5).abs() < 1e-9);
    }

    #[test]
    fn prototype_of_three() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3, 2], vec![1.0, 0.0, 0.0, 1.0, 5.0, 5.0]).unwrap());
        let c = speaker_prototype(&mut g, x, 0).unwrap();
        assert_eq!(g.value(c).data(), &[0.5, 0.5]);
        assert!(speaker_prototype(&mut g, x, 1).is_err());
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![3, 7]).unwrap());
        let l = logits_ce(&mut g, logits, &[0, 3, 6]).unwrap();
        assert!((g.value(l).data()[0] - 7f64.ln()).abs() < 1e-14);
        assert!(logits_ce(&mut g, logits, &[0, 3, 7]).is_err());
    }

    #[test]
    fn zero_norm_query_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap());
        let p = proto(&mut g, 10.0, 0.0);
        assert!(angular_proto_loss(&mut g, x, &p).is_err());
    }
}
