//! Cosine scoring and verification metrics.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return invalid(format!("cosine of vectors with lengths {} and {}", a.len(), b.len()));
    }
    let na: f64 = a.iter().map(|v| v * v).sum();
    let nb: f64 = b.iter().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        return invalid("cosine score of a zero vector");
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
}

/// Sorted target and nontarget scores.
struct Split {
    tar: Vec<f64>,
    non: Vec<f64>,
}

fn split(labels: &[bool], scores: &[f64]) -> Result<Split> {
    if labels.len() != scores.len() {
        return invalid(format!("{} labels for {} scores", labels.len(), scores.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return invalid("scores must be finite");
    }
    let mut tar: Vec<f64> = labels.iter().zip(scores).filter(|(l, _)| **l).map(|(_, s)| *s).collect();
    let mut non: Vec<f64> = labels.iter().zip(scores).filter(|(l, _)| !**l).map(|(_, s)| *s).collect();
    if tar.is_empty() || non.is_empty() {
        return invalid("metrics need at least one target and one nontarget trial");
    }
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    Ok(Split { tar, non })
}

/// Operating point at threshold `t`: accept iff `score >= t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

impl Split {
    /// One point per distinct observed score plus `+inf`, in increasing threshold order.
    fn sweep(&self) -> Vec<OperatingPoint> {
        let mut thr: Vec<f64> = self.tar.iter().chain(&self.non).copied().collect();
        thr.sort_by(f64::total_cmp);
        thr.dedup();
        thr.push(f64::INFINITY);
        let (nt, nn) = (self.tar.len() as f64, self.non.len() as f64);
        let (mut it, mut inn) = (0, 0);
        thr.into_iter()
            .map(|t| {
                while it < self.tar.len() && self.tar[it] < t {
                    it += 1;
                }
                while inn < self.non.len() && self.non[inn] < t {
                    inn += 1;
                }
                OperatingPoint { threshold: t, far: (self.non.len() - inn) as f64 / nn, frr: it as f64 / nt }
            })
            .collect()
    }
}

/// Equal error rate and its threshold.
///
/// The sweep starts at the lowest score (FRR = 0) and ends at `+inf` (FAR = 0).
/// When FAR and FRR cross between two adjacent points, both rates are
/// interpolated linearly and the threshold is the interpolated score.
pub fn compute_eer(labels: &[bool], scores: &[f64]) -> Result<(f64, f64)> {
    let pts = split(labels, scores)?.sweep();
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.far - a.frr;
        let db = b.far - b.frr;
        if da == 0.0 {
            return Ok((a.far, a.threshold));
        }
        if da > 0.0 && db <= 0.0 {
            if db == 0.0 {
                return Ok((b.far, b.threshold));
            }
            let lam = da / (da - db);
            let eer = a.far + lam * (b.far - a.far);
            let thr = if b.threshold.is_finite() { a.threshold + lam * (b.threshold - a.threshold) } else { a.threshold };
            return Ok((eer, thr));
        }
    }
    let last = pts[pts.len() - 1];
    Ok((last.far.max(last.frr), last.threshold))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self { p_target: 0.01, c_miss: 1.0, c_fa: 1.0 }
    }
}

impl DcfParams {
    pub fn normalized_cost(&self, far: f64, frr: f64) -> f64 {
        let raw = self.c_miss * self.p_target * frr + self.c_fa * (1.0 - self.p_target) * far;
        raw / (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// Minimum normalized detection cost over the observed thresholds plus `+-inf`.
pub fn compute_min_dcf(labels: &[bool], scores: &[f64], p: &DcfParams) -> Result<(f64, f64)> {
    if !(p.p_target > 0.0 && p.p_target < 1.0 && p.c_miss > 0.0 && p.c_fa > 0.0) {
        return invalid("DCF needs 0 < p_target < 1 and positive costs");
    }
    let s = split(labels, scores)?;
    let mut best = (p.normalized_cost(1.0, 0.0), f64::NEG_INFINITY);
    for op in s.sweep() {
        let c = p.normalized_cost(op.far, op.frr);
        if c < best.0 {
            best = (c, op.threshold);
        }
    }
    Ok(best)
}

/// `(FAR, FRR)` at `-inf` and at every distinct score and `+inf`, by increasing threshold.
pub fn det_points(labels: &[bool], scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    let s = split(labels, scores)?;
    let mut out = vec![(1.0, 0.0)];
    out.extend(s.sweep().into_iter().map(|op| (op.far, op.frr)));
    out.dedup();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Report {
    pub eer: f64,
    pub min_dcf: f64,
    pub thr_eer: f64,
    pub thr_dcf: f64,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EER={:.6} minDCF={:.6} thr_eer={:.6} thr_dcf={:.6}", self.eer, self.min_dcf, self.thr_eer, self.thr_dcf)
    }
}

pub fn evaluate(labels: &[bool], scores: &[f64], p: &DcfParams) -> Result<Report> {
    let (eer, thr_eer) = compute_eer(labels, scores)?;
    let (min_dcf, thr_dcf) = compute_min_dcf(labels, scores, p)?;
    Ok(Report { eer, min_dcf, thr_eer, thr_dcf })
}

pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [] => continue,
            [l @ ("0" | "1"), e, t] => out.push(Trial { target: *l == "1", enroll: e.to_string(), test: t.to_string() }),
            _ => return Err(Error::Malformed(format!("trial line {}: expected `1|0 enroll test`", n + 1))),
        }
    }
    if out.is_empty() {
        return Err(Error::Malformed("empty trial list".into()));
    }
    Ok(out)
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&fs::read_to_string(path)?)
}

pub fn format_trials(trials: &[Trial]) -> String {
    trials.iter().map(|t| format!("{} {} {}\n", u8::from(t.target), t.enroll, t.test)).collect()
}

/// `enroll test score` lines keyed by the id pair.
pub fn parse_scores(text: &str) -> Result<HashMap<(String, String), f64>> {
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [] => continue,
            [e, t, s] => {
                let v: f64 = s
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| Error::Malformed(format!("score line {}: bad score {s}", n + 1)))?;
                out.insert((e.to_string(), t.to_string()), v);
            }
            _ => return Err(Error::Malformed(format!("score line {}: expected `enroll test score`", n + 1))),
        }
    }
    Ok(out)
}

pub fn format_scores(trials: &[Trial], scores: &[f64]) -> String {
    trials.iter().zip(scores).map(|(t, s)| format!("{} {} {s:.17e}\n", t.enroll, t.test)).collect()
}

/// Scores in trial order; every trial must have a score.
pub fn align_scores(trials: &[Trial], scores: &HashMap<(String, String), f64>) -> Result<Vec<f64>> {
    trials
        .iter()
        .map(|t| {
            scores
                .get(&(t.enroll.clone(), t.test.clone()))
                .copied()
                .ok_or_else(|| Error::Malformed(format!("no score for trial {} {}", t.enroll, t.test)))
        })
        .collect()
}

pub fn det_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("far,frr\n");
    for (a, r) in points {
        s.push_str(&format!("{a},{r}\n"));
    }
    s
}
