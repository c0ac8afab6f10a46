//! Embedding extraction and trial scoring from a checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gcm_core::backbone::Embedder;
use gcm_core::checkpoint::Checkpoint;
use gcm_core::metrics::{self, cosine_score, det_points, evaluate, DcfParams, Report, Trial};
use gcm_core::params::{Bindings, ParamStore, Scope, StatsStore};
use gcm_core::tensor::{Graph, Tensor};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{extract, stack_chunks};
use crate::CliError;

pub const SCORES: &str = "scores.txt";
pub const REPORT: &str = "report.txt";
pub const DET: &str = "det.csv";

const EMBED_BATCH: usize = 16;

pub struct LoadedModel {
    pub cfg: RunConfig,
    pub model: Embedder,
    pub params: ParamStore,
    pub stats: StatsStore,
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let ck = Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let cfg = RunConfig::from_json(&ck.config)?;
        let model = Embedder::new(cfg.model.clone())?;
        Ok(Self { cfg, model, params: ck.params, stats: ck.stats })
    }

    /// Unit embeddings of a `[B, 1, F, T]` batch in inference mode.
    pub fn embed_batch(&self, x: Tensor) -> Result<Vec<Vec<f64>>, CliError> {
        let mut g = Graph::new();
        let bind = Bindings::bind(&mut g, &self.params, false);
        let mut stats = self.stats.clone();
        let mut scope = Scope { g: &mut g, params: &bind, stats: &mut stats, training: false };
        let x = scope.g.constant(x);
        let e = self.model.embed(&mut scope, x)?;
        let d = g.shape(e)[1];
        Ok(g.value(e).data().chunks(d).map(<[f64]>::to_vec).collect())
    }

    /// Center-chunk embeddings of feature maps, in input order.
    pub fn embed_features(&self, feats: &[Tensor]) -> Result<Vec<Vec<f64>>, CliError> {
        let chunk = self.cfg.features.chunk_frames;
        let parts = feats
            .par_chunks(EMBED_BATCH)
            .map(|c| {
                let refs: Vec<&Tensor> = c.iter().collect();
                self.embed_batch(stack_chunks(&refs, chunk, None)?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn embed_files(&self, paths: &[PathBuf]) -> Result<Vec<Vec<f64>>, CliError> {
        let feats = paths.par_iter().map(|p| extract(p, &self.cfg.features)).collect::<Result<Vec<_>, _>>()?;
        self.embed_features(&feats)
    }
}

pub struct EvalOutcome {
    pub report: Report,
    pub scored: Vec<Trial>,
    pub scores: Vec<f64>,
    /// Ids that did not resolve to a readable file.
    pub missing: Vec<String>,
}

/// Scores every trial whose files exist and writes `scores.txt`, `report.txt`
/// and `det.csv` under `out_dir`. Ids resolve relative to the trial file.
pub fn run_eval(checkpoint: &Path, trials_path: &Path, out_dir: &Path) -> Result<EvalOutcome, CliError> {
    let lm = LoadedModel::load(checkpoint)?;
    let trials = metrics::read_trials(trials_path).map_err(|e| CliError::Data(format!("{}: {e}", trials_path.display())))?;
    let base = trials_path.parent().unwrap_or_else(|| Path::new("."));
    let mut ids: BTreeMap<&str, Option<usize>> = BTreeMap::new();
    for t in &trials {
        ids.insert(&t.enroll, None);
        ids.insert(&t.test, None);
    }
    let mut present = Vec::new();
    let mut missing = Vec::new();
    for (id, slot) in ids.iter_mut() {
        let p = base.join(id);
        if p.is_file() {
            *slot = Some(present.len());
            present.push(p);
        } else {
            missing.push(id.to_string());
        }
    }
    let emb = lm.embed_files(&present)?;
    let mut scored = Vec::new();
    let mut scores = Vec::new();
    for t in &trials {
        if let (Some(a), Some(b)) = (ids[t.enroll.as_str()], ids[t.test.as_str()]) {
            scores.push(cosine_score(&emb[a], &emb[b])?);
            scored.push(t.clone());
        }
    }
    let labels: Vec<bool> = scored.iter().map(|t| t.target).collect();
    let report = evaluate(&labels, &scores, &DcfParams::default()).map_err(|e| CliError::Data(e.to_string()))?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(SCORES), metrics::format_scores(&scored, &scores))?;
    fs::write(out_dir.join(REPORT), format!("{report}\n"))?;
    let det = det_points(&labels, &scores).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(out_dir.join(DET), metrics::det_csv(&det))?;
    Ok(EvalOutcome { report, scored, scores, missing })
}

/// Cosine score between two WAV files.
pub fn score_pair(checkpoint: &Path, a: &Path, b: &Path) -> Result<f64, CliError> {
    let lm = LoadedModel::load(checkpoint)?;
    let e = lm.embed_files(&[a.to_path_buf(), b.to_path_buf()])?;
    Ok(cosine_score(&e[0], &e[1])?)
}
