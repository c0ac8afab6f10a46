//! Corpus layout, feature extraction, batch sampling and trial lists.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use gcm_core::features::{chunk_frames, compute_fbank, mean_normalize, read_wav, ChunkMode};
use gcm_core::metrics::{format_trials, Trial};
use gcm_core::params::{seeded, Rng64};
use gcm_core::synth::{self, read_manifest, resolve, write_manifest, ManifestEntry};
use gcm_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::config::{DataConfig, FeatureConfig};
use crate::CliError;

pub const MANIFEST: &str = "manifest.txt";
pub const TRAIN_MANIFEST: &str = "train_manifest.txt";
pub const EVAL_MANIFEST: &str = "eval_manifest.txt";
pub const TRIALS: &str = "trials.txt";

/// Mean-normalized log-mel features of one file, `[F, T]`.
pub fn extract(path: &Path, cfg: &FeatureConfig) -> Result<Tensor, CliError> {
    let wave = read_wav(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let fb = compute_fbank(&wave, &cfg.fbank).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(mean_normalize(&fb, cfg.norm)?)
}

/// Training utterances with integer speaker labels.
pub struct FeatureBank {
    pub feats: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub speakers: Vec<String>,
}

impl FeatureBank {
    pub fn load(manifest: &Path, cfg: &FeatureConfig) -> Result<Self, CliError> {
        let entries = read_manifest(manifest).map_err(|e| CliError::Data(e.to_string()))?;
        let mut speakers: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let labels = entries
            .iter()
            .map(|e| {
                *index.entry(e.speaker.clone()).or_insert_with(|| {
                    speakers.push(e.speaker.clone());
                    speakers.len() - 1
                })
            })
            .collect();
        let feats = entries
            .par_iter()
            .map(|e| extract(&resolve(manifest, &e.path), cfg))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { feats, labels, speakers })
    }
}

/// Groups of `m` same-speaker utterance indices, packed into batches of at
/// most `speakers_per_batch` distinct speakers. Batches with fewer than two
/// speakers are dropped.
pub fn epoch_batches(labels: &[usize], speakers_per_batch: usize, m: usize, rng: &mut Rng64) -> Vec<Vec<Vec<usize>>> {
    let n_spk = labels.iter().max().map_or(0, |&l| l + 1);
    let mut queues: Vec<Vec<Vec<usize>>> = (0..n_spk)
        .map(|s| {
            let mut utts: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == s).collect();
            utts.shuffle(rng);
            utts.chunks_exact(m).map(<[usize]>::to_vec).collect()
        })
        .collect();
    let mut batches = Vec::new();
    loop {
        let mut order: Vec<usize> = (0..n_spk).filter(|&s| !queues[s].is_empty()).collect();
        if order.len() < 2 {
            break;
        }
        order.shuffle(rng);
        order.sort_by_key(|&s| std::cmp::Reverse(queues[s].len()));
        let batch: Vec<Vec<usize>> =
            order.into_iter().take(speakers_per_batch).map(|s| queues[s].pop().expect("non-empty")).collect();
        batches.push(batch);
    }
    batches
}

/// `[B, 1, F, chunk]` stack of random chunks.
pub fn stack_chunks(feats: &[&Tensor], chunk: usize, rng: Option<&mut Rng64>) -> Result<Tensor, CliError> {
    let f = feats.first().map_or(0, |t| t.shape()[0]);
    let mut data = Vec::with_capacity(feats.len() * f * chunk);
    let mut rng = rng;
    for t in feats {
        let c = match rng.as_deref_mut() {
            Some(r) => chunk_frames(t, chunk, ChunkMode::Random(r))?,
            None => chunk_frames::<Rng64>(t, chunk, ChunkMode::Center)?,
        };
        data.extend_from_slice(c.data());
    }
    Ok(Tensor::new(vec![feats.len(), 1, f, chunk], data)?)
}

/// Per speaker, the last `held_out` manifest entries go to evaluation.
pub fn split_manifest(entries: &[ManifestEntry], held_out: usize) -> (Vec<ManifestEntry>, Vec<ManifestEntry>) {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for e in entries {
        *counts.entry(&e.speaker).or_default() += 1;
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for e in entries {
        let k = seen.entry(&e.speaker).or_default();
        if *k + held_out >= counts[e.speaker.as_str()] {
            eval.push(e.clone());
        } else {
            train.push(e.clone());
        }
        *k += 1;
    }
    (train, eval)
}

/// Balanced trials over `entries`: `per_class` distinct same-speaker pairs and
/// `per_class` distinct cross-speaker pairs.
pub fn generate_trials(entries: &[ManifestEntry], per_class: usize, rng: &mut Rng64) -> Result<Vec<Trial>, CliError> {
    let mut by_spk: Vec<(String, Vec<String>)> = Vec::new();
    for e in entries {
        match by_spk.iter_mut().find(|(s, _)| *s == e.speaker) {
            Some((_, v)) => v.push(e.path.clone()),
            None => by_spk.push((e.speaker.clone(), vec![e.path.clone()])),
        }
    }
    let same: usize = by_spk.iter().map(|(_, v)| v.len() * v.len().saturating_sub(1) / 2).sum();
    let total = entries.len() * entries.len().saturating_sub(1) / 2;
    if by_spk.len() < 2 || same < per_class || total - same < per_class {
        return Err(CliError::Usage(format!("cannot draw {per_class} distinct trials per class from {} utterances", entries.len())));
    }
    let key = |a: &str, b: &str| if a < b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
    let mut used = BTreeSet::new();
    let mut trials = Vec::with_capacity(2 * per_class);
    while trials.len() < per_class {
        let (_, v) = &by_spk[rng.gen_range(0..by_spk.len())];
        if v.len() < 2 {
            continue;
        }
        let i = rng.gen_range(0..v.len());
        let j = rng.gen_range(0..v.len());
        if i != j && used.insert(key(&v[i], &v[j])) {
            trials.push(Trial { target: true, enroll: v[i].clone(), test: v[j].clone() });
        }
    }
    while trials.len() < 2 * per_class {
        let a = rng.gen_range(0..by_spk.len());
        let b = rng.gen_range(0..by_spk.len());
        if a == b {
            continue;
        }
        let x = by_spk[a].1.choose(rng).expect("speaker has utterances").clone();
        let y = by_spk[b].1.choose(rng).expect("speaker has utterances").clone();
        if used.insert(key(&x, &y)) {
            trials.push(Trial { target: false, enroll: x, test: y });
        }
    }
    trials.shuffle(rng);
    Ok(trials)
}

pub struct CorpusPaths {
    pub manifest: PathBuf,
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub trials: PathBuf,
}

/// Writes the corpus, the three manifests and the trial list under `out`.
pub fn synth_corpus(out: &Path, cfg: &DataConfig) -> Result<CorpusPaths, CliError> {
    fs::create_dir_all(out)?;
    let entries = synth::synth_dataset(out, &cfg.corpus).map_err(|e| CliError::Data(e.to_string()))?;
    let (train, eval) = split_manifest(&entries, cfg.held_out_per_speaker);
    let mut rng = seeded(cfg.corpus.seed ^ 0x7121_a15e);
    let trials = generate_trials(&eval, cfg.trials_per_class, &mut rng)?;
    let paths = CorpusPaths {
        manifest: out.join(MANIFEST),
        train_manifest: out.join(TRAIN_MANIFEST),
        eval_manifest: out.join(EVAL_MANIFEST),
        trials: out.join(TRIALS),
    };
    write_manifest(&paths.manifest, &entries)?;
    write_manifest(&paths.train_manifest, &train)?;
    write_manifest(&paths.eval_manifest, &eval)?;
    fs::write(&paths.trials, format_trials(&trials))?;
    Ok(paths)
}
