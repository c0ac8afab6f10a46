//! Deterministic synthetic speaker corpus.
//!
//! Each speaker owns a resonance spectrum and a pitch range. An utterance is a
//! train of syllables; each syllable is a harmonic series at its own pitch whose
//! partials are weighted by the speaker's resonances, shaped by a Hann envelope,
//! with white noise over the whole signal.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{write_wav, Waveform};
use crate::params::Rng64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeakerSpec {
    pub id: String,
    /// `(center_hz, bandwidth_hz)` pairs.
    pub resonances: Vec<(f64, f64)>,
    pub pitch_range: (f64, f64),
    pub noise_level: f64,
    pub seed: u64,
}

fn mix(seed: u64, a: u64) -> u64 {
    let mut z = seed ^ a.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SyntheticSpeakerSpec {
    /// Draws speaker `index` of a corpus seeded with `seed`.
    pub fn random(index: usize, seed: u64, sample_rate: u32) -> Self {
        let mut rng = Rng64::seed_from_u64(mix(seed, index as u64));
        let top = 0.8 * sample_rate as f64 / 2.0;
        let count = rng.gen_range(2..=4);
        let mut resonances: Vec<(f64, f64)> =
            (0..count).map(|_| (rng.gen_range(250.0..top), rng.gen_range(60.0..300.0))).collect();
        resonances.sort_by(|a, b| a.0.total_cmp(&b.0));
        let base = rng.gen_range(90.0..250.0);
        Self {
            id: format!("spk{index:03}"),
            resonances,
            pitch_range: (base * 0.85, base * 1.15),
            noise_level: rng.gen_range(0.01..0.03),
            seed: mix(seed, 0x5EED_0000 + index as u64),
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(2..=4).contains(&self.resonances.len()) {
            return invalid(format!("{}: expected 2 to 4 resonances", self.id));
        }
        if self.resonances.iter().any(|&(c, bw)| !(c > 0.0 && c < nyquist && bw > 0.0)) {
            return invalid(format!("{}: resonances must lie below Nyquist with positive bandwidth", self.id));
        }
        let (lo, hi) = self.pitch_range;
        if !(lo > 0.0 && lo <= hi && hi < nyquist) || !(self.noise_level >= 0.0) {
            return invalid(format!("{}: bad pitch range or noise level", self.id));
        }
        Ok(())
    }

    fn partial_gain(&self, f: f64) -> f64 {
        self.resonances.iter().map(|&(c, bw)| (-0.5 * ((f - c) / bw).powi(2)).exp()).sum()
    }
}

/// One utterance, peak-normalized to 0.5.
pub fn synth_utterance(spec: &SyntheticSpeakerSpec, utt: usize, duration_s: f64, sample_rate: u32) -> Result<Waveform> {
    spec.validate(sample_rate)?;
    let n = (duration_s * sample_rate as f64).round() as usize;
    if n == 0 {
        return invalid("duration must cover at least one sample");
    }
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let mut rng = Rng64::seed_from_u64(mix(spec.seed, utt as u64));
    let mut x = vec![0.0; n];
    let mut pos = (rng.gen_range(0.02..0.12) * sr) as usize;
    while pos < n {
        let len = ((rng.gen_range(0.10..0.30) * sr) as usize).min(n - pos);
        let f0 = rng.gen_range(spec.pitch_range.0..=spec.pitch_range.1);
        let gain = rng.gen_range(0.5..1.0);
        let mut h = 1;
        while h as f64 * f0 < 0.95 * nyquist {
            let f = h as f64 * f0;
            let a = spec.partial_gain(f);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            h += 1;
            if a < 1e-2 {
                continue;
            }
            let (ds, dc) = (std::f64::consts::TAU * f / sr).sin_cos();
            let (mut s, mut c) = phase.sin_cos();
            for (k, slot) in x[pos..pos + len].iter_mut().enumerate() {
                let env = 0.5 - 0.5 * (std::f64::consts::TAU * k as f64 / len as f64).cos();
                *slot += gain * a * env * s;
                let s2 = s * dc + c * ds;
                c = c * dc - s * ds;
                s = s2;
            }
        }
        pos += len + (rng.gen_range(0.03..0.15) * sr) as usize;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let noise = Normal::new(0.0, spec.noise_level).expect("non-negative noise level");
    for v in &mut x {
        *v = 0.5 * *v / peak + noise.sample(&mut rng);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.99 {
        x.iter_mut().for_each(|v| *v *= 0.99 / peak);
    }
    Waveform::new(x, sample_rate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_speakers: 20, utts_per_speaker: 50, duration_s: 2.0, sample_rate: 16000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub speaker: String,
    /// Path relative to the manifest's directory.
    pub path: String,
}

pub fn utterance_path(speaker: &str, utt: usize) -> String {
    format!("{speaker}/{speaker}_u{utt:03}.wav")
}

/// Writes every utterance under `out_dir` and returns the manifest in
/// speaker-major order.
pub fn synth_dataset(out_dir: &Path, cfg: &SynthConfig) -> Result<Vec<ManifestEntry>> {
    if cfg.num_speakers == 0 || cfg.utts_per_speaker == 0 || !(cfg.duration_s > 0.0) || cfg.sample_rate == 0 {
        return invalid("synthetic corpus counts, duration and sample rate must be positive");
    }
    let speakers: Vec<_> =
        (0..cfg.num_speakers).map(|i| SyntheticSpeakerSpec::random(i, cfg.seed, cfg.sample_rate)).collect();
    for s in &speakers {
        fs::create_dir_all(out_dir.join(&s.id))?;
    }
    let jobs: Vec<(usize, usize)> =
        (0..cfg.num_speakers).flat_map(|s| (0..cfg.utts_per_speaker).map(move |u| (s, u))).collect();
    jobs.par_iter()
        .map(|&(s, u)| {
            let spec = &speakers[s];
            let wave = synth_utterance(spec, u, cfg.duration_s, cfg.sample_rate)?;
            write_wav(out_dir.join(utterance_path(&spec.id, u)), &wave)?;
            Ok(ManifestEntry { speaker: spec.id.clone(), path: utterance_path(&spec.id, u) })
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for e in entries {
        writeln!(f, "{} {}", e.speaker, e.path)?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(p), None) => out.push(ManifestEntry { speaker: s.into(), path: p.into() }),
            _ => return Err(Error::Malformed(format!("{}:{}: expected `speaker_id path`", path.display(), n + 1))),
        }
    }
    if out.is_empty() {
        return Err(Error::Malformed(format!("{} lists no utterances", path.display())));
    }
    Ok(out)
}

/// Resolves a manifest-relative path.
pub fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    manifest.parent().unwrap_or_else(|| Path::new(".")).join(rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speakers_are_valid_and_seeded() {
        for i in 0..50 {
            let s = SyntheticSpeakerSpec::random(i, 7, 16000);
            s.validate(16000).unwrap();
            assert_eq!(s, SyntheticSpeakerSpec::random(i, 7, 16000));
        }
        assert_ne!(SyntheticSpeakerSpec::random(0, 7, 16000), SyntheticSpeakerSpec::random(0, 8, 16000));
    }

    #[test]
    fn utterance_is_bounded_and_reproducible() {
        let s = SyntheticSpeakerSpec::random(3, 1, 16000);
        let a = synth_utterance(&s, 0, 0.5, 16000).unwrap();
        assert_eq!(a.samples.len(), 8000);
        assert!(a.samples.iter().all(|v| v.abs() < 1.0));
        assert_eq!(a, synth_utterance(&s, 0, 0.5, 16000).unwrap());
        assert_ne!(a, synth_utterance(&s, 1, 0.5, 16000).unwrap());
    }
}
