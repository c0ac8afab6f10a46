//! WAV I/O, log-mel filterbank energies, mean normalization and chunking.

use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() || sample_rate == 0 {
            return invalid("waveform needs samples and a positive sample rate");
        }
        Ok(Self { samples, sample_rate })
    }
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Malformed("truncated WAV data".into())
        }
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(m) => Error::Malformed(format!("WAV: {m}")),
        other => Error::UnsupportedFormat(other.to_string()),
    }
}

/// Reads 16-bit PCM mono RIFF/WAVE as samples scaled by `1/32768`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{} channels; only mono is accepted", spec.channels)));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedFormat(format!(
            "{}-bit {:?}; only 16-bit PCM is accepted",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(map_hound)?;
    if samples.is_empty() {
        return Err(Error::Malformed("WAV file holds no samples".into()));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono, rounding and saturating to the `i16` range.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in &wave.samples {
        let q = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_sample(q).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub f_min: f64,
    /// Upper band edge; `None` means Nyquist.
    pub f_max: Option<f64>,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self { n_mels: 64, win_ms: 25.0, hop_ms: 10.0, fft_size: 512, f_min: 20.0, f_max: None, log_floor: 1e-10 }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl FbankConfig {
    pub fn win_samples(&self, sr: u32) -> usize {
        (sr as f64 * self.win_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sr: u32) -> usize {
        (sr as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn validate(&self, sr: u32) -> Result<()> {
        let nyquist = sr as f64 / 2.0;
        let f_max = self.f_max.unwrap_or(nyquist);
        let win = self.win_samples(sr);
        if self.n_mels == 0 || win == 0 || self.hop_samples(sr) == 0 {
            return invalid("n_mels, window and hop must be positive");
        }
        if self.fft_size < win {
            return invalid(format!("fft_size {} shorter than the {win}-sample window", self.fft_size));
        }
        if !(0.0 <= self.f_min && self.f_min < f_max && f_max <= nyquist) {
            return invalid(format!("band [{}, {f_max}] Hz invalid for Nyquist {nyquist}", self.f_min));
        }
        if !(self.log_floor > 0.0) {
            return invalid("log floor must be positive");
        }
        Ok(())
    }

    /// Center frequencies in Hz of the triangular filters.
    pub fn mel_centers(&self, sr: u32) -> Vec<f64> {
        let edges = self.mel_edges(sr);
        edges[1..=self.n_mels].to_vec()
    }

    fn mel_edges(&self, sr: u32) -> Vec<f64> {
        let lo = hz_to_mel(self.f_min);
        let hi = hz_to_mel(self.f_max.unwrap_or(sr as f64 / 2.0));
        let n = self.n_mels + 1;
        (0..=n).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64)).collect()
    }

    /// Triangular weights `[n_mels][fft_size/2 + 1]`, evaluated at bin frequencies.
    pub fn mel_weights(&self, sr: u32) -> Vec<Vec<f64>> {
        let edges = self.mel_edges(sr);
        let bins = self.fft_size / 2 + 1;
        (0..self.n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * sr as f64 / self.fft_size as f64;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

pub fn frame_count(len: usize, win: usize, hop: usize) -> Option<usize> {
    (len >= win).then(|| (len - win) / hop + 1)
}

/// Log-mel energies `[n_mels, T]`.
pub fn compute_fbank(wave: &Waveform, cfg: &FbankConfig) -> Result<Tensor> {
    let sr = wave.sample_rate;
    cfg.validate(sr)?;
    let win = cfg.win_samples(sr);
    let hop = cfg.hop_samples(sr);
    let Some(frames) = frame_count(wave.samples.len(), win, hop) else {
        return invalid(format!("{} samples is shorter than one {win}-sample window", wave.samples.len()));
    };
    let window = hamming(win);
    let weights = cfg.mel_weights(sr);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let bins = cfg.fft_size / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0; bins];
    let mut out = vec![0.0; cfg.n_mels * frames];
    for t in 0..frames {
        let seg = &wave.samples[t * hop..t * hop + win];
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(if k < win { seg[k] * window[k] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (p, z) in power.iter_mut().zip(&buf) {
            *p = z.norm_sqr();
        }
        for (m, w) in weights.iter().enumerate() {
            let e: f64 = w.iter().zip(&power).map(|(a, b)| a * b).sum();
            out[m * frames + t] = e.max(cfg.log_floor).ln();
        }
    }
    Tensor::new(vec![cfg.n_mels, frames], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Subtract each bin's mean over time.
    PerBin,
    /// Subtract each frame's mean over bins.
    PerFrame,
}

pub fn mean_normalize(fbank: &Tensor, mode: NormMode) -> Result<Tensor> {
    let [f, t] = *fbank.shape() else {
        return invalid(format!("fbank must be [F, T], got {:?}", fbank.shape()));
    };
    let x = fbank.data();
    let mut out = x.to_vec();
    match mode {
        NormMode::PerBin => {
            for row in out.chunks_mut(t) {
                let mu = row.iter().sum::<f64>() / t as f64;
                row.iter_mut().for_each(|v| *v -= mu);
            }
        }
        NormMode::PerFrame => {
            for j in 0..t {
                let mu = (0..f).map(|i| x[i * t + j]).sum::<f64>() / f as f64;
                (0..f).for_each(|i| out[i * t + j] -= mu);
            }
        }
    }
    Tensor::new(vec![f, t], out)
}

pub enum ChunkMode<'a, R: Rng> {
    Random(&'a mut R),
    Center,
}

/// Fixed-length window of frames; shorter inputs repeat circularly from frame 0.
pub fn chunk_frames<R: Rng>(fbank: &Tensor, chunk: usize, mode: ChunkMode<'_, R>) -> Result<Tensor> {
    let [f, t] = *fbank.shape() else {
        return invalid(format!("fbank must be [F, T], got {:?}", fbank.shape()));
    };
    if chunk == 0 {
        return invalid("chunk length must be positive");
    }
    let offset = match mode {
        _ if t <= chunk => 0,
        ChunkMode::Center => (t - chunk) / 2,
        ChunkMode::Random(rng) => rng.gen_range(0..=t - chunk),
    };
    let x = fbank.data();
    Tensor::from_fn(vec![f, chunk], |i| x[(i / chunk) * t + (offset + i % chunk) % t])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded;

    #[test]
    fn one_second_gives_98_frames() {
        let wave = Waveform::new(vec![0.1; 16000], 16000).unwrap();
        let fb = compute_fbank(&wave, &FbankConfig::default()).unwrap();
        assert_eq!(fb.shape(), &[64, 98]);
    }

    #[test]
    fn silence_hits_the_floor() {
        let wave = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let fb = compute_fbank(&wave, &FbankConfig::default()).unwrap();
        assert!(fb.data().iter().all(|&v| v == 1e-10f64.ln()));
    }

    #[test]
    fn too_short_is_rejected() {
        let wave = Waveform::new(vec![0.0; 399], 16000).unwrap();
        assert!(compute_fbank(&wave, &FbankConfig::default()).is_err());
    }

    #[test]
    fn chunk_rules() {
        let fb = Tensor::from_fn(vec![2, 150], |i| i as f64).unwrap();
        let c = chunk_frames::<crate::params::Rng64>(&fb, 200, ChunkMode::Center).unwrap();
        assert_eq!(c.at(&[0, 149]), 149.0);
        assert_eq!(c.at(&[0, 150]), 0.0);
        assert_eq!(c.at(&[1, 199]), 150.0 + 49.0);
        let fb = Tensor::from_fn(vec![1, 500], |i| i as f64).unwrap();
        let c = chunk_frames::<crate::params::Rng64>(&fb, 200, ChunkMode::Center).unwrap();
        assert_eq!(c.at(&[0, 0]), 150.0);
        let mut rng = seeded(4);
        let c = chunk_frames(&fb, 200, ChunkMode::Random(&mut rng)).unwrap();
        assert_eq!(c.shape(), &[1, 200]);
        let start = c.at(&[0, 0]);
        assert!(start <= 300.0);
        assert_eq!(c.at(&[0, 199]), start + 199.0);
    }

    #[test]
    fn per_frame_mode_zeroes_columns() {
        let fb = Tensor::from_fn(vec![3, 4], |i| (i * i) as f64).unwrap();
        let n = mean_normalize(&fb, NormMode::PerFrame).unwrap();
        for j in 0..4 {
            let s: f64 = (0..3).map(|i| n.at(&[i, j])).sum();
            assert!(s.abs() < 1e-12);
        }
    }
}
