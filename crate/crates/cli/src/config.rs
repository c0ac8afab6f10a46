//! Run configuration document.

use std::fs;
use std::path::{Path, PathBuf};

use gcm_core::backbone::{EmbedderConfig, Insertion};
use gcm_core::blocks::ContextKind;
use gcm_core::features::{FbankConfig, NormMode};
use gcm_core::optim::{AdamWConfig, ScheduleConfig};
use gcm_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus: SynthConfig,
    /// The last `held_out_per_speaker` utterances of every speaker are kept out of training.
    pub held_out_per_speaker: usize,
    pub trials_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { corpus: SynthConfig::default(), held_out_per_speaker: 10, trials_per_class: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub fbank: FbankConfig,
    pub norm: NormMode,
    pub chunk_frames: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { fbank: FbankConfig::default(), norm: NormMode::PerBin, chunk_frames: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub speakers_per_batch: usize,
    pub utts_per_speaker: usize,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
    /// Worker threads for convolution and feature extraction.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            speakers_per_batch: 16,
            utts_per_speaker: 2,
            optimizer: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data_dir: "data".into(), out_dir: "run".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub model: EmbedderConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            features: FeatureConfig::default(),
            model: EmbedderConfig::default(),
            train: TrainConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.features.fbank.validate(self.data.corpus.sample_rate).map_err(|e| CliError::Usage(e.to_string()))?;
        if self.features.fbank.n_mels != self.model.n_mels {
            return usage(format!(
                "features.fbank.n_mels = {} but model.n_mels = {}",
                self.features.fbank.n_mels, self.model.n_mels
            ));
        }
        if self.features.chunk_frames == 0 {
            return usage("features.chunk_frames must be positive".into());
        }
        let t = &self.train;
        if t.utts_per_speaker < 2 || t.speakers_per_batch < 2 || t.threads == 0 {
            return usage("train needs utts_per_speaker >= 2, speakers_per_batch >= 2, threads >= 1".into());
        }
        let d = &self.data;
        if d.held_out_per_speaker >= d.corpus.utts_per_speaker {
            return usage("every speaker needs at least one training utterance".into());
        }
        if d.corpus.num_speakers < 2 || d.held_out_per_speaker < 2 || d.trials_per_class == 0 {
            return usage("trial generation needs 2+ speakers, 2+ held-out utterances each, and trials_per_class > 0".into());
        }
        Ok(())
    }
}

/// Named block configurations used for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Se,
    AttGcm,
    AttGcmTfe,
    DctGcm,
    DctGcmTfe,
}

impl Variant {
    pub const BLOCKS: [Variant; 5] = [Variant::Se, Variant::AttGcm, Variant::AttGcmTfe, Variant::DctGcm, Variant::DctGcmTfe];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Se => "se",
            Variant::AttGcm => "att_gcm",
            Variant::AttGcmTfe => "att_gcm_tfe",
            Variant::DctGcm => "dct_gcm",
            Variant::DctGcmTfe => "dct_gcm_tfe",
        }
    }

    /// Rewrites the block settings of `model`, keeping its other knobs.
    pub fn apply(self, model: &mut EmbedderConfig) {
        let mut gc = model.gcm.clone().unwrap_or_default();
        let (context, tfe) = match self {
            Variant::Baseline => {
                model.gcm = None;
                model.stage_blocks = None;
                model.insertion = Insertion::None;
                return;
            }
            Variant::Se => (ContextKind::Gap, false),
            Variant::AttGcm => (ContextKind::Attention, false),
            Variant::AttGcmTfe => (ContextKind::Attention, true),
            Variant::DctGcm => (ContextKind::MultiDct, false),
            Variant::DctGcmTfe => (ContextKind::MultiDct, true),
        };
        gc.context = context;
        gc.tfe = tfe;
        model.gcm = Some(gc);
        model.stage_blocks = None;
        if model.insertion == Insertion::None {
            model.insertion = Insertion::AfterBn;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), cfg.to_json());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sede": 3}"#), Err(CliError::Usage(_))));
        assert!(RunConfig::from_json(r#"{"model": {"gcm": {"reducton": 8}}}"#).is_err());
        assert_eq!(RunConfig::from_json(r#"{"seed": 3}"#).unwrap().seed, 3);
    }

    #[test]
    fn variants_validate() {
        for v in Variant::BLOCKS.into_iter().chain([Variant::Baseline]) {
            let mut cfg = RunConfig::default();
            v.apply(&mut cfg.model);
            cfg.validate().unwrap();
        }
    }
}
