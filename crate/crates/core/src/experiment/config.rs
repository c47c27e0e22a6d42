//! Experiment configuration document (TOML). Every section has defaults;
//! unknown keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::backend::{BackendConfig, Vocabulary};
use crate::dsp::synth::SpeakerProfile;
use crate::dsp::wave::DEFAULT_SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::training::{DecodeParams, ModelConfig, TrainPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomKind {
    Anechoic,
    Reverberant,
}

/// Harmonic voice of one speaker slot: token `k` sounds at
/// `f0 + k·spacing` Hz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Voice {
    pub f0: f64,
    pub spacing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_utterances: usize,
    /// Trailing utterances marked as held out.
    pub heldout: usize,
    pub speakers: usize,
    pub channels: usize,
    /// Content tokens (the vocabulary adds blank and sos/eos).
    pub vocab: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub token_ms: f64,
    /// Each speaker starts after a random silence of up to this length.
    pub max_onset_ms: f64,
    /// Silence appended to every source so reverberation tails fit.
    pub tail_ms: f64,
    pub room: RoomKind,
    pub t60_range: [f64; 2],
    /// Largest per-microphone delay in samples.
    pub max_delay: usize,
    pub noise_snr_db: Option<f64>,
    /// One voice per speaker slot.
    pub voices: Vec<Voice>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_utterances: 16,
            heldout: 4,
            speakers: 2,
            channels: 1,
            vocab: 10,
            min_tokens: 2,
            max_tokens: 4,
            token_ms: 100.0,
            max_onset_ms: 100.0,
            tail_ms: 100.0,
            room: RoomKind::Anechoic,
            t60_range: [0.2, 0.4],
            max_delay: 8,
            noise_snr_db: Some(30.0),
            voices: vec![Voice { f0: 120.0, spacing: 30.0 }, Voice { f0: 1300.0, spacing: 50.0 }],
            seed: 1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_utterances == 0 || self.heldout > self.num_utterances {
            return Err(Error::Config(format!("{} held-out utterances out of {}", self.heldout, self.num_utterances)));
        }
        if self.speakers == 0 || self.speakers > crate::backend::pit::MAX_PIT_SPEAKERS || self.voices.len() < self.speakers {
            return Err(Error::Config(format!("{} speakers with {} voices", self.speakers, self.voices.len())));
        }
        if self.channels == 0 || self.vocab == 0 || self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config("channels, vocab and token counts must be positive and ordered".into()));
        }
        if self.vocab < 2 && self.max_tokens > 1 {
            return Err(Error::Config("consecutive tokens differ, so multi-token utterances need two or more tokens".into()));
        }
        if !(self.t60_range[0] <= self.t60_range[1]) || self.max_onset_ms < 0.0 || self.tail_ms < 0.0 {
            return Err(Error::Config("t60 range, onset and tail must be ordered and non-negative".into()));
        }
        for p in self.profiles()? {
            p.validate(DEFAULT_SAMPLE_RATE)?;
        }
        Ok(())
    }

    pub fn profiles(&self) -> Result<Vec<SpeakerProfile>> {
        self.voices.iter().take(self.speakers).map(|v| SpeakerProfile::evenly_spaced(v.f0, v.spacing, self.vocab, self.token_ms)).collect()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::synthetic(self.vocab)
    }
}

/// Model dimensions; a `frontend` table makes the model multi-channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_att: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub cnn_channels: [usize; 2],
    pub n_mels: usize,
    pub sd_layers: usize,
    pub rec_layers: usize,
    pub decoder_layers: usize,
    pub share_sd: bool,
    pub ctc_weight: f64,
    pub label_smoothing: f64,
    pub frontend: Option<FrontendConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BackendConfig::default();
        Self {
            d_att: b.attention.d_att,
            heads: b.attention.heads,
            d_ff: b.attention.d_ff,
            cnn_channels: b.cnn_channels,
            n_mels: b.n_mels,
            sd_layers: b.sd_layers,
            rec_layers: b.rec_layers,
            decoder_layers: b.decoder_layers,
            share_sd: b.share_sd,
            ctc_weight: b.ctc_weight,
            label_smoothing: b.label_smoothing,
            frontend: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainPlan,
    pub eval: DecodeParams,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.model.frontend.is_some() && self.data.channels < 2 {
            return Err(Error::Config("a beamforming frontend needs at least two channels".into()));
        }
        self.model_config().backend.validate()?;
        if let Some(f) = &self.model.frontend {
            f.attention().validate()?;
        }
        if self.eval.beam == 0 || self.eval.max_len == 0 {
            return Err(Error::Config("eval beam and max_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn multi_channel(&self) -> bool {
        self.model.frontend.is_some()
    }

    /// Model description; the speaker-differentiating stacks are dropped
    /// for multi-channel models, whose encoder is single-path.
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            frontend: m.frontend.clone(),
            backend: BackendConfig {
                attention: AttentionConfig { d_att: m.d_att, heads: m.heads, d_ff: m.d_ff, window: None },
                cnn_channels: m.cnn_channels,
                n_mels: m.n_mels,
                sd_layers: if self.multi_channel() { 0 } else { m.sd_layers },
                rec_layers: m.rec_layers,
                decoder_layers: m.decoder_layers,
                share_sd: m.share_sd,
                speakers: self.data.speakers,
                ctc_weight: m.ctc_weight,
                label_smoothing: m.label_smoothing,
                vocab: self.data.vocabulary(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[data]\nnum_utterance = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[bogus]\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 3\n").is_err());
        let ok = ExperimentConfig::from_toml("[data]\nnum_utterances = 3\nheldout = 1\n").unwrap();
        assert_eq!(ok.data.num_utterances, 3);
    }

    #[test]
    fn frontend_requires_channels() {
        let text = "[model.frontend]\nd_att = 8\n";
        assert!(ExperimentConfig::from_toml(text).is_err());
        let c = ExperimentConfig::from_toml(&format!("[data]\nchannels = 2\n{text}")).unwrap();
        assert!(c.multi_channel());
        assert_eq!(c.model_config().backend.sd_layers, 0);
    }
}
