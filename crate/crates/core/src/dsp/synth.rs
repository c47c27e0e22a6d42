use serde::{Deserialize, Serialize};

use super::wave::Waveform;
use crate::error::{Error, Result};

/// Harmonics rendered per token.
pub const HARMONICS: usize = 3;
/// Raised-cosine fade length at each token edge.
pub const EDGE_MS: f64 = 10.0;
const PEAK: f64 = 0.3;

/// Voice of a synthetic talker: every token is a harmonic tone at
/// `f0 + offsets[token]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub f0: f64,
    pub harmonic_decay: f64,
    pub offsets: Vec<f64>,
    pub token_ms: f64,
}

impl SpeakerProfile {
    pub fn new(f0: f64, harmonic_decay: f64, offsets: Vec<f64>, token_ms: f64) -> Result<Self> {
        let p = Self { f0, harmonic_decay, offsets, token_ms };
        p.validate(super::wave::DEFAULT_SAMPLE_RATE)?;
        Ok(p)
    }

    /// Profile with evenly spaced token offsets `0, spacing, 2·spacing, …`.
    pub fn evenly_spaced(f0: f64, spacing: f64, vocab: usize, token_ms: f64) -> Result<Self> {
        Self::new(f0, 0.6, (0..vocab).map(|k| k as f64 * spacing).collect(), token_ms)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.offsets.is_empty() {
            return Err(Error::Config("speaker profile has no token offsets".into()));
        }
        let mut sorted = self.offsets.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("token offsets must be distinct".into()));
        }
        let limit = f64::from(sample_rate) / 2.0 / HARMONICS as f64;
        let top = self.f0 + sorted[sorted.len() - 1];
        if !(self.f0 > 0.0) || top >= limit {
            return Err(Error::Config(format!("f0 {} + max offset must stay below {limit} Hz", self.f0)));
        }
        if !(self.token_ms > 2.0 * EDGE_MS) || !(0.0..=1.0).contains(&self.harmonic_decay) {
            return Err(Error::Config("token duration or harmonic decay out of range".into()));
        }
        Ok(())
    }

    pub fn token_frequency(&self, token: usize) -> Option<f64> {
        self.offsets.get(token).map(|o| self.f0 + o)
    }

    pub fn token_samples(&self, sample_rate: u32) -> usize {
        (self.token_ms * f64::from(sample_rate) / 1000.0).round() as usize
    }
}

/// Renders a token sequence (indices into the profile's offsets) as
/// concatenated harmonic tones with raised-cosine edges.
pub fn synth_utterance(tokens: &[usize], p: &SpeakerProfile, sample_rate: u32) -> Result<Waveform<f64>> {
    if tokens.is_empty() {
        return Err(Error::Contract("cannot synthesize an empty token sequence".into()));
    }
    p.validate(sample_rate)?;
    let n = p.token_samples(sample_rate);
    let edge = ((EDGE_MS * f64::from(sample_rate) / 1000.0).round() as usize).min(n / 2);
    let norm: f64 = (0..HARMONICS).map(|h| p.harmonic_decay.powi(h as i32)).sum();
    let sr = f64::from(sample_rate);
    let mut out = Vec::with_capacity(tokens.len() * n);
    for &tok in tokens {
        let freq = p.token_frequency(tok).ok_or_else(|| Error::Vocabulary(format!("{tok} (profile has {} tokens)", p.offsets.len())))?;
        for i in 0..n {
            let t = i as f64 / sr;
            let tone: f64 =
                (0..HARMONICS).map(|h| p.harmonic_decay.powi(h as i32) * (2.0 * std::f64::consts::PI * (h + 1) as f64 * freq * t).sin()).sum();
            let ramp = if i < edge {
                0.5 - 0.5 * (std::f64::consts::PI * i as f64 / edge as f64).cos()
            } else if i >= n - edge {
                0.5 - 0.5 * (std::f64::consts::PI * (n - 1 - i) as f64 / edge as f64).cos()
            } else {
                1.0
            };
            out.push(PEAK * ramp * tone / norm);
        }
    }
    Waveform::mono(sample_rate, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_duration() {
        let p = SpeakerProfile::evenly_spaced(120.0, 100.0, 10, 120.0).unwrap();
        let w = synth_utterance(&[3], &p, 16_000).unwrap();
        assert_eq!(w.len(), 1920);
        assert_eq!(w.channel(0)[0], 0.0);
    }

    #[test]
    fn different_f0_decorrelates() {
        let a = SpeakerProfile::evenly_spaced(120.0, 100.0, 10, 120.0).unwrap();
        let b = SpeakerProfile::evenly_spaced(1100.0, 100.0, 10, 120.0).unwrap();
        let toks = [0, 4, 2, 9];
        let x = synth_utterance(&toks, &a, 16_000).unwrap();
        let y = synth_utterance(&toks, &b, 16_000).unwrap();
        let dot: f64 = x.channel(0).iter().zip(y.channel(0)).map(|(p, q)| p * q).sum();
        let nx: f64 = x.channel(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = y.channel(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((dot / (nx * ny)).abs() < 0.5);
    }

    #[test]
    fn errors() {
        let p = SpeakerProfile::evenly_spaced(120.0, 100.0, 10, 120.0).unwrap();
        assert!(matches!(synth_utterance(&[], &p, 16_000), Err(Error::Contract(_))));
        assert!(matches!(synth_utterance(&[10], &p, 16_000), Err(Error::Vocabulary(_))));
        assert!(SpeakerProfile::new(100.0, 0.5, vec![0.0, 0.0], 120.0).is_err());
        assert!(SpeakerProfile::evenly_spaced(2600.0, 100.0, 10, 120.0).is_err());
    }

    #[test]
    fn deterministic() {
        let p = SpeakerProfile::evenly_spaced(130.0, 80.0, 10, 100.0).unwrap();
        assert_eq!(synth_utterance(&[1, 2], &p, 16_000).unwrap(), synth_utterance(&[1, 2], &p, 16_000).unwrap());
    }
}
