//! Synthetic multi-speaker corpus: generation, the JSON-lines manifest, and
//! loading utterances as model inputs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataConfig, RoomKind};
use crate::dsp::{
    log_mel_gmvn, mix, read_wav, spatialize, stft, synth_utterance, wpe, ComplexSpectrogram, GlobalStats, MelFilterbank, RoomMode, RoomSpec,
    StatsAccumulator, StftParams, Waveform, WpeParams, DEFAULT_SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::training::{Example, ModelInput};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

/// One manifest line. Paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub schema: u32,
    pub id: String,
    pub split: Split,
    pub sample_rate: u32,
    /// One file per microphone.
    pub mixture: Vec<String>,
    /// Each speaker's image at microphone 0.
    pub references: Vec<String>,
    pub noise: String,
    /// Vocabulary indices per speaker.
    pub tokens: Vec<Vec<usize>>,
    pub room: RoomSpec,
}

impl ManifestEntry {
    pub fn files(&self) -> impl Iterator<Item = &str> {
        self.mixture.iter().chain(&self.references).map(String::as_str).chain(std::iter::once(self.noise.as_str()))
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), n + 1)))?;
            if e.schema != MANIFEST_SCHEMA {
                return Err(Error::Data(format!("{} line {}: schema {} unsupported", path.display(), n + 1, e.schema)));
            }
            if e.mixture.is_empty() || e.references.is_empty() || e.tokens.len() != e.references.len() {
                return Err(Error::Data(format!("{} line {}: inconsistent entry {}", path.display(), n + 1, e.id)));
            }
            entries.push(e);
        }
        Ok(Self { dir, entries })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn mixture(&self, e: &ManifestEntry) -> Result<Waveform<f64>> {
        let mut chans = Vec::with_capacity(e.mixture.len());
        for f in &e.mixture {
            let w = read_wav(self.path(f))?;
            if w.sample_rate != e.sample_rate {
                return Err(Error::Data(format!("{f}: sample rate {} but manifest says {}", w.sample_rate, e.sample_rate)));
            }
            chans.extend(w.into_channels());
        }
        Waveform::new(e.sample_rate, chans)
    }

    pub fn references(&self, e: &ManifestEntry) -> Result<Vec<Waveform<f64>>> {
        e.references.iter().map(|f| read_wav(self.path(f))).collect()
    }
}

/// Draws a token sequence of vocabulary indices without immediate repeats.
fn draw_tokens(cfg: &DataConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
    let mut out: Vec<usize> = Vec::with_capacity(n);
    while out.len() < n {
        let t = rng.random_range(1..=cfg.vocab);
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

fn ms_to_samples(ms: f64) -> usize {
    (ms * DEFAULT_SAMPLE_RATE as f64 / 1000.0).round() as usize
}

struct Utterance {
    entry: ManifestEntry,
    mixture: Waveform<f64>,
    references: Vec<Waveform<f64>>,
    noise: Waveform<f64>,
}

fn make_utterance(cfg: &DataConfig, index: usize) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let sr = DEFAULT_SAMPLE_RATE;
    let profiles = cfg.profiles()?;
    let max_onset = ms_to_samples(cfg.max_onset_ms);
    let tail = ms_to_samples(cfg.tail_ms);

    let mut tokens = Vec::with_capacity(cfg.speakers);
    let mut dry = Vec::with_capacity(cfg.speakers);
    for p in &profiles {
        let t = draw_tokens(cfg, &mut rng);
        let offsets: Vec<usize> = t.iter().map(|&k| k - 1).collect();
        let speech = synth_utterance(&offsets, p, sr)?;
        let onset = rng.random_range(0..=max_onset);
        let mut samples = vec![0.0; onset];
        samples.extend_from_slice(speech.channel(0));
        samples.extend(std::iter::repeat_n(0.0, tail));
        dry.push(Waveform::mono(sr, samples)?);
        tokens.push(t);
    }

    let delays: Vec<Vec<usize>> = (0..cfg.speakers)
        .map(|_| {
            let mut d: Vec<usize> = (0..cfg.channels).map(|_| rng.random_range(0..=cfg.max_delay)).collect();
            d[0] = 0;
            d
        })
        .collect();
    let decays: Vec<Vec<f64>> =
        (0..cfg.speakers).map(|_| (0..cfg.channels).map(|c| if c == 0 { 1.0 } else { rng.random_range(0.6..=1.0) }).collect()).collect();
    let mode = match cfg.room {
        RoomKind::Anechoic => RoomMode::Anechoic,
        RoomKind::Reverberant => RoomMode::Reverberant { t60: rng.random_range(cfg.t60_range[0]..=cfg.t60_range[1]) },
    };
    let room = RoomSpec { mode, delays, decays, seed: rng.random() };
    room.validate()?;

    let images: Vec<Waveform<f64>> = dry.iter().enumerate().map(|(j, w)| spatialize(w, &room, j)).collect::<Result<_>>()?;
    let len = images.iter().map(Waveform::len).max().unwrap_or(0);
    let images: Vec<Waveform<f64>> = images.iter().map(|w| w.padded(len)).collect();
    let noise_seed: u64 = rng.random();
    let m = mix(&images, cfg.noise_snr_db, noise_seed)?;
    let noise = m.noise.unwrap_or_else(|| Waveform::new(sr, vec![vec![0.0; len]; cfg.channels]).expect("non-empty channels"));
    let references = images.iter().map(|w| w.select(0)).collect();

    let id = format!("utt{index:05}");
    let split = if index + cfg.heldout >= cfg.num_utterances { Split::Heldout } else { Split::Train };
    let entry = ManifestEntry {
        schema: MANIFEST_SCHEMA,
        split,
        sample_rate: sr,
        mixture: (0..cfg.channels).map(|c| format!("wav/{id}.mix{c}.wav")).collect(),
        references: (0..cfg.speakers).map(|j| format!("wav/{id}.ref{j}.wav")).collect(),
        noise: format!("wav/{id}.noise.wav"),
        id,
        tokens,
        room,
    };
    Ok(Utterance { entry, mixture: m.mixture, references, noise })
}

/// Writes the corpus described by `cfg` under `out`, returning the manifest
/// entries. Output depends only on `cfg`.
pub fn generate(cfg: &DataConfig, out: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    let wav_dir = out.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let entries: Vec<ManifestEntry> = (0..cfg.num_utterances)
        .into_par_iter()
        .map(|i| {
            let u = make_utterance(cfg, i)?;
            for (c, f) in u.entry.mixture.iter().enumerate() {
                crate::dsp::write_wav(out.join(f), &u.mixture.select(c))?;
            }
            for (r, f) in u.references.iter().zip(&u.entry.references) {
                crate::dsp::write_wav(out.join(f), r)?;
            }
            crate::dsp::write_wav(out.join(&u.entry.noise), &u.noise.select(0))?;
            Ok(u.entry)
        })
        .collect::<Result<_>>()?;
    let path = out.join(MANIFEST_FILE);
    let mut text = String::new();
    for e in &entries {
        text.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        text.push('\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

/// Feature extraction shared by training, evaluation and pretraining.
#[derive(Clone, Debug)]
pub struct Featurizer {
    pub stft: StftParams,
    pub mel: MelFilterbank<f64>,
    pub stats: GlobalStats,
    /// Applied to the multi-channel spectrogram before anything else.
    pub wpe: Option<WpeParams>,
}

impl Featurizer {
    pub fn new(n_mels: usize, stats: GlobalStats) -> Self {
        let stft = StftParams::default();
        Self { mel: MelFilterbank::new(n_mels, stft.nfft, DEFAULT_SAMPLE_RATE), stft, stats, wpe: None }
    }

    /// GMVN statistics of unnormalized microphone-0 log-mel features.
    pub fn estimate_stats(data: &Dataset, entries: &[&ManifestEntry], n_mels: usize) -> Result<GlobalStats> {
        let f = Self::new(n_mels, GlobalStats::identity(n_mels));
        let feats: Vec<Vec<f64>> = entries
            .par_iter()
            .map(|e| {
                let s = stft(&data.mixture(e)?.select(0), f.stft)?;
                log_mel_gmvn(&s, &f.mel, &f.stats)
            })
            .collect::<Result<_>>()?;
        let mut acc = StatsAccumulator::new(n_mels);
        feats.iter().for_each(|v| acc.add(v));
        acc.finish()
    }

    pub fn spectrogram(&self, w: &Waveform<f64>) -> Result<ComplexSpectrogram<f64>> {
        let s = stft(w, self.stft)?;
        match self.wpe {
            Some(p) => wpe(&s, p),
            None => Ok(s),
        }
    }

    pub fn features(&self, s: &ComplexSpectrogram<f64>) -> Result<ModelInput> {
        let values = log_mel_gmvn(s, &self.mel, &self.stats)?;
        Ok(ModelInput::Features { frames: s.frames(), values })
    }

    /// Mixture input: all channels for a beamforming model, microphone 0
    /// features otherwise.
    pub fn example(&self, data: &Dataset, e: &ManifestEntry, multi_channel: bool) -> Result<Example> {
        let s = self.spectrogram(&data.mixture(e)?)?;
        let input = if multi_channel {
            if s.channels() < 2 {
                return Err(Error::Data(format!("{}: beamforming model needs two or more channels", e.id)));
            }
            ModelInput::Spectrogram(Arc::new(s))
        } else {
            self.features(&s.channel(0))?
        };
        Ok(Example { id: e.id.clone(), input, refs: e.tokens.clone() })
    }

    /// One clean single-speaker example per reference.
    pub fn reference_examples(&self, data: &Dataset, e: &ManifestEntry) -> Result<Vec<Example>> {
        data.references(e)?
            .iter()
            .zip(&e.tokens)
            .enumerate()
            .map(|(j, (w, t))| {
                let s = stft(w, self.stft)?;
                Ok(Example { id: format!("{}.ref{j}", e.id), input: self.features(&s)?, refs: vec![t.clone()] })
            })
            .collect()
    }

    pub fn examples(&self, data: &Dataset, entries: &[&ManifestEntry], multi_channel: bool) -> Result<Vec<Example>> {
        entries.par_iter().map(|e| self.example(data, e, multi_channel)).collect()
    }
}
