//! Beamforming separation with oracle or learned masks, and standalone WPE
//! dereverberation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::run::{create_dir, load_model, write_file};
use crate::attention::Dropout;
use crate::backend::pit_assign;
use crate::dsp::{istft, read_wav, si_snr, stft, wpe, write_wav, ComplexSpectrogram, StftParams, Waveform, WpeParams};
use crate::error::{Error, Result};
use crate::frontend::{beamform, estimate_psd, fixed_reference, mvdr_filters, BeamformerFilters, MaskSet};
use crate::numerics::Graph;

pub const SEPARATION_REPORT: &str = "separation.json";

/// Reads one multi-channel file or several files whose channels are
/// concatenated in order.
pub fn read_channels(paths: &[PathBuf]) -> Result<Waveform<f64>> {
    let first = paths.first().ok_or_else(|| Error::Config("no input WAV given".into()))?;
    let mut sr = None;
    let mut chans = Vec::new();
    for p in paths {
        let w = read_wav(p)?;
        if *sr.get_or_insert(w.sample_rate) != w.sample_rate {
            return Err(Error::Data(format!("{}: sample rate differs from {}", p.display(), first.display())));
        }
        chans.extend(w.into_channels());
    }
    let len = chans.iter().map(Vec::len).max().unwrap_or(0);
    chans.iter_mut().for_each(|c| c.resize(len, 0.0));
    Waveform::new(sr.expect("at least one file"), chans)
}

/// Truncates or zero-pads every channel to `len`.
fn fit(w: Waveform<f64>, len: usize) -> Result<Waveform<f64>> {
    let sr = w.sample_rate;
    let chans = w
        .into_channels()
        .into_iter()
        .map(|mut c| {
            c.resize(len, 0.0);
            c
        })
        .collect();
    Waveform::new(sr, chans)
}

/// Ideal ratio masks from per-speaker microphone-0 images: each source's
/// share of the summed power, with the residual `x − Σ sʲ` as noise. The
/// same masks are used on every channel.
pub fn oracle_masks(x: &ComplexSpectrogram<f64>, refs: &[ComplexSpectrogram<f64>]) -> Result<MaskSet<f64>> {
    let (t, f) = (x.frames(), x.bins());
    if refs.iter().any(|r| r.frames() != t || r.bins() != f || r.channels() != 1) {
        return Err(Error::Shape("references must be mono and match the mixture STFT".into()));
    }
    let mut power = vec![0.0; t * f * (refs.len() + 1)];
    for ti in 0..t {
        for fi in 0..f {
            let sum: Complex<f64> = refs.iter().map(|r| r.get(ti, fi, 0)).sum();
            let base = (ti * f + fi) * (refs.len() + 1);
            power[base] = (x.get(ti, fi, 0) - sum).norm_sqr();
            for (j, r) in refs.iter().enumerate() {
                power[base + j + 1] = r.get(ti, fi, 0).norm_sqr();
            }
        }
    }
    let sources = refs.len() + 1;
    MaskSet::from_fn(t, f, x.channels(), sources, |ti, fi, _, j| {
        let base = (ti * f + fi) * sources;
        let total: f64 = power[base..base + sources].iter().sum();
        if total > 0.0 {
            (power[base + j] / total).clamp(0.0, 1.0)
        } else {
            0.0
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerScore {
    pub output: String,
    pub reference: Option<String>,
    pub si_snr_in: Option<f64>,
    pub si_snr_out: Option<f64>,
    pub improvement: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub mode: String,
    pub channels: usize,
    pub speakers: Vec<SpeakerScore>,
}

pub enum MaskSource<'a> {
    Oracle,
    Checkpoint { path: &'a Path, allow_digest_mismatch: bool },
}

pub struct SeparateOptions<'a> {
    pub masks: MaskSource<'a>,
    pub mixture: &'a [PathBuf],
    pub references: &'a [PathBuf],
    pub out_dir: &'a Path,
}

/// Beamforms every speaker to microphone 0 and writes `sep{j}.wav`. With
/// references, outputs are matched to them by the assignment maximizing
/// total SI-SNR and scored against the mixture's microphone-0 signal.
pub fn separate(opts: &SeparateOptions) -> Result<SeparationReport> {
    let mixture = read_channels(opts.mixture)?;
    if mixture.num_channels() < 2 {
        return Err(Error::Unsupported(format!("beamforming needs two or more channels, the input has {}", mixture.num_channels())));
    }
    let refs: Vec<Waveform<f64>> =
        opts.references.iter().map(|p| read_wav(p).and_then(|w| fit(w.select(0), mixture.len()))).collect::<Result<_>>()?;
    let params = StftParams::default();
    let x = Arc::new(stft(&mixture, params)?);
    let (mode, filters) = match &opts.masks {
        MaskSource::Oracle => {
            if refs.is_empty() {
                return Err(Error::Config("oracle masks need reference WAVs".into()));
            }
            let rs: Vec<_> = refs.iter().map(|r| stft(r, params)).collect::<Result<_>>()?;
            let masks = oracle_masks(&x, &rs)?;
            let psd = estimate_psd(&x, &masks)?;
            let u0: Vec<f64> = fixed_reference(0, x.channels())?;
            let u: Vec<f64> = u0.iter().copied().cycle().take(refs.len() * x.channels()).collect();
            ("oracle".to_string(), mvdr_filters(&psd, &u)?)
        }
        MaskSource::Checkpoint { path, allow_digest_mismatch } => {
            let loaded = load_model(path, None, *allow_digest_mismatch)?;
            let fe = loaded
                .model
                .frontend
                .as_ref()
                .ok_or_else(|| Error::Unsupported("the checkpoint is a single-channel model without a beamformer".into()))?;
            if fe.stats.dim() != loaded.featurizer.mel.n_mels || x.bins() != loaded.featurizer.stft.bins() {
                return Err(Error::Config("checkpoint feature pipeline does not match the input".into()));
            }
            let mut g = Graph::new();
            let out = fe.forward(&mut g, &loaded.model.store, &x, &mut Dropout::off())?;
            let v = g.value(out.filters);
            let data = v.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect();
            let speakers = g.shape(out.filters)[0];
            ("checkpoint".to_string(), BeamformerFilters::new(speakers, x.bins(), x.channels(), data)?)
        }
    };
    create_dir(opts.out_dir)?;
    let mut outputs = Vec::with_capacity(filters.speakers);
    for j in 1..=filters.speakers {
        let y = fit(istft(&beamform(&x, &filters, j)?)?, mixture.len())?;
        let path = opts.out_dir.join(format!("sep{}.wav", j - 1));
        write_wav(&path, &y)?;
        outputs.push((path, y));
    }

    let mut speakers: Vec<SpeakerScore> = outputs
        .iter()
        .map(|(p, _)| SpeakerScore { output: p.display().to_string(), reference: None, si_snr_in: None, si_snr_out: None, improvement: None })
        .collect();
    if !refs.is_empty() {
        if refs.len() != outputs.len() {
            return Err(Error::Data(format!("{} references for {} separated outputs", refs.len(), outputs.len())));
        }
        let cost: Vec<Vec<f64>> =
            outputs.iter().map(|(_, y)| refs.iter().map(|r| si_snr(y.channel(0), r.channel(0)).map(|v| -v)).collect()).collect::<Result<_>>()?;
        let perm = pit_assign(&cost)?;
        for (j, s) in speakers.iter_mut().enumerate() {
            let r = &refs[perm[j]];
            let before = si_snr(mixture.channel(0), r.channel(0))?;
            let after = -cost[j][perm[j]];
            s.reference = Some(opts.references[perm[j]].display().to_string());
            s.si_snr_in = Some(before);
            s.si_snr_out = Some(after);
            s.improvement = Some(after - before);
        }
    }
    let report = SeparationReport { mode, channels: x.channels(), speakers };
    write_file(&opts.out_dir.join(SEPARATION_REPORT), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DereverbSidecar {
    pub input: String,
    pub output: String,
    pub sample_rate: u32,
    pub channels: usize,
    pub samples: usize,
    pub stft: StftParams,
    pub wpe: WpeParams,
}

/// Path of the JSON sidecar written next to `output`.
pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// STFT, WPE and inverse STFT of every channel; the output keeps the input
/// length.
pub fn dereverb_waveform(w: &Waveform<f64>, params: WpeParams) -> Result<Waveform<f64>> {
    let s = stft(w, StftParams::default())?;
    fit(istft(&wpe(&s, params)?)?, w.len())
}

pub fn dereverb(input: &Path, output: &Path, params: WpeParams) -> Result<DereverbSidecar> {
    let w = read_wav(input)?;
    let y = dereverb_waveform(&w, params)?;
    write_wav(output, &y)?;
    let side = DereverbSidecar {
        input: input.display().to_string(),
        output: output.display().to_string(),
        sample_rate: w.sample_rate,
        channels: w.num_channels(),
        samples: w.len(),
        stft: StftParams::default(),
        wpe: params,
    };
    write_file(&sidecar_path(output), serde_json::to_string_pretty(&side).expect("sidecar serializes"))?;
    Ok(side)
}
