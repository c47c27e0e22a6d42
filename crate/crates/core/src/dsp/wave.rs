use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Multichannel audio, one sample vector per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<R> {
    pub sample_rate: u32,
    channels: Vec<Vec<R>>,
}

impl<R: Real> Waveform<R> {
    pub fn new(sample_rate: u32, channels: Vec<Vec<R>>) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if len == 0 {
            return Err(Error::Data("waveform must have at least one sample".into()));
        }
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("waveform channels differ in length".into()));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("waveform contains non-finite samples".into()));
        }
        Ok(Self { sample_rate, channels })
    }

    pub fn mono(sample_rate: u32, samples: Vec<R>) -> Result<Self> {
        Self::new(sample_rate, vec![samples])
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channel(&self, c: usize) -> &[R] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<R>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<R>> {
        self.channels
    }

    /// Single-channel view of channel `c`.
    pub fn select(&self, c: usize) -> Self {
        Self { sample_rate: self.sample_rate, channels: vec![self.channels[c].clone()] }
    }

    pub fn scaled(&self, a: R) -> Self {
        Self { sample_rate: self.sample_rate, channels: self.channels.iter().map(|c| c.iter().map(|&v| v * a).collect()).collect() }
    }

    /// Zero-pads every channel to `len` samples.
    pub fn padded(&self, len: usize) -> Self {
        let mut channels = self.channels.clone();
        for c in &mut channels {
            c.resize(len.max(c.len()), R::zero());
        }
        Self { sample_rate: self.sample_rate, channels }
    }

    /// Mean power over all channels and samples.
    pub fn power(&self) -> R {
        let n = R::from_usize_lossy(self.len() * self.num_channels());
        self.channels.iter().flatten().map(|&v| v * v).sum::<R>() / n
    }
}

/// Reads a 16-bit PCM or 32-bit float WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform<f64>> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let nch = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            reader.samples::<i16>().map(|s| s.map(|v| f64::from(v) / 32768.0)).collect::<Result<_, _>>().map_err(wav_err)?
        }
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(wav_err)?,
        (fmt, bits) => return Err(Error::Data(format!("{}: unsupported WAV encoding {fmt:?} {bits}-bit", path.display()))),
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / nch.max(1)); nch];
    for (i, v) in interleaved.into_iter().enumerate() {
        channels[i % nch].push(v);
    }
    Waveform::new(spec.sample_rate, channels)
}

/// Writes 32-bit float WAV (lossless for the synthetic corpus).
pub fn write_wav<R: Real>(path: impl AsRef<Path>, w: &Waveform<R>) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let spec = hound::WavSpec {
        channels: w.num_channels() as u16,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for i in 0..w.len() {
        for c in w.channels() {
            writer.write_sample(c[i].to_f32().unwrap_or(0.0)).map_err(wav_err)?;
        }
    }
    writer.finalize().map_err(wav_err)
}

/// Writes 16-bit PCM WAV, clipping to the representable range.
pub fn write_wav_pcm16<R: Real>(path: impl AsRef<Path>, w: &Waveform<R>) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let spec = hound::WavSpec {
        channels: w.num_channels() as u16,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for i in 0..w.len() {
        for c in w.channels() {
            let v = (c[i].to_f64_lossy() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(wav_err)?;
        }
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trips_float_and_pcm() {
        let dir = tempfile::tempdir().unwrap();
        let w = Waveform::new(16_000, vec![vec![0.25, -0.5, 0.125], vec![0.0, 0.75, -1.0]]).unwrap();
        let p = dir.path().join("f.wav");
        write_wav(&p, &w).unwrap();
        assert_eq!(read_wav(&p).unwrap(), w);
        let p = dir.path().join("i.wav");
        write_wav_pcm16(&p, &w).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.num_channels(), 2);
        for (a, b) in r.channels().iter().flatten().zip(w.channels().iter().flatten()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn rejects_empty_and_ragged() {
        assert!(Waveform::<f64>::mono(16_000, vec![]).is_err());
        assert!(Waveform::new(16_000, vec![vec![0.0], vec![0.0, 1.0]]).is_err());
        assert!(Waveform::mono(16_000, vec![f64::NAN]).is_err());
    }
}
