use num_complex::Complex;
use rustfft::FftPlanner;

use super::wave::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Framing parameters. Defaults give 25 ms windows with a 10 ms hop at
/// 16 kHz and 257 frequency bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftParams {
    pub win: usize,
    pub hop: usize,
    pub nfft: usize,
}

impl Default for StftParams {
    fn default() -> Self {
        Self { win: 400, hop: 160, nfft: 512 }
    }
}

impl StftParams {
    pub fn bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    /// Number of frames for `len` samples (no centering).
    pub fn frames(&self, len: usize) -> usize {
        if len < self.win {
            0
        } else {
            1 + (len - self.win) / self.hop
        }
    }

    /// Periodic Hann window of length `win`.
    pub fn window<R: Real>(&self) -> Vec<R> {
        let n = R::from_usize_lossy(self.win);
        (0..self.win)
            .map(|i| {
                let phase = R::lit(2.0) * R::PI() * R::from_usize_lossy(i) / n;
                R::lit(0.5) - R::lit(0.5) * phase.cos()
            })
            .collect()
    }
}

/// Complex STFT values indexed `(t, f, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram<R> {
    frames: usize,
    bins: usize,
    channels: usize,
    data: Vec<Complex<R>>,
    pub params: StftParams,
    pub sample_rate: u32,
}

impl<R: Real> ComplexSpectrogram<R> {
    pub fn zeros(frames: usize, bins: usize, channels: usize, params: StftParams, sample_rate: u32) -> Self {
        Self { frames, bins, channels, data: vec![Complex::new(R::zero(), R::zero()); frames * bins * channels], params, sample_rate }
    }

    pub fn from_data(frames: usize, bins: usize, channels: usize, data: Vec<Complex<R>>, params: StftParams, sample_rate: u32) -> Result<Self> {
        if data.len() != frames * bins * channels || bins != params.bins() {
            return Err(Error::Shape(format!("spectrogram {frames}×{bins}×{channels} given {} values (nfft {})", data.len(), params.nfft)));
        }
        Ok(Self { frames, bins, channels, data, params, sample_rate })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn index(&self, t: usize, f: usize, c: usize) -> usize {
        (t * self.bins + f) * self.channels + c
    }

    #[inline]
    pub fn get(&self, t: usize, f: usize, c: usize) -> Complex<R> {
        self.data[self.index(t, f, c)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, f: usize, c: usize, v: Complex<R>) {
        let i = self.index(t, f, c);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[Complex<R>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<R>] {
        &mut self.data
    }

    /// Channel vector `x_{t,f}`.
    pub fn vector(&self, t: usize, f: usize) -> &[Complex<R>] {
        let i = self.index(t, f, 0);
        &self.data[i..i + self.channels]
    }

    /// Single-channel copy of channel `c`.
    pub fn channel(&self, c: usize) -> Self {
        let mut out = Self::zeros(self.frames, self.bins, 1, self.params, self.sample_rate);
        for t in 0..self.frames {
            for f in 0..self.bins {
                out.set(t, f, 0, self.get(t, f, c));
            }
        }
        out
    }

    /// Magnitudes of channel `c` as a row-major `T×F` matrix.
    pub fn magnitude(&self, c: usize) -> Vec<R> {
        let mut out = Vec::with_capacity(self.frames * self.bins);
        for t in 0..self.frames {
            for f in 0..self.bins {
                out.push(self.get(t, f, c).norm());
            }
        }
        out
    }

    pub fn scaled(&self, a: R) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|z| *z = *z * a);
        out
    }

    /// Total energy `Σ|x|²`.
    pub fn energy(&self) -> R {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// Short-time Fourier transform of every channel of `w`.
pub fn stft<R: Real>(w: &Waveform<R>, params: StftParams) -> Result<ComplexSpectrogram<R>> {
    if params.nfft < params.win || params.hop == 0 {
        return Err(Error::Config(format!("invalid STFT parameters {params:?}")));
    }
    if w.len() < params.win {
        return Err(Error::TooShort { needed: params.win, got: w.len() });
    }
    let frames = params.frames(w.len());
    let bins = params.bins();
    let window = params.window::<R>();
    let fft = FftPlanner::<R>::new().plan_fft_forward(params.nfft);
    let mut spec = ComplexSpectrogram::zeros(frames, bins, w.num_channels(), params, w.sample_rate);
    let mut buf = vec![Complex::new(R::zero(), R::zero()); params.nfft];
    for (c, x) in w.channels().iter().enumerate() {
        for t in 0..frames {
            buf.iter_mut().for_each(|z| *z = Complex::new(R::zero(), R::zero()));
            let start = t * params.hop;
            for i in 0..params.win {
                buf[i] = Complex::new(x[start + i] * window[i], R::zero());
            }
            fft.process(&mut buf);
            for f in 0..bins {
                spec.set(t, f, c, buf[f]);
            }
        }
    }
    Ok(spec)
}

/// Weighted overlap-add inverse of [`stft`], normalized by the summed squared
/// synthesis window.
pub fn istft<R: Real>(s: &ComplexSpectrogram<R>) -> Result<Waveform<R>> {
    let p = s.params;
    let len = if s.frames == 0 { p.win } else { (s.frames - 1) * p.hop + p.win };
    let window = p.window::<R>();
    let ifft = FftPlanner::<R>::new().plan_fft_inverse(p.nfft);
    let scale = R::one() / R::from_usize_lossy(p.nfft);
    let mut norm = vec![R::zero(); len];
    for t in 0..s.frames {
        for i in 0..p.win {
            norm[t * p.hop + i] += window[i] * window[i];
        }
    }
    // Edge samples covered only by the window's near-zero tails would
    // amplify any spectral modification; cap the gain there.
    let floor = norm.iter().copied().fold(R::zero(), R::max) * R::lit(1e-3);
    let floor = if floor > R::zero() { floor } else { R::one() };
    let mut channels = Vec::with_capacity(s.channels);
    let mut buf = vec![Complex::new(R::zero(), R::zero()); p.nfft];
    for c in 0..s.channels {
        let mut out = vec![R::zero(); len];
        for t in 0..s.frames {
            for f in 0..s.bins {
                buf[f] = s.get(t, f, c);
            }
            for f in s.bins..p.nfft {
                buf[f] = buf[p.nfft - f].conj();
            }
            ifft.process(&mut buf);
            for i in 0..p.win {
                out[t * p.hop + i] += buf[i].re * scale * window[i];
            }
        }
        for (o, &n) in out.iter_mut().zip(&norm) {
            *o /= if n > floor { n } else { floor };
        }
        channels.push(out);
    }
    Waveform::new(s.sample_rate, channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::mono(16_000, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn frame_count_and_bins() {
        let s = stft(&noise(16_000, 0), StftParams::default()).unwrap();
        assert_eq!((s.frames(), s.bins()), (98, 257));
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let w = Waveform::mono(16_000, vec![0.0; 1000]).unwrap();
        let s = stft(&w, StftParams::default()).unwrap();
        assert!(s.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn too_short_is_an_error() {
        let w = Waveform::mono(16_000, vec![0.0; 399]).unwrap();
        assert!(matches!(stft(&w, StftParams::default()), Err(Error::TooShort { .. })));
    }

    #[test]
    fn tone_peaks_at_expected_bin() {
        let x: Vec<f64> = (0..4000).map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16_000.0).sin()).collect();
        let s = stft(&Waveform::mono(16_000, x.clone()).unwrap(), StftParams::default()).unwrap();
        // Direct DFT of the first windowed frame as the oracle.
        let p = StftParams::default();
        let win = p.window::<f64>();
        let dft_mag = |k: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..p.win {
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / p.nfft as f64;
                re += x[n] * win[n] * ang.cos();
                im += x[n] * win[n] * ang.sin();
            }
            (re * re + im * im).sqrt()
        };
        let oracle = (0..p.bins()).max_by(|&a, &b| dft_mag(a).total_cmp(&dft_mag(b))).unwrap();
        assert_eq!(oracle, 32);
        for t in 0..s.frames() {
            let best = (0..s.bins()).max_by(|&a, &b| s.get(t, a, 0).norm().total_cmp(&s.get(t, b, 0).norm())).unwrap();
            assert_eq!(best, 32);
        }
        assert!((s.get(0, 5, 0).norm() - dft_mag(5)).abs() < 1e-9);
    }

    #[test]
    fn round_trip_interior() {
        let p = StftParams::default();
        for seed in 0..50 {
            let w = noise(3000 + seed as usize * 7, seed);
            let s = stft(&w, p).unwrap();
            let r = istft(&s).unwrap();
            for i in p.win..r.len() - p.win {
                assert!((r.channel(0)[i] - w.channel(0)[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn istft_zero_and_linear() {
        let s = stft(&noise(2000, 4), StftParams::default()).unwrap();
        let z = ComplexSpectrogram::<f64>::zeros(s.frames(), s.bins(), 1, s.params, 16_000);
        assert!(istft(&z).unwrap().channel(0).iter().all(|&v| v == 0.0));
        let a = istft(&s.scaled(2.5)).unwrap();
        let b = istft(&s).unwrap();
        for (x, y) in a.channel(0).iter().zip(b.channel(0)) {
            assert!((x - 2.5 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn stft_is_linear() {
        let (x, y) = (noise(2400, 1), noise(2400, 2));
        let sum: Vec<f64> = x.channel(0).iter().zip(y.channel(0)).map(|(a, b)| 0.3 * a - 1.7 * b).collect();
        let p = StftParams::default();
        let (sx, sy) = (stft(&x, p).unwrap(), stft(&y, p).unwrap());
        let ss = stft(&Waveform::mono(16_000, sum).unwrap(), p).unwrap();
        for i in 0..ss.data().len() {
            let expect = sx.data()[i] * 0.3 - sy.data()[i] * 1.7;
            assert!((ss.data()[i] - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let w = noise(2000, 8);
        let p = StftParams::default();
        let s = stft(&w, p).unwrap();
        let win = p.window::<f64>();
        for t in 0..s.frames() {
            let time: f64 = (0..p.win).map(|i| (w.channel(0)[t * p.hop + i] * win[i]).powi(2)).sum();
            let mut freq = 0.0;
            for f in 0..s.bins() {
                let e = s.get(t, f, 0).norm_sqr();
                freq += if f == 0 || f == p.nfft / 2 { e } else { 2.0 * e };
            }
            assert!((time - freq / p.nfft as f64).abs() < 1e-10);
        }
    }
}
