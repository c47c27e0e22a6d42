use serde::{Deserialize, Serialize};

use super::stft::ComplexSpectrogram;
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::scalar::Real;

pub const DEFAULT_MELS: usize = 80;
/// Floor added inside the logarithm of the filterbank energies.
pub const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank spanning 0 Hz to Nyquist, stored as a
/// `bins × n_mels` matrix so features are `|S| · weights`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank<R> {
    pub bins: usize,
    pub n_mels: usize,
    weights: Vec<R>,
}

impl<R: Real> MelFilterbank<R> {
    pub fn new(n_mels: usize, nfft: usize, sample_rate: u32) -> Self {
        let bins = nfft / 2 + 1;
        let nyquist = f64::from(sample_rate) / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
        let mut weights = vec![R::zero(); bins * n_mels];
        for k in 0..bins {
            let f = k as f64 * f64::from(sample_rate) / nfft as f64;
            for m in 0..n_mels {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[k * n_mels + m] = R::lit(w);
            }
        }
        Self { bins, n_mels, weights }
    }

    pub fn weights(&self) -> &[R] {
        &self.weights
    }

    /// `log(|S|·W + floor)` for a row-major `frames × bins` magnitude matrix.
    pub fn log_mel(&self, magnitude: &[R], frames: usize) -> Vec<R> {
        let mut out = kernels::matmul(magnitude, &self.weights, frames, self.bins, self.n_mels);
        let floor = R::lit(LOG_FLOOR);
        out.iter_mut().for_each(|v| *v = (*v + floor).ln());
        out
    }
}

/// Per-dimension mean and standard deviation over a training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Streaming accumulator for [`GlobalStats`].
#[derive(Clone, Debug, Default)]
pub struct StatsAccumulator {
    count: usize,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, sum: vec![0.0; dim], sumsq: vec![0.0; dim] }
    }

    /// Adds every row of a row-major feature matrix.
    pub fn add<R: Real>(&mut self, features: &[R]) {
        let d = self.sum.len();
        for row in features.chunks(d) {
            self.count += 1;
            for (i, &v) in row.iter().enumerate() {
                let v = v.to_f64_lossy();
                self.sum[i] += v;
                self.sumsq[i] += v * v;
            }
        }
    }

    pub fn finish(&self) -> Result<GlobalStats> {
        if self.count == 0 {
            return Err(Error::DegenerateStats("no frames accumulated".into()));
        }
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self.sumsq.iter().zip(&mean).map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt()).collect();
        let stats = GlobalStats { mean, std };
        stats.validate()?;
        Ok(stats)
    }
}

impl GlobalStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Two-pass statistics of a single feature matrix.
    pub fn of<R: Real>(features: &[R], dim: usize) -> Result<Self> {
        let rows = features.len() / dim;
        if rows == 0 {
            return Err(Error::DegenerateStats("empty feature matrix".into()));
        }
        let mut mean = vec![0.0; dim];
        for row in features.chunks(dim) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.to_f64_lossy();
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; dim];
        for row in features.chunks(dim) {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v.to_f64_lossy() - m).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / rows as f64).sqrt()).collect();
        let stats = Self { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::DegenerateStats("mean/std length mismatch".into()));
        }
        if let Some(i) = self.std.iter().position(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::DegenerateStats(format!("std[{i}] = {}", self.std[i])));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes a row-major feature matrix in place.
    pub fn apply<R: Real>(&self, features: &mut [R]) -> Result<()> {
        self.validate()?;
        let d = self.dim();
        if features.len() % d != 0 {
            return Err(Error::Shape(format!("{} values are not rows of width {d}", features.len())));
        }
        for row in features.chunks_mut(d) {
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - R::lit(m)) / R::lit(s);
            }
        }
        Ok(())
    }
}

/// Log mel filterbank features of a single-channel spectrogram with global
/// mean and variance normalization; row-major `T × n_mels`.
pub fn log_mel_gmvn<R: Real>(s: &ComplexSpectrogram<R>, bank: &MelFilterbank<R>, stats: &GlobalStats) -> Result<Vec<R>> {
    if s.channels() != 1 {
        return Err(Error::Shape(format!("log_mel_gmvn needs one channel, got {}", s.channels())));
    }
    if stats.dim() != bank.n_mels {
        return Err(Error::Shape(format!("stats of width {} for {} mels", stats.dim(), bank.n_mels)));
    }
    let mut feats = bank.log_mel(&s.magnitude(0), s.frames());
    stats.apply(&mut feats)?;
    Ok(feats)
}
