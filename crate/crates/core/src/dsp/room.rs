use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::wave::Waveform;
use crate::error::{Error, Result};

/// Tail length as a multiple of T60.
const TAIL_SPAN: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoomMode {
    Anechoic,
    Reverberant { t60: f64 },
}

/// Propagation from each source to each microphone: a pure delay and gain,
/// optionally followed by a diffuse exponentially decaying tail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub mode: RoomMode,
    /// `delays[source][channel]` in samples.
    pub delays: Vec<Vec<usize>>,
    /// `decays[source][channel]`, each in `(0, 1]`.
    pub decays: Vec<Vec<f64>>,
    pub seed: u64,
}

impl RoomSpec {
    pub fn anechoic(delays: Vec<Vec<usize>>, decays: Vec<Vec<f64>>) -> Self {
        Self { mode: RoomMode::Anechoic, delays, decays, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delays.len() != self.decays.len() {
            return Err(Error::Config("room delays and decays list different source counts".into()));
        }
        for (d, g) in self.delays.iter().zip(&self.decays) {
            if d.len() != g.len() {
                return Err(Error::Config("room source has mismatched channel specs".into()));
            }
            if g.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
                return Err(Error::Config("room decays must lie in (0, 1]".into()));
            }
        }
        if let RoomMode::Reverberant { t60 } = self.mode {
            if !(0.2..=0.6).contains(&t60) {
                return Err(Error::Config(format!("t60 {t60} outside [0.2, 0.6] s")));
            }
        }
        Ok(())
    }

    pub fn channels(&self, source: usize) -> Result<usize> {
        self.delays.get(source).map(Vec::len).filter(|&c| c > 0).ok_or_else(|| Error::Config(format!("room has no channel spec for source {source}")))
    }

    /// Impulse response from `source` to `channel`. The reverberant tail
    /// carries about the same energy as the direct path.
    pub fn impulse_response(&self, source: usize, channel: usize, sample_rate: u32) -> Result<Vec<f64>> {
        self.validate()?;
        let c = self.channels(source)?;
        if channel >= c {
            return Err(Error::Config(format!("room has no spec for channel {channel} of source {source}")));
        }
        let delay = self.delays[source][channel];
        let gain = self.decays[source][channel];
        match self.mode {
            RoomMode::Anechoic => {
                let mut h = vec![0.0; delay + 1];
                h[delay] = gain;
                Ok(h)
            }
            RoomMode::Reverberant { t60 } => {
                let sr = f64::from(sample_rate);
                let rate = 3.0 * std::f64::consts::LN_10 / t60;
                let tail = (TAIL_SPAN * t60 * sr).ceil() as usize;
                let amp = (2.0 * rate / sr).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream((source * 1024 + channel) as u64);
                let mut h = vec![0.0; delay + 1 + tail];
                h[delay] = gain;
                for n in 1..=tail {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    h[delay + n] = gain * amp * z * (-rate * n as f64 / sr).exp();
                }
                Ok(h)
            }
        }
    }
}

/// Linear convolution via FFT, truncated to `x.len() + h.len() - 1`.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len() + h.len() - 1;
    if h.len() <= 64 {
        let mut out = vec![0.0; n];
        for (k, &hk) in h.iter().enumerate().filter(|(_, &v)| v != 0.0) {
            for (i, &xi) in x.iter().enumerate() {
                out[i + k] += hk * xi;
            }
        }
        return out;
    }
    let size = n.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut b = vec![Complex::new(0.0, 0.0); size];
        b.iter_mut().zip(v).for_each(|(z, &r)| z.re = r);
        b
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    a[..n].iter().map(|z| z.re / size as f64).collect()
}

/// Renders a mono source at every microphone of `room`. The output keeps the
/// source length; anything pushed past the end is dropped.
pub fn spatialize(src: &Waveform<f64>, room: &RoomSpec, source_index: usize) -> Result<Waveform<f64>> {
    if src.num_channels() != 1 {
        return Err(Error::Shape(format!("spatialize expects mono input, got {} channels", src.num_channels())));
    }
    let c = room.channels(source_index)?;
    let len = src.len();
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let h = room.impulse_response(source_index, ch, src.sample_rate)?;
        let mut y = convolve(src.channel(0), &h);
        y.truncate(len);
        out.push(y);
    }
    Waveform::new(src.sample_rate, out)
}
