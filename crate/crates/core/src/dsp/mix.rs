use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::wave::Waveform;
use crate::error::{Error, Result};

/// Sum of the sources plus white Gaussian noise at `noise_snr_db` relative
/// to the clean sum. `None` or an infinite SNR disables noise.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixture: Waveform<f64>,
    pub noise: Option<Waveform<f64>>,
}

/// Pads every source to the longest one and adds them sample-wise.
pub fn mix(sources: &[Waveform<f64>], noise_snr_db: Option<f64>, seed: u64) -> Result<Mixture> {
    let first = sources.first().ok_or_else(|| Error::Contract("mix needs at least one source".into()))?;
    let channels = first.num_channels();
    if sources.iter().any(|s| s.num_channels() != channels || s.sample_rate != first.sample_rate) {
        return Err(Error::Shape("mix sources differ in channel count or sample rate".into()));
    }
    let len = sources.iter().map(Waveform::len).max().unwrap_or(0);
    let mut sum = vec![vec![0.0; len]; channels];
    for s in sources {
        for (acc, x) in sum.iter_mut().zip(s.channels()) {
            acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        }
    }
    let clean = Waveform::new(first.sample_rate, sum)?;
    let snr = match noise_snr_db {
        Some(s) if s.is_finite() => s,
        Some(s) if s.is_nan() => return Err(Error::Config("noise SNR is NaN".into())),
        _ => return Ok(Mixture { mixture: clean, noise: None }),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise: Vec<Vec<f64>> = (0..channels).map(|_| (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let p_clean = clean.power();
    let p_noise: f64 = noise.iter().flatten().map(|v| v * v).sum::<f64>() / (len * channels) as f64;
    let scale = (p_clean / p_noise / 10f64.powf(snr / 10.0)).sqrt();
    noise.iter_mut().flatten().for_each(|v| *v *= scale);
    let noisy: Vec<Vec<f64>> = clean.channels().iter().zip(&noise).map(|(c, n)| c.iter().zip(n).map(|(a, b)| a + b).collect()).collect();
    Ok(Mixture { mixture: Waveform::new(first.sample_rate, noisy)?, noise: Some(Waveform::new(first.sample_rate, noise)?) })
}
