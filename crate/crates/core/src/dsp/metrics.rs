use crate::error::{Error, Result};
use crate::scalar::Real;

/// Ceiling applied to SI-SNR so perfect estimates stay finite.
pub const SI_SNR_CLAMP_DB: f64 = 80.0;

/// Scale-invariant SNR in dB. Both signals are made zero-mean, the estimate
/// is projected onto the reference, and the target/residual energy ratio is
/// reported, clamped to ±80 dB.
pub fn si_snr<R: Real>(est: &[R], reference: &[R]) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::Metric(format!("si_snr needs equal nonempty lengths, got {} and {}", est.len(), reference.len())));
    }
    let n = est.len() as f64;
    let me = est.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
    let mr = reference.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
    let e: Vec<f64> = est.iter().map(|v| v.to_f64_lossy() - me).collect();
    let r: Vec<f64> = reference.iter().map(|v| v.to_f64_lossy() - mr).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if !(rr > 0.0) {
        return Err(Error::Metric("si_snr reference is zero".into()));
    }
    let alpha = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    let target = alpha * alpha * rr;
    let residual: f64 = e.iter().zip(&r).map(|(a, b)| (a - alpha * b).powi(2)).sum();
    let db = 10.0 * (target / residual).log10();
    Ok(if db.is_nan() { -SI_SNR_CLAMP_DB } else { db.clamp(-SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn signal(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identical_and_scaled_clamp() {
        let r = signal(1, 1000);
        assert_eq!(si_snr(&r, &r).unwrap(), SI_SNR_CLAMP_DB);
        let e: Vec<f64> = r.iter().map(|v| 3.0 * v).collect();
        assert_eq!(si_snr(&e, &r).unwrap(), SI_SNR_CLAMP_DB);
    }

    #[test]
    fn orthogonal_noise_of_equal_power_is_zero_db() {
        let mut r = signal(2, 4000);
        let mut n = signal(3, 4000);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mr, mn) = (mean(&r), mean(&n));
        r.iter_mut().for_each(|v| *v -= mr);
        n.iter_mut().for_each(|v| *v -= mn);
        let rr: f64 = r.iter().map(|v| v * v).sum();
        let proj = n.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
        n.iter_mut().zip(&r).for_each(|(a, b)| *a -= proj * b);
        let nn: f64 = n.iter().map(|v| v * v).sum();
        let k = (rr / nn).sqrt();
        let e: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + k * b).collect();
        assert!(si_snr(&e, &r).unwrap().abs() < 0.2);
    }

    #[test]
    fn zero_reference_errors() {
        assert!(matches!(si_snr(&[1.0, 2.0], &[0.0, 0.0]), Err(Error::Metric(_))));
        assert!(si_snr(&[1.0], &[1.0, 2.0]).is_err());
    }
}
