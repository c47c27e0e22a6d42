//! Reference implementations used as independent oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect()
}

/// White noise switched between loud and quiet 100 ms segments.
pub fn bursty_source(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gains: Vec<f64> = (0..n / 1600 + 1).map(|_| if rng.random_bool(0.6) { rng.random_range(0.3..1.0) } else { 0.02 }).collect();
    gaussian(seed + 1000, n).iter().enumerate().map(|(i, z)| gains[i / 1600] * z).collect()
}

/// Direct-to-reverberant ratio in dB over all channels, counting samples up
/// to `split` past each channel's direct path as direct.
pub fn drr(h: &[Vec<f64>], delays: &[usize], split: usize) -> f64 {
    let (mut e, mut l) = (0.0, 0.0);
    for (hc, &d) in h.iter().zip(delays) {
        for (i, v) in hc.iter().enumerate() {
            if i <= d + split {
                e += v * v;
            } else {
                l += v * v;
            }
        }
    }
    10.0 * (e / l).log10()
}

/// `frames` rows of random log-probabilities over `vocab` symbols.
pub fn log_normalized(frames: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::new();
    for _ in 0..frames {
        let row: Vec<f64> = (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Sums the probability of every frame labelling that collapses to `target`
/// and returns its negative log.
pub fn ctc_enumeration(logp: &[f64], frames: usize, vocab: usize, target: &[usize], blank: usize) -> f64 {
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != blank {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &k)| logp[t * vocab + k]).sum::<f64>().exp();
        }
        let mut i = 0;
        loop {
            if i == frames {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// All permutations of `0..n` in lexicographic order.
pub fn lexicographic_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for first in 0..n {
        for rest in lexicographic_permutations(n - 1) {
            let mut p = vec![first];
            p.extend(rest.into_iter().map(|v| if v >= first { v + 1 } else { v }));
            out.push(p);
        }
    }
    out
}

/// Strictly-better scan over permutations in lexicographic order, so ties
/// keep the lexicographically smallest.
pub fn brute_force_pit(m: &[Vec<f64>]) -> Vec<usize> {
    let n = m.len();
    let mut best_cost = f64::NAN;
    let mut best = Vec::new();
    for p in lexicographic_permutations(n) {
        let c: f64 = (0..n).map(|j| m[j][p[j]]).sum();
        if best.is_empty() || c < best_cost {
            best_cost = c;
            best = p;
        }
    }
    best
}

/// Agreement of `y` with `x` in dB: `10·log10(‖x‖² / ‖x − y‖²)`.
pub fn agreement_db(x: &[f64], y: &[f64]) -> f64 {
    let s: f64 = x.iter().map(|v| v * v).sum();
    let e: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (s / e).log10()
}
