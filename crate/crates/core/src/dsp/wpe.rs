use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stft::ComplexSpectrogram;
use crate::error::{Error, Result};
use crate::numerics::{hermitian_solve, ComplexMatrix};
use crate::scalar::Real;

/// Lower bound on the per-frame variance estimate.
pub const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WpeParams {
    pub taps: usize,
    pub delay: usize,
    pub iters: usize,
}

impl Default for WpeParams {
    fn default() -> Self {
        Self { taps: 10, delay: 3, iters: 3 }
    }
}

/// Dereverberated spectrogram together with the final prediction filters
/// (one `C·taps × C` matrix per bin) and the weighted prediction-error
/// objective before the first and after every iteration.
#[derive(Clone, Debug)]
pub struct WpeOutput<R> {
    pub output: ComplexSpectrogram<R>,
    pub filters: Vec<ComplexMatrix<R>>,
    pub objective: Vec<f64>,
}

/// Weighted prediction error dereverberation with default settings.
pub fn wpe<R: Real>(s: &ComplexSpectrogram<R>, params: WpeParams) -> Result<ComplexSpectrogram<R>> {
    wpe_detailed(s, params).map(|o| o.output)
}

pub fn wpe_detailed<R: Real>(s: &ComplexSpectrogram<R>, params: WpeParams) -> Result<WpeOutput<R>> {
    let needed = params.taps + params.delay + 1;
    if s.frames() < needed {
        return Err(Error::TooShort { needed, got: s.frames() });
    }
    if params.taps == 0 || params.delay == 0 {
        return Err(Error::Config(format!("WPE needs taps ≥ 1 and delay ≥ 1, got {params:?}")));
    }
    let per_bin: Vec<Result<(Vec<Complex<R>>, ComplexMatrix<R>, Vec<f64>)>> = (0..s.bins()).into_par_iter().map(|f| wpe_bin(s, f, params)).collect();
    let mut out = s.clone();
    let mut filters = Vec::with_capacity(s.bins());
    let mut objective = vec![0.0; params.iters + 1];
    for (f, r) in per_bin.into_iter().enumerate() {
        let (d, g, obj) = r?;
        for t in 0..s.frames() {
            for c in 0..s.channels() {
                out.set(t, f, c, d[t * s.channels() + c]);
            }
        }
        filters.push(g);
        objective.iter_mut().zip(obj).for_each(|(a, b)| *a += b);
    }
    Ok(WpeOutput { output: out, filters, objective })
}

/// Subtracts the prediction `Gᴴ x̃` made by fixed `filters` from `s`.
pub fn apply_filters<R: Real>(s: &ComplexSpectrogram<R>, filters: &[ComplexMatrix<R>], params: WpeParams) -> Result<ComplexSpectrogram<R>> {
    let ck = s.channels() * params.taps;
    if filters.len() != s.bins() || filters.iter().any(|g| g.rows() != ck || g.cols() != s.channels()) {
        return Err(Error::Shape(format!("WPE filters do not match a spectrogram with {} bins and {} channels", s.bins(), s.channels())));
    }
    let mut out = s.clone();
    for (f, g) in filters.iter().enumerate() {
        let x = bin_frames(s, f);
        let d = predict_residual(&x, g, s.frames(), s.channels(), params);
        for t in 0..s.frames() {
            for c in 0..s.channels() {
                out.set(t, f, c, d[t * s.channels() + c]);
            }
        }
    }
    Ok(out)
}

fn bin_frames<R: Real>(s: &ComplexSpectrogram<R>, f: usize) -> Vec<Complex<R>> {
    (0..s.frames()).flat_map(|t| s.vector(t, f).iter().copied()).collect()
}

/// Delayed history `x̃_t = [x_{t−Δ}, …, x_{t−Δ−K+1}]`, zeros before the start.
fn stacked<R: Real>(x: &[Complex<R>], t: usize, c: usize, params: WpeParams, buf: &mut [Complex<R>]) {
    for k in 0..params.taps {
        let lag = params.delay + k;
        for ch in 0..c {
            buf[k * c + ch] = if t >= lag { x[(t - lag) * c + ch] } else { Complex::new(R::zero(), R::zero()) };
        }
    }
}

fn predict_residual<R: Real>(x: &[Complex<R>], g: &ComplexMatrix<R>, frames: usize, c: usize, params: WpeParams) -> Vec<Complex<R>> {
    let ck = c * params.taps;
    let mut hist = vec![Complex::new(R::zero(), R::zero()); ck];
    let mut d = x.to_vec();
    for t in 0..frames {
        stacked(x, t, c, params, &mut hist);
        for ch in 0..c {
            let mut p = Complex::new(R::zero(), R::zero());
            for k in 0..ck {
                p += g[(k, ch)].conj() * hist[k];
            }
            d[t * c + ch] -= p;
        }
    }
    d
}

fn variances<R: Real>(d: &[Complex<R>], c: usize) -> Vec<R> {
    let floor = R::lit(VARIANCE_FLOOR);
    d.chunks(c)
        .map(|v| {
            let m = v.iter().map(|z| z.norm_sqr()).sum::<R>() / R::from_usize_lossy(c);
            if m > floor {
                m
            } else {
                floor
            }
        })
        .collect()
}

/// `Σ_t (Σ_c |d|²/λ_t + C·log λ_t)` with `λ` estimated from `d` itself.
fn objective<R: Real>(d: &[Complex<R>], c: usize) -> f64 {
    let lam = variances(d, c);
    d.chunks(c)
        .zip(&lam)
        .map(|(v, &l)| {
            let l = l.to_f64_lossy();
            v.iter().map(|z| z.norm_sqr().to_f64_lossy()).sum::<f64>() / l + c as f64 * l.ln()
        })
        .sum()
}

#[allow(clippy::type_complexity)]
fn wpe_bin<R: Real>(s: &ComplexSpectrogram<R>, f: usize, params: WpeParams) -> Result<(Vec<Complex<R>>, ComplexMatrix<R>, Vec<f64>)> {
    let (frames, c) = (s.frames(), s.channels());
    let ck = c * params.taps;
    let x = bin_frames(s, f);
    let mut d = x.clone();
    let mut g = ComplexMatrix::zeros(ck, c);
    let mut trace = vec![objective(&d, c)];
    let mut hist = vec![Complex::new(R::zero(), R::zero()); ck];
    for _ in 0..params.iters {
        let lam = variances(&d, c);
        let mut r = ComplexMatrix::<R>::zeros(ck, ck);
        let mut p = ComplexMatrix::<R>::zeros(ck, c);
        for t in 0..frames {
            stacked(&x, t, c, params, &mut hist);
            let w = R::one() / lam[t];
            for i in 0..ck {
                let hi = hist[i].scale(w);
                if hi.re == R::zero() && hi.im == R::zero() {
                    continue;
                }
                for j in 0..ck {
                    r[(i, j)] += hi * hist[j].conj();
                }
                for ch in 0..c {
                    p[(i, ch)] += hi * x[t * c + ch].conj();
                }
            }
        }
        r.symmetrize();
        g = if r.trace().norm() > R::zero() { hermitian_solve(&r, &p)? } else { ComplexMatrix::zeros(ck, c) };
        d = predict_residual(&x, &g, frames, c, params);
        trace.push(objective(&d, c));
    }
    Ok((d, g, trace))
}
