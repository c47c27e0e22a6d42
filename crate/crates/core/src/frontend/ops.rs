//! Differentiable wrappers around the beamformer stages. Complex gradients
//! follow the convention `ḡ = ∂L/∂Re z + i·∂L/∂Im z`.

use std::sync::Arc;

use num_complex::Complex;

use super::beamformer::{averaged_masks, estimate_psd, is_degenerate, mvdr_bin, MaskSet, MvdrBin, PsdSet};
use crate::dsp::ComplexSpectrogram;
use crate::error::{Error, Result};
use crate::numerics::{hermitian_solve, ComplexMatrix, CustomOp, Graph, Var};
use crate::scalar::Real;

fn zero<R: Real>() -> Complex<R> {
    Complex::new(R::zero(), R::zero())
}

struct PsdOp<R: Real> {
    x: Arc<ComplexSpectrogram<R>>,
    sources: usize,
}

impl<R: Real> CustomOp<R> for PsdOp<R> {
    fn name(&self) -> &str {
        "psd"
    }

    fn backward(&self, inputs: &[&[R]], output: &[R], grad_out: &[R]) -> Vec<Vec<R>> {
        let x = &self.x;
        let (t_n, f_n, c_n, s_n) = (x.frames(), x.bins(), x.channels(), self.sources);
        let masks = MaskSet::new(t_n, f_n, c_n, s_n, inputs[0].to_vec()).expect("mask shape checked in forward");
        let (_, sums) = averaged_masks(&masks);
        let c2 = c_n * c_n;
        let inv_c = R::one() / R::from_usize_lossy(c_n);
        // d L / d m̄[j][t][f]
        let mut g_avg = vec![R::zero(); s_n * t_n * f_n];
        for j in 0..s_n {
            for f in 0..f_n {
                let s = sums[j * f_n + f];
                if is_degenerate(s, t_n) {
                    continue;
                }
                let base = (j * f_n + f) * c2;
                for t in 0..t_n {
                    let v = x.vector(t, f);
                    let mut acc = R::zero();
                    for a in 0..c_n {
                        for b in 0..c_n {
                            let k = 2 * (base + a * c_n + b);
                            let d = v[a] * v[b].conj() - Complex::new(output[k], output[k + 1]);
                            acc += grad_out[k] * d.re + grad_out[k + 1] * d.im;
                        }
                    }
                    g_avg[(j * t_n + t) * f_n + f] = acc / s;
                }
            }
        }
        let mut g = vec![R::zero(); inputs[0].len()];
        for c in 0..c_n {
            for t in 0..t_n {
                for j in 0..s_n {
                    for f in 0..f_n {
                        g[((c * t_n + t) * s_n + j) * f_n + f] = g_avg[(j * t_n + t) * f_n + f] * inv_c;
                    }
                }
            }
        }
        vec![g]
    }
}

/// PSD matrices from a mask node laid out `[C, T, sources·F]` (column
/// `j·F + f`); output `[sources, F, C, C, 2]`.
pub fn psd<R: Real>(g: &mut Graph<R>, x: &Arc<ComplexSpectrogram<R>>, masks: Var, sources: usize) -> Result<Var> {
    let (t_n, f_n, c_n) = (x.frames(), x.bins(), x.channels());
    if g.shape(masks) != [c_n, t_n, sources * f_n] {
        return Err(Error::Shape(format!("mask node {:?} for C={c_n} T={t_n} sources={sources} F={f_n}", g.shape(masks))));
    }
    let set = MaskSet::new(t_n, f_n, c_n, sources, g.value(masks).to_vec())?;
    let value = estimate_psd(x, &set)?.to_flat();
    g.custom(&[masks], vec![sources, f_n, c_n, c_n, 2], value, Box::new(PsdOp { x: Arc::clone(x), sources }))
}

struct MvdrOp<R: Real> {
    sources: usize,
    bins: usize,
    channels: usize,
    cache: Vec<MvdrBin<R>>,
}

impl<R: Real> CustomOp<R> for MvdrOp<R> {
    fn name(&self) -> &str {
        "mvdr"
    }

    fn backward(&self, inputs: &[&[R]], output: &[R], grad_out: &[R]) -> Vec<Vec<R>> {
        let (s_n, f_n, c) = (self.sources, self.bins, self.channels);
        let u = inputs[1];
        let mut g_psd = vec![R::zero(); inputs[0].len()];
        let mut g_u = vec![R::zero(); u.len()];
        let c2 = c * c;
        for j in 1..s_n {
            let uj = &u[(j - 1) * c..j * c];
            for f in 0..f_n {
                let bin = &self.cache[(j - 1) * f_n + f];
                let out_base = ((j - 1) * f_n + f) * c;
                let gg: Vec<Complex<R>> = (0..c).map(|k| Complex::new(grad_out[2 * (out_base + k)], grad_out[2 * (out_base + k) + 1])).collect();
                if bin.fallback {
                    for k in 0..c {
                        g_u[(j - 1) * c + k] += gg[k].re;
                    }
                    continue;
                }
                let filt: Vec<Complex<R>> = (0..c).map(|k| Complex::new(output[2 * (out_base + k)], output[2 * (out_base + k) + 1])).collect();
                let tau = bin.trace;
                let g_w: Vec<Complex<R>> = gg.iter().map(|&v| v / tau.conj()).collect();
                let g_tau: Complex<R> = -gg.iter().zip(&filt).map(|(&v, &gc)| (gc / tau).conj() * v).sum::<Complex<R>>();
                let mut g_a = ComplexMatrix::from_fn(c, c, |r, k| g_w[r].scale(uj[k]));
                for k in 0..c {
                    g_a[(k, k)] += g_tau;
                }
                for k in 0..c {
                    let v: Complex<R> = (0..c).map(|r| bin.a[(r, k)].conj() * g_w[r]).sum();
                    g_u[(j - 1) * c + k] += v.re;
                }
                let g_b = match hermitian_solve(&bin.interference.conj_transpose(), &g_a) {
                    Ok(v) => v,
                    Err(_) => continue,
                };
                let g_n = g_b.matmul(&bin.a.conj_transpose()).expect("square").scale(Complex::new(-R::one(), R::zero()));
                for i in 0..s_n {
                    let src = if i == j { &g_b } else { &g_n };
                    let base = (i * f_n + f) * c2;
                    for (k, z) in src.data().iter().enumerate() {
                        g_psd[2 * (base + k)] += z.re;
                        g_psd[2 * (base + k) + 1] += z.im;
                    }
                }
            }
        }
        vec![g_psd, g_u]
    }
}

/// MVDR filters from a PSD node `[sources, F, C, C, 2]` and per-speaker
/// references `[J, C]`; output `[J, F, C, 2]`.
pub fn mvdr<R: Real>(g: &mut Graph<R>, psd: Var, reference: Var) -> Result<Var> {
    let shape = g.shape(psd).to_vec();
    let [s_n, f_n, c, c2, 2] = shape[..] else {
        return Err(Error::Shape(format!("PSD node of shape {shape:?}")));
    };
    if c != c2 || g.shape(reference) != [s_n - 1, c] {
        return Err(Error::Shape(format!("reference {:?} for PSD {shape:?}", g.shape(reference))));
    }
    let set = PsdSet::from_flat(s_n, f_n, c, g.value(psd))?;
    let u = g.value(reference).to_vec();
    let mut value = Vec::with_capacity((s_n - 1) * f_n * c * 2);
    let mut cache = Vec::with_capacity((s_n - 1) * f_n);
    for j in 1..s_n {
        for f in 0..f_n {
            let (filt, bin) = mvdr_bin(&set, j, f, &u[(j - 1) * c..j * c])?;
            value.extend(filt.iter().flat_map(|z| [z.re, z.im]));
            cache.push(bin);
        }
    }
    g.custom(&[psd, reference], vec![s_n - 1, f_n, c, 2], value, Box::new(MvdrOp { sources: s_n, bins: f_n, channels: c, cache }))
}

struct BeamMagnitudeOp<R: Real> {
    x: Arc<ComplexSpectrogram<R>>,
    speakers: usize,
}

fn beam_outputs<R: Real>(x: &ComplexSpectrogram<R>, filt: &[R], speakers: usize) -> Vec<Complex<R>> {
    let (t_n, f_n, c) = (x.frames(), x.bins(), x.channels());
    let mut out = vec![zero(); speakers * t_n * f_n];
    for j in 0..speakers {
        for t in 0..t_n {
            for f in 0..f_n {
                let base = (j * f_n + f) * c;
                let v = x.vector(t, f);
                out[(j * t_n + t) * f_n + f] = (0..c).map(|k| Complex::new(filt[2 * (base + k)], filt[2 * (base + k) + 1]).conj() * v[k]).sum();
            }
        }
    }
    out
}

impl<R: Real> CustomOp<R> for BeamMagnitudeOp<R> {
    fn name(&self) -> &str {
        "beamform_magnitude"
    }

    fn backward(&self, inputs: &[&[R]], _output: &[R], grad_out: &[R]) -> Vec<Vec<R>> {
        let x = &self.x;
        let (t_n, f_n, c) = (x.frames(), x.bins(), x.channels());
        let s = beam_outputs(x, inputs[0], self.speakers);
        let mut g = vec![R::zero(); inputs[0].len()];
        for j in 0..self.speakers {
            for t in 0..t_n {
                for f in 0..f_n {
                    let i = (j * t_n + t) * f_n + f;
                    let mag = s[i].norm();
                    if mag == R::zero() {
                        continue;
                    }
                    let gs = s[i].scale(grad_out[i] / mag);
                    let v = x.vector(t, f);
                    let base = (j * f_n + f) * c;
                    for k in 0..c {
                        let gk = gs.conj() * v[k];
                        g[2 * (base + k)] += gk.re;
                        g[2 * (base + k) + 1] += gk.im;
                    }
                }
            }
        }
        vec![g]
    }
}

/// `|gʲ(f)^H x_{t,f}|` for a filter node `[J, F, C, 2]`; output `[J, T, F]`.
pub fn beamform_magnitude<R: Real>(g: &mut Graph<R>, x: &Arc<ComplexSpectrogram<R>>, filters: Var) -> Result<Var> {
    let (t_n, f_n, c) = (x.frames(), x.bins(), x.channels());
    let shape = g.shape(filters).to_vec();
    if shape.len() != 4 || shape[1..] != [f_n, c, 2] {
        return Err(Error::Shape(format!("filter node {shape:?} for F={f_n} C={c}")));
    }
    let speakers = shape[0];
    let value = beam_outputs(x, g.value(filters), speakers).iter().map(|z| z.norm()).collect();
    g.custom(&[filters], vec![speakers, t_n, f_n], value, Box::new(BeamMagnitudeOp { x: Arc::clone(x), speakers }))
}
