use num_complex::Complex;

use crate::dsp::ComplexSpectrogram;
use crate::error::{Error, Result};
use crate::numerics::complex::hermitian_solve_detailed;
use crate::numerics::ComplexMatrix;
use crate::scalar::Real;

/// Mask value substituted across a bin whose masks sum to (nearly) zero.
pub const DEGENERATE_MASK: f64 = 1e-10;
/// Relative trace magnitude below which MVDR falls back to the reference.
pub const TRACE_TOLERANCE: f64 = 1e-12;

/// Time-frequency masks for `sources` = J+1 sources (source 0 is noise),
/// stored `[channel][frame][source][bin]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet<R> {
    pub frames: usize,
    pub bins: usize,
    pub channels: usize,
    pub sources: usize,
    data: Vec<R>,
}

impl<R: Real> MaskSet<R> {
    pub fn new(frames: usize, bins: usize, channels: usize, sources: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != frames * bins * channels * sources {
            return Err(Error::Shape(format!("{} mask values for T={frames} F={bins} C={channels} sources={sources}", data.len())));
        }
        if sources < 2 {
            return Err(Error::Shape("a mask set needs noise plus at least one speaker".into()));
        }
        if data.iter().any(|&v| !(v >= R::zero() && v <= R::one())) {
            return Err(Error::Contract("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { frames, bins, channels, sources, data })
    }

    pub fn from_fn(frames: usize, bins: usize, channels: usize, sources: usize, mut f: impl FnMut(usize, usize, usize, usize) -> R) -> Result<Self> {
        let mut data = vec![R::zero(); frames * bins * channels * sources];
        for c in 0..channels {
            for t in 0..frames {
                for j in 0..sources {
                    for k in 0..bins {
                        data[((c * frames + t) * sources + j) * bins + k] = f(t, k, c, j);
                    }
                }
            }
        }
        Self::new(frames, bins, channels, sources, data)
    }

    pub fn get(&self, t: usize, f: usize, c: usize, j: usize) -> R {
        self.data[((c * self.frames + t) * self.sources + j) * self.bins + f]
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }
}

/// Per-source, per-bin spatial covariance matrices, stored
/// `[source][bin][row][col]`.
#[derive(Clone, Debug)]
pub struct PsdSet<R> {
    pub sources: usize,
    pub bins: usize,
    pub channels: usize,
    data: Vec<Complex<R>>,
    /// `[source][bin]` flags for bins rescued with a uniform tiny mask.
    pub degenerate: Vec<bool>,
}

impl<R: Real> PsdSet<R> {
    pub fn from_flat(sources: usize, bins: usize, channels: usize, flat: &[R]) -> Result<Self> {
        let n = sources * bins * channels * channels;
        if flat.len() != 2 * n {
            return Err(Error::Shape(format!("{} values for {n} complex PSD entries", flat.len())));
        }
        Ok(Self {
            sources,
            bins,
            channels,
            data: flat.chunks(2).map(|p| Complex::new(p[0], p[1])).collect(),
            degenerate: vec![false; sources * bins],
        })
    }

    pub fn matrix(&self, j: usize, f: usize) -> ComplexMatrix<R> {
        let c2 = self.channels * self.channels;
        let start = (j * self.bins + f) * c2;
        ComplexMatrix::new(self.channels, self.channels, self.data[start..start + c2].to_vec()).expect("square block")
    }

    /// Interleaved `(re, im)` values in storage order.
    pub fn to_flat(&self) -> Vec<R> {
        self.data.iter().flat_map(|z| [z.re, z.im]).collect()
    }
}

fn check_shapes<R: Real>(x: &ComplexSpectrogram<R>, m: &MaskSet<R>) -> Result<()> {
    if (x.frames(), x.bins(), x.channels()) != (m.frames, m.bins, m.channels) {
        return Err(Error::Shape(format!(
            "masks (T={}, F={}, C={}) for a spectrogram (T={}, F={}, C={})",
            m.frames,
            m.bins,
            m.channels,
            x.frames(),
            x.bins(),
            x.channels()
        )));
    }
    Ok(())
}

/// Channel-averaged masks `m[j][t][f]` and their time sums `[j][f]`.
pub(crate) fn averaged_masks<R: Real>(m: &MaskSet<R>) -> (Vec<R>, Vec<R>) {
    let (t_n, f_n, s_n, c_n) = (m.frames, m.bins, m.sources, m.channels);
    let inv_c = R::one() / R::from_usize_lossy(c_n);
    let mut avg = vec![R::zero(); s_n * t_n * f_n];
    for c in 0..c_n {
        for t in 0..t_n {
            for j in 0..s_n {
                for f in 0..f_n {
                    avg[(j * t_n + t) * f_n + f] += m.get(t, f, c, j) * inv_c;
                }
            }
        }
    }
    let mut sums = vec![R::zero(); s_n * f_n];
    for j in 0..s_n {
        for t in 0..t_n {
            for f in 0..f_n {
                sums[j * f_n + f] += avg[(j * t_n + t) * f_n + f];
            }
        }
    }
    (avg, sums)
}

pub(crate) fn is_degenerate<R: Real>(sum: R, frames: usize) -> bool {
    !(sum > R::lit(DEGENERATE_MASK) * R::from_usize_lossy(frames))
}

/// Mask-weighted spatial covariance per source and bin,
/// `Φʲ(f) = Σ_t mʲ_{t,f} x x^H / Σ_t mʲ_{t,f}` with `m` averaged over channels.
pub fn estimate_psd<R: Real>(x: &ComplexSpectrogram<R>, m: &MaskSet<R>) -> Result<PsdSet<R>> {
    check_shapes(x, m)?;
    let (t_n, f_n, s_n, c_n) = (m.frames, m.bins, m.sources, m.channels);
    let (avg, sums) = averaged_masks(m);
    let c2 = c_n * c_n;
    let mut data = vec![Complex::new(R::zero(), R::zero()); s_n * f_n * c2];
    let mut degenerate = vec![false; s_n * f_n];
    for j in 0..s_n {
        for f in 0..f_n {
            let rescue = is_degenerate(sums[j * f_n + f], t_n);
            if rescue {
                log::warn!("degenerate mask for source {j} at bin {f}; using a uniform {DEGENERATE_MASK} mask");
                degenerate[j * f_n + f] = true;
            }
            let block = &mut data[(j * f_n + f) * c2..(j * f_n + f + 1) * c2];
            let mut total = R::zero();
            for t in 0..t_n {
                let w = if rescue { R::lit(DEGENERATE_MASK) } else { avg[(j * t_n + t) * f_n + f] };
                total += w;
                let v = x.vector(t, f);
                for a in 0..c_n {
                    for b in 0..c_n {
                        block[a * c_n + b] += (v[a] * v[b].conj()).scale(w);
                    }
                }
            }
            let inv = R::one() / total;
            block.iter_mut().for_each(|z| *z = z.scale(inv));
            for a in 0..c_n {
                block[a * c_n + a].im = R::zero();
                for b in a + 1..c_n {
                    let h = (block[a * c_n + b] + block[b * c_n + a].conj()).scale(R::lit(0.5));
                    block[a * c_n + b] = h;
                    block[b * c_n + a] = h.conj();
                }
            }
        }
    }
    Ok(PsdSet { sources: s_n, bins: f_n, channels: c_n, data, degenerate })
}

/// MVDR filters `gʲ(f)` for speakers `j = 1..J`, stored `[speaker−1][bin][channel]`.
#[derive(Clone, Debug)]
pub struct BeamformerFilters<R> {
    pub speakers: usize,
    pub bins: usize,
    pub channels: usize,
    data: Vec<Complex<R>>,
    /// `[speaker−1][bin]` flags for bins that fell back to the reference.
    pub fallback: Vec<bool>,
}

impl<R: Real> BeamformerFilters<R> {
    pub fn new(speakers: usize, bins: usize, channels: usize, data: Vec<Complex<R>>) -> Result<Self> {
        if data.len() != speakers * bins * channels {
            return Err(Error::Shape(format!("{} filter taps for J={speakers} F={bins} C={channels}", data.len())));
        }
        Ok(Self { speakers, bins, channels, data, fallback: vec![false; speakers * bins] })
    }

    /// Filter of speaker `j` (1-based) at bin `f`.
    pub fn filter(&self, j: usize, f: usize) -> &[Complex<R>] {
        let start = ((j - 1) * self.bins + f) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn data(&self) -> &[Complex<R>] {
        &self.data
    }

    pub fn to_flat(&self) -> Vec<R> {
        self.data.iter().flat_map(|z| [z.re, z.im]).collect()
    }
}

/// Intermediate values of one MVDR solve kept for differentiation.
#[derive(Clone, Debug)]
pub(crate) struct MvdrBin<R> {
    pub interference: ComplexMatrix<R>,
    pub a: ComplexMatrix<R>,
    pub trace: Complex<R>,
    pub fallback: bool,
}

/// Solves one `(speaker, bin)` MVDR problem, returning the filter.
pub(crate) fn mvdr_bin<R: Real>(psd: &PsdSet<R>, j: usize, f: usize, u: &[R]) -> Result<(Vec<Complex<R>>, MvdrBin<R>)> {
    let c = psd.channels;
    let mut n = ComplexMatrix::zeros(c, c);
    for i in (0..psd.sources).filter(|&i| i != j) {
        n = n.add(&psd.matrix(i, f))?;
    }
    let target = psd.matrix(j, f);
    let a = hermitian_solve_detailed(&n, &target)?.x;
    let trace = a.trace();
    let passthrough = || u.iter().map(|&v| Complex::new(v, R::zero())).collect::<Vec<_>>();
    if !(trace.norm() >= R::lit(TRACE_TOLERANCE) * a.max_abs()) || !trace.norm().is_finite() {
        log::warn!("MVDR trace vanished for speaker {j} at bin {f}; passing the reference through");
        return Ok((passthrough(), MvdrBin { interference: n, a, trace, fallback: true }));
    }
    let g = (0..c)
        .map(|r| {
            let w: Complex<R> = (0..c).map(|k| a[(r, k)].scale(u[k])).sum();
            w / trace
        })
        .collect();
    Ok((g, MvdrBin { interference: n, a, trace, fallback: false }))
}

/// MVDR filter of speaker `j` (1-based) for every bin, given a reference
/// weighting `u` over channels: `g = (N⁻¹Φʲ / tr(N⁻¹Φʲ))·u` with
/// `N = Σ_{i≠j} Φⁱ` including the noise source.
pub fn mvdr_filter<R: Real>(psd: &PsdSet<R>, j: usize, u: &[R]) -> Result<Vec<Vec<Complex<R>>>> {
    if j == 0 || j >= psd.sources {
        return Err(Error::Index { index: j, len: psd.sources });
    }
    if u.len() != psd.channels {
        return Err(Error::Shape(format!("reference of length {} for {} channels", u.len(), psd.channels)));
    }
    (0..psd.bins).map(|f| mvdr_bin(psd, j, f, u).map(|r| r.0)).collect()
}

/// Filters for every speaker; `u` holds one reference row per speaker.
pub fn mvdr_filters<R: Real>(psd: &PsdSet<R>, u: &[R]) -> Result<BeamformerFilters<R>> {
    let (speakers, c) = (psd.sources - 1, psd.channels);
    if u.len() != speakers * c {
        return Err(Error::Shape(format!("references of length {} for J={speakers}, C={c}", u.len())));
    }
    let mut data = Vec::with_capacity(speakers * psd.bins * c);
    let mut fallback = Vec::with_capacity(speakers * psd.bins);
    for j in 1..=speakers {
        for f in 0..psd.bins {
            let (g, info) = mvdr_bin(psd, j, f, &u[(j - 1) * c..j * c])?;
            data.extend(g);
            fallback.push(info.fallback);
        }
    }
    let mut out = BeamformerFilters::new(speakers, psd.bins, c, data)?;
    out.fallback = fallback;
    Ok(out)
}

/// One-hot reference weighting.
pub fn fixed_reference<R: Real>(channel: usize, channels: usize) -> Result<Vec<R>> {
    if channel >= channels {
        return Err(Error::Index { index: channel, len: channels });
    }
    Ok((0..channels).map(|c| if c == channel { R::one() } else { R::zero() }).collect())
}

/// `ŝʲ_{t,f} = gʲ(f)^H x_{t,f}` as a single-channel spectrogram.
pub fn beamform<R: Real>(x: &ComplexSpectrogram<R>, filters: &BeamformerFilters<R>, j: usize) -> Result<ComplexSpectrogram<R>> {
    if filters.bins != x.bins() || filters.channels != x.channels() {
        return Err(Error::Shape(format!("filters for F={} C={} applied to F={} C={}", filters.bins, filters.channels, x.bins(), x.channels())));
    }
    if j == 0 || j > filters.speakers {
        return Err(Error::Index { index: j, len: filters.speakers + 1 });
    }
    let mut out = ComplexSpectrogram::zeros(x.frames(), x.bins(), 1, x.params, x.sample_rate);
    for t in 0..x.frames() {
        for f in 0..x.bins() {
            let s: Complex<R> = filters.filter(j, f).iter().zip(x.vector(t, f)).map(|(g, v)| g.conj() * v).sum();
            out.set(t, f, 0, s);
        }
    }
    Ok(out)
}
