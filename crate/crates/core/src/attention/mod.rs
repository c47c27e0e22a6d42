//! Transformer blocks: scaled dot-product and multi-head attention, the
//! banded (time-restricted) variant, positional encodings, and pre-norm
//! encoder/decoder layers.

pub mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::scalar::Real;

pub use layers::{DecoderLayer, Dropout, EncoderLayer, FeedForward, LayerNormParams, Linear, MultiHeadAttention};

/// Left/right context of time-restricted attention, in frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub left: usize,
    pub right: usize,
}

impl Window {
    pub const fn new(left: usize, right: usize) -> Self {
        Self { left, right }
    }
}

impl Default for Window {
    fn default() -> Self {
        Self::new(14, 15)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub d_att: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// `None` means unrestricted attention.
    #[serde(default)]
    pub window: Option<Window>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { d_att: 256, heads: 4, d_ff: 2048, window: None }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_att == 0 || self.heads == 0 || self.d_att % self.heads != 0 {
            return Err(Error::Config(format!("d_att {} must be a positive multiple of the head count {}", self.d_att, self.heads)));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_att / self.heads
    }

    pub fn with_window(self, window: Option<Window>) -> Self {
        Self { window, ..self }
    }
}

/// Row-major `T×T` pattern permitting `(t, s)` iff `t−l ≤ s ≤ t+r`.
pub fn band_mask(t: usize, left: usize, right: usize) -> Vec<bool> {
    let mut m = vec![false; t * t];
    for q in 0..t {
        let lo = q.saturating_sub(left);
        let hi = (q + right).min(t - 1);
        m[q * t + lo..=q * t + hi].iter_mut().for_each(|v| *v = true);
    }
    m
}

/// Lower-triangular (self and past) pattern for `n` positions.
pub fn causal_mask(n: usize) -> Vec<bool> {
    band_mask(n, n, 0)
}

/// Mask for `window`, or `None` when attention is unrestricted.
pub fn window_mask(t: usize, window: Option<Window>) -> Option<Vec<bool>> {
    window.map(|w| band_mask(t, w.left, w.right))
}

/// Interleaved sinusoidal encodings: `(t, 2i) = sin(t/10000^(2i/d))`,
/// `(t, 2i+1) = cos(…)`.
pub fn sinusoidal_positions<R: Real>(t: usize, d: usize) -> Result<Tensor<R>> {
    if d % 2 != 0 {
        return Err(Error::Shape(format!("positional encoding width {d} must be even")));
    }
    let mut data = vec![R::zero(); t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = R::lit(angle.sin());
            data[pos * d + 2 * i + 1] = R::lit(angle.cos());
        }
    }
    Tensor::new(vec![t, d], data)
}

/// `softmax(QKᵀ/√d)·V`, with disallowed `(query, key)` pairs excluded.
pub fn scaled_dot_attention<R: Real>(g: &mut Graph<R>, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<Var> {
    let (tq, d) = matrix(g, q)?;
    let (tk, dk) = matrix(g, k)?;
    let (tv, _) = matrix(g, v)?;
    if d != dk || tk != tv {
        return Err(Error::Shape(format!("attention with Q {:?}, K {:?}, V {:?}", g.shape(q), g.shape(k), g.shape(v))));
    }
    if let Some(m) = mask {
        if m.len() != tq * tk {
            return Err(Error::Shape(format!("attention mask of {} entries for {tq}×{tk} scores", m.len())));
        }
        if let Some(row) = m.chunks(tk).position(|r| !r.iter().any(|&b| b)) {
            return Err(Error::Contract(format!("attention mask row {row} permits no keys")));
        }
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, R::one() / R::from_usize_lossy(d).sqrt());
    let weights = g.softmax_masked(scores, 1, mask)?;
    g.matmul(weights, v)
}

fn matrix<R: Real>(g: &Graph<R>, v: Var) -> Result<(usize, usize)> {
    match g.shape(v) {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Adds sinusoidal positions to a `T×d` activation.
pub fn add_positions<R: Real>(g: &mut Graph<R>, x: Var) -> Result<Var> {
    let (t, d) = matrix(g, x)?;
    let pe = sinusoidal_positions::<R>(t, d)?;
    let pe = g.constant(&[t, d], pe.into_data());
    g.add(x, pe)
}

/// Runs a stack of encoder layers with a shared mask.
pub fn encode<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    layers: &[EncoderLayer],
    x: Var,
    window: Option<Window>,
    drop: &mut Dropout,
) -> Result<Var> {
    let (t, _) = matrix(g, x)?;
    let mask = window_mask(t, window);
    layers.iter().try_fold(x, |h, layer| layer.forward(g, store, h, mask.as_deref(), drop))
}
