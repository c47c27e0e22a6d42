use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{causal_mask, scaled_dot_attention, AttentionConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Inverted dropout driven by its own seeded stream; `p = 0` is a no-op.
#[derive(Clone, Debug)]
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn off() -> Self {
        Self::new(0.0, 0)
    }

    pub fn new(p: f64, seed: u64) -> Self {
        Self { p, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn apply<R: Real>(&mut self, g: &mut Graph<R>, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = R::lit(1.0 / (1.0 - self.p));
        let n = g.value(x).len();
        let mask: Vec<R> = (0..n).map(|_| if self.rng.random_bool(self.p) { R::zero() } else { keep }).collect();
        let m = g.constant(&g.shape(x).to_vec(), mask);
        g.mul(x, m)
    }
}

/// Affine map `x·W + b` with `W: d_in×d_out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, group: ParamGroup, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_glorot(format!("{name}.w"), group, &[d_in, d_out], d_in, d_out, rng);
        let b = store.add_const(format!("{name}.b"), group, &[d_out], 0.0);
        Self { w, b }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, group: ParamGroup, d: usize) -> Self {
        Self { gain: store.add_const(format!("{name}.gain"), group, &[d], 1.0), bias: store.add_const(format!("{name}.bias"), group, &[d], 0.0) }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, R::lit(LAYER_NORM_EPS))
    }
}

/// Fused `d×d` query/key/value projections; head `h` owns columns
/// `h·d_k .. (h+1)·d_k`.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, group: ParamGroup, cfg: &AttentionConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_att;
        Self {
            wq: Linear::new(store, &format!("{name}.q"), group, d, d, rng),
            wk: Linear::new(store, &format!("{name}.k"), group, d, d, rng),
            wv: Linear::new(store, &format!("{name}.v"), group, d, d, rng),
            wo: Linear::new(store, &format!("{name}.o"), group, d, d, rng),
            heads: cfg.heads,
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, query: Var, memory: Var, mask: Option<&[bool]>) -> Result<Var> {
        let q = self.wq.forward(g, store, query)?;
        let k = self.wk.forward(g, store, memory)?;
        let v = self.wv.forward(g, store, memory)?;
        let d = g.shape(q)[1];
        if d % self.heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {} heads", self.heads)));
        }
        let dk = d / self.heads;
        let heads = (0..self.heads)
            .map(|h| {
                let qh = g.slice(q, 1, h * dk, dk)?;
                let kh = g.slice(k, 1, h * dk, dk)?;
                let vh = g.slice(v, 1, h * dk, dk)?;
                scaled_dot_attention(g, qh, kh, vh, mask)
            })
            .collect::<Result<Vec<_>>>()?;
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        self.wo.forward(g, store, cat)
    }
}

/// Two-layer ReLU network `d → d_ff → d`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, group: ParamGroup, cfg: &AttentionConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.1"), group, cfg.d_att, cfg.d_ff, rng),
            l2: Linear::new(store, &format!("{name}.2"), group, cfg.d_ff, cfg.d_att, rng),
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.relu(h);
        self.l2.forward(g, store, h)
    }
}

/// Pre-norm self-attention block followed by a pre-norm feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub ln_att: LayerNormParams,
    pub att: MultiHeadAttention,
    pub ln_ff: LayerNormParams,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, group: ParamGroup, cfg: &AttentionConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln_att: LayerNormParams::new(store, &format!("{name}.ln_att"), group, cfg.d_att),
            att: MultiHeadAttention::new(store, &format!("{name}.att"), group, cfg, rng),
            ln_ff: LayerNormParams::new(store, &format!("{name}.ln_ff"), group, cfg.d_att),
            ff: FeedForward::new(store, &format!("{name}.ff"), group, cfg, rng),
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var, mask: Option<&[bool]>, drop: &mut Dropout) -> Result<Var> {
        let h = self.ln_att.forward(g, store, x)?;
        let a = self.att.forward(g, store, h, h, mask)?;
        let a = drop.apply(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        let f = drop.apply(g, f)?;
        g.add(x, f)
    }
}

/// Causal self-attention, cross-attention over encoder memory, then
/// feed-forward, each pre-norm with a residual connection.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub ln_self: LayerNormParams,
    pub self_att: MultiHeadAttention,
    pub ln_cross: LayerNormParams,
    pub cross_att: MultiHeadAttention,
    pub ln_ff: LayerNormParams,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, group: ParamGroup, cfg: &AttentionConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln_self: LayerNormParams::new(store, &format!("{name}.ln_self"), group, cfg.d_att),
            self_att: MultiHeadAttention::new(store, &format!("{name}.self"), group, cfg, rng),
            ln_cross: LayerNormParams::new(store, &format!("{name}.ln_cross"), group, cfg.d_att),
            cross_att: MultiHeadAttention::new(store, &format!("{name}.cross"), group, cfg, rng),
            ln_ff: LayerNormParams::new(store, &format!("{name}.ln_ff"), group, cfg.d_att),
            ff: FeedForward::new(store, &format!("{name}.ff"), group, cfg, rng),
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, y: Var, memory: Var, drop: &mut Dropout) -> Result<Var> {
        let n = g.shape(y)[0];
        let mask = causal_mask(n);
        let h = self.ln_self.forward(g, store, y)?;
        let a = self.self_att.forward(g, store, h, h, Some(&mask))?;
        let a = drop.apply(g, a)?;
        let y = g.add(y, a)?;
        let h = self.ln_cross.forward(g, store, y)?;
        let c = self.cross_att.forward(g, store, h, memory, None)?;
        let c = drop.apply(g, c)?;
        let y = g.add(y, c)?;
        let h = self.ln_ff.forward(g, store, y)?;
        let f = self.ff.forward(g, store, h)?;
        let f = drop.apply(g, f)?;
        g.add(y, f)
    }
}

/// Overwrites a parameter with zeros.
pub fn zero_param<R: Real>(store: &mut ParamStore<R>, id: ParamId) {
    let shape = store.tensor(id).shape().to_vec();
    *store.tensor_mut(id) = Tensor::zeros(&shape).with_requires_grad(true);
}
