//! Mask-based multi-source MVDR beamforming frontend: a monaural masking
//! network with time-restricted self-attention, mask-weighted PSD
//! estimation, reference-microphone selection, MVDR filtering,
//! beamforming and log-mel feature extraction, all differentiable.

pub mod beamformer;
pub mod ops;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{encode, AttentionConfig, Dropout, EncoderLayer, Linear, Window};
use crate::dsp::mel::LOG_FLOOR;
use crate::dsp::{ComplexSpectrogram, GlobalStats, MelFilterbank};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamGroup, ParamStore, Var};
use crate::scalar::Real;

pub use beamformer::{beamform, estimate_psd, fixed_reference, mvdr_filter, mvdr_filters, BeamformerFilters, MaskSet, PsdSet};

/// Floor inside the masking network's log-magnitude input.
pub const MAGNITUDE_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ReferenceMode {
    Fixed { channel: usize },
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub d_att: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub window: Option<Window>,
    pub reference: ReferenceMode,
    pub scorer_hidden: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self { d_att: 256, heads: 4, d_ff: 768, layers: 3, window: Some(Window::default()), reference: ReferenceMode::Attention, scorer_hidden: 16 }
    }
}

impl FrontendConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { d_att: self.d_att, heads: self.heads, d_ff: self.d_ff, window: self.window }
    }
}

/// Parameters of the frontend plus the fixed feature pipeline.
#[derive(Clone, Debug)]
pub struct Frontend<R> {
    pub cfg: FrontendConfig,
    pub speakers: usize,
    pub bins: usize,
    input: Linear,
    layers: Vec<EncoderLayer>,
    output: Linear,
    scorer: Option<(Linear, Linear)>,
    pub mel: MelFilterbank<R>,
    pub stats: GlobalStats,
}

/// Every intermediate of one frontend pass.
#[derive(Clone, Debug)]
pub struct FrontendOutput {
    /// `[C, T, (J+1)·F]`, column `j·F + f`.
    pub masks: Var,
    /// `[J+1, F, C, C, 2]`.
    pub psd: Var,
    /// `[J, C]`.
    pub reference: Var,
    /// `[J, F, C, 2]`.
    pub filters: Var,
    /// `[J, T, F]`.
    pub magnitudes: Var,
    /// One `T × n_mels` matrix per speaker.
    pub features: Vec<Var>,
}

impl<R: Real> Frontend<R> {
    pub fn new(
        store: &mut ParamStore<R>,
        cfg: FrontendConfig,
        speakers: usize,
        bins: usize,
        mel: MelFilterbank<R>,
        stats: GlobalStats,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let att = cfg.attention();
        att.validate()?;
        if speakers == 0 {
            return Err(Error::Config("frontend needs at least one speaker".into()));
        }
        if mel.bins != bins || stats.dim() != mel.n_mels {
            return Err(Error::Config("mel filterbank or statistics do not match the spectrogram".into()));
        }
        let group = ParamGroup::Frontend;
        let input = Linear::new(store, "frontend.mask.in", group, bins, cfg.d_att, rng);
        let layers = (0..cfg.layers).map(|i| EncoderLayer::new(store, &format!("frontend.mask.layer{i}"), group, &att, rng)).collect();
        let output = Linear::new(store, "frontend.mask.out", group, cfg.d_att, bins * (speakers + 1), rng);
        let scorer = matches!(cfg.reference, ReferenceMode::Attention).then(|| {
            (
                Linear::new(store, "frontend.ref.1", group, 1, cfg.scorer_hidden, rng),
                Linear::new(store, "frontend.ref.2", group, cfg.scorer_hidden, 1, rng),
            )
        });
        Ok(Self { cfg, speakers, bins, input, layers, output, scorer, mel, stats })
    }

    fn check(&self, x: &ComplexSpectrogram<R>) -> Result<()> {
        if x.bins() != self.bins {
            return Err(Error::Shape(format!("frontend built for {} bins, got {}", self.bins, x.bins())));
        }
        Ok(())
    }

    /// Masks for every channel, each channel processed independently.
    pub fn mask_net(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: &ComplexSpectrogram<R>, drop: &mut Dropout) -> Result<Var> {
        self.check(x)?;
        let (t_n, f_n, s_n) = (x.frames(), x.bins(), self.speakers + 1);
        let floor = R::lit(MAGNITUDE_FLOOR);
        let per_channel = (0..x.channels())
            .map(|c| {
                let logmag: Vec<R> = x.magnitude(c).into_iter().map(|m| (m + floor).ln()).collect();
                let h = g.constant(&[t_n, f_n], logmag);
                let h = self.input.forward(g, store, h)?;
                let h = encode(g, store, &self.layers, h, self.cfg.window, drop)?;
                let h = self.output.forward(g, store, h)?;
                let m = g.sigmoid(h);
                g.reshape(m, &[1, t_n, s_n * f_n])
            })
            .collect::<Result<Vec<_>>>()?;
        if per_channel.len() == 1 {
            Ok(per_channel[0])
        } else {
            g.concat(&per_channel, 0)
        }
    }

    /// Reference weights `[J, C]`: one-hot rows in fixed mode; otherwise a
    /// softmax over channels of a shared scorer applied to each channel's
    /// frequency-averaged speaker PSD power (log, centred across channels).
    pub fn select_reference(&self, g: &mut Graph<R>, store: &ParamStore<R>, psd: Var) -> Result<Var> {
        let shape = g.shape(psd).to_vec();
        let (s_n, f_n, c_n) = (shape[0], shape[1], shape[2]);
        let j_n = s_n - 1;
        let Some((l1, l2)) = &self.scorer else {
            let ReferenceMode::Fixed { channel } = self.cfg.reference else { unreachable!("scorer exists in attention mode") };
            let row = fixed_reference::<R>(channel, c_n)?;
            return Ok(g.constant(&[j_n, c_n], row.repeat(j_n)));
        };
        let index: Vec<usize> =
            (1..s_n).flat_map(|j| (0..f_n).flat_map(move |f| (0..c_n).map(move |c| (((j * f_n + f) * c_n + c) * c_n + c) * 2))).collect();
        let diag = g.gather(psd, index.into(), &[j_n, f_n, c_n])?;
        let power = g.sum_axis(diag, 1)?;
        let power = g.scale(power, R::one() / R::from_usize_lossy(f_n));
        let power = g.add_scalar(power, R::lit(LOG_FLOOR));
        let logp = g.log(power);
        let inv = R::one() / R::from_usize_lossy(c_n);
        let centre: Vec<R> = (0..c_n * c_n).map(|i| if i / c_n == i % c_n { R::one() - inv } else { -inv }).collect();
        let centre = g.constant(&[c_n, c_n], centre);
        let z = g.matmul(logp, centre)?;
        let z = g.reshape(z, &[j_n * c_n, 1])?;
        let h = l1.forward(g, store, z)?;
        let h = g.tanh(h);
        let s = l2.forward(g, store, h)?;
        let s = g.reshape(s, &[j_n, c_n])?;
        g.softmax(s, 1)
    }

    /// Beamforming and features from a given mask node.
    pub fn from_masks(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: &Arc<ComplexSpectrogram<R>>, masks: Var) -> Result<FrontendOutput> {
        self.check(x)?;
        let psd = ops::psd(g, x, masks, self.speakers + 1)?;
        let reference = self.select_reference(g, store, psd)?;
        let filters = ops::mvdr(g, psd, reference)?;
        let magnitudes = ops::beamform_magnitude(g, x, filters)?;
        let (t_n, f_n) = (x.frames(), x.bins());
        let features = (0..self.speakers)
            .map(|j| {
                let m = g.slice(magnitudes, 0, j, 1)?;
                let m = g.reshape(m, &[t_n, f_n])?;
                log_mel_graph(g, m, &self.mel, &self.stats)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FrontendOutput { masks, psd, reference, filters, magnitudes, features })
    }

    /// mask_net → PSD → reference → MVDR → beamform → log-mel + GMVN.
    pub fn forward(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: &Arc<ComplexSpectrogram<R>>, drop: &mut Dropout) -> Result<FrontendOutput> {
        let masks = self.mask_net(g, store, x, drop)?;
        self.from_masks(g, store, x, masks)
    }
}

/// Mask node values as a [`MaskSet`].
pub fn mask_set<R: Real>(g: &Graph<R>, masks: Var, speakers: usize) -> Result<MaskSet<R>> {
    let s = g.shape(masks);
    let sources = speakers + 1;
    if s.len() != 3 || s[2] % sources != 0 {
        return Err(Error::Shape(format!("mask node of shape {s:?}")));
    }
    MaskSet::new(s[1], s[2] / sources, s[0], sources, g.value(masks).to_vec())
}

/// `(log(|S|·W + floor) − μ)/σ` on a `T×F` magnitude node.
pub fn log_mel_graph<R: Real>(g: &mut Graph<R>, magnitude: Var, mel: &MelFilterbank<R>, stats: &GlobalStats) -> Result<Var> {
    stats.validate()?;
    let w = g.constant(&[mel.bins, mel.n_mels], mel.weights().to_vec());
    let e = g.matmul(magnitude, w)?;
    let e = g.add_scalar(e, R::lit(LOG_FLOOR));
    let l = g.log(e);
    let neg_mean = g.constant(&[mel.n_mels], stats.mean.iter().map(|&m| R::lit(-m)).collect());
    let inv_std = g.constant(&[mel.n_mels], stats.std.iter().map(|&s| R::lit(1.0 / s)).collect());
    let l = g.add_row(l, neg_mean)?;
    g.mul_row(l, inv_std)
}
