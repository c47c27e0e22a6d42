//! Joint CTC/attention Transformer recognizer: CNN embedding, speaker-
//! differentiating and recognition encoders, decoder, PIT-CTC assignment,
//! joint loss and beam-search decoding.

pub mod ctc;
pub mod metrics;
pub mod pit;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{add_positions, encode, AttentionConfig, DecoderLayer, Dropout, EncoderLayer, LayerNormParams, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::scalar::Real;

pub use ctc::{ctc_loss, ctc_nll};
pub use metrics::{best_permutation_errors, edit_distance, token_error_rate, PermutedErrors};
pub use pit::pit_assign;

/// Token inventory: index 0 is the CTC blank, the last index doubles as
/// start and end of sentence, everything in between is a content token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
}

impl Vocabulary {
    /// `<blank>`, `t0 … t{n-1}`, `<sos/eos>`.
    pub fn synthetic(content: usize) -> Self {
        let mut tokens = vec!["<blank>".to_string()];
        tokens.extend((0..content).map(|i| format!("t{i}")));
        tokens.push("<sos/eos>".to_string());
        Self { tokens }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() < 3 {
            return Err(Error::Config("vocabulary needs blank, sos/eos and at least one token".into()));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn blank(&self) -> usize {
        0
    }

    pub fn sos(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn eos(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn content_count(&self) -> usize {
        self.tokens.len() - 2
    }

    /// Vocabulary index of content token `i` (0-based).
    pub fn content(&self, i: usize) -> usize {
        i + 1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    /// Checks a reference: non-empty and content tokens only.
    pub fn check_reference(&self, r: &[usize]) -> Result<()> {
        if let Some(&bad) = r.iter().find(|&&t| t == self.blank() || t >= self.sos()) {
            return Err(Error::Vocabulary(format!("{bad} is not a content token")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub attention: AttentionConfig,
    /// Feature maps of the two stride-2 convolution blocks.
    pub cnn_channels: [usize; 2],
    pub n_mels: usize,
    pub sd_layers: usize,
    pub rec_layers: usize,
    pub decoder_layers: usize,
    /// One speaker-differentiating stack shared by all branches.
    pub share_sd: bool,
    pub speakers: usize,
    /// Weight λ of the CTC term.
    pub ctc_weight: f64,
    pub label_smoothing: f64,
    pub vocab: Vocabulary,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            attention: AttentionConfig::default(),
            cnn_channels: [64, 128],
            n_mels: 80,
            sd_layers: 4,
            rec_layers: 8,
            decoder_layers: 6,
            share_sd: false,
            speakers: 2,
            ctc_weight: 0.2,
            label_smoothing: 0.1,
            vocab: Vocabulary::synthetic(10),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        self.vocab.validate()?;
        if self.rec_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("recognition encoder and decoder need at least one layer".into()));
        }
        if self.cnn_channels.contains(&0) || self.n_mels == 0 {
            return Err(Error::Config("CNN channels and mel count must be positive".into()));
        }
        if self.speakers == 0 || self.speakers > pit::MAX_PIT_SPEAKERS {
            return Err(Error::Config(format!("speakers must be in 1..={}", pit::MAX_PIT_SPEAKERS)));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config(format!("CTC weight {} outside [0, 1]", self.ctc_weight)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }

    /// Encoder length after two stride-2 blocks.
    pub fn subsampled_len(frames: usize) -> usize {
        frames.div_ceil(2).div_ceil(2)
    }
}

/// Decoder output for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, ending with eos when the hypothesis completed.
    pub tokens: Vec<usize>,
    /// Sum of per-step log-probabilities.
    pub log_prob: f64,
    /// `log_prob` divided by the number of emitted tokens.
    pub score: f64,
    pub complete: bool,
}

impl Hypothesis {
    /// Tokens without the trailing eos.
    pub fn content(&self, eos: usize) -> Vec<usize> {
        let mut t = self.tokens.clone();
        if t.last() == Some(&eos) {
            t.pop();
        }
        t
    }
}

/// Per-utterance loss values under the selected permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub permutation: Vec<usize>,
    /// CTC loss of stream `j` against reference `permutation[j]`.
    pub ctc: Vec<f64>,
    pub att: Vec<f64>,
    pub joint: f64,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    kernels: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backend {
    pub cfg: BackendConfig,
    conv: [Conv; 2],
    embed: Linear,
    sd: Vec<Vec<EncoderLayer>>,
    rec: Vec<EncoderLayer>,
    enc_norm: LayerNormParams,
    ctc_out: Linear,
    token_embed: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNormParams,
    att_out: Linear,
}

impl Backend {
    pub fn new<R: Real>(store: &mut ParamStore<R>, cfg: BackendConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let group = ParamGroup::Backend;
        let att = AttentionConfig { window: None, ..cfg.attention };
        let d = att.d_att;
        let v = cfg.vocab.size();
        let mut cin = 1;
        let conv = cfg.cnn_channels.map(|cout| {
            let i = usize::from(cin != 1);
            let c = Conv {
                kernels: store.add_glorot(format!("backend.cnn{i}.k"), group, &[cout, cin, 3, 3], cin * 9, cout * 9, rng),
                bias: store.add_const(format!("backend.cnn{i}.b"), group, &[cout], 0.0),
            };
            cin = cout;
            c
        });
        let flat = cfg.cnn_channels[1] * BackendConfig::subsampled_len(cfg.n_mels);
        let embed = Linear::new(store, "backend.embed", group, flat, d, rng);
        let branches = if cfg.share_sd { 1 } else { cfg.speakers };
        let sd = (0..branches)
            .map(|j| (0..cfg.sd_layers).map(|i| EncoderLayer::new(store, &format!("backend.sd{j}.layer{i}"), group, &att, rng)).collect())
            .collect();
        let rec = (0..cfg.rec_layers).map(|i| EncoderLayer::new(store, &format!("backend.rec.layer{i}"), group, &att, rng)).collect();
        let enc_norm = LayerNormParams::new(store, "backend.enc_norm", group, d);
        let ctc_out = Linear::new(store, "backend.ctc", group, d, v, rng);
        let token_embed = store.add_glorot("backend.dec.embed", group, &[v, d], v, d, rng);
        let decoder = (0..cfg.decoder_layers).map(|i| DecoderLayer::new(store, &format!("backend.dec.layer{i}"), group, &att, rng)).collect();
        let dec_norm = LayerNormParams::new(store, "backend.dec_norm", group, d);
        let att_out = Linear::new(store, "backend.dec.out", group, d, v, rng);
        Ok(Self { cfg, conv, embed, sd, rec, enc_norm, ctc_out, token_embed, decoder, dec_norm, att_out })
    }

    /// `T×n_mels` features → `L×d_att`, `L = ⌈⌈T/2⌉/2⌉`, positions added.
    pub fn cnn_embed<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, o: Var) -> Result<Var> {
        let shape = g.shape(o).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.n_mels {
            return Err(Error::Shape(format!("features {shape:?}, expected T×{}", self.cfg.n_mels)));
        }
        if shape[0] < 4 {
            return Err(Error::TooShort { needed: 4, got: shape[0] });
        }
        let mut h = g.reshape(o, &[1, shape[0], shape[1]])?;
        for c in &self.conv {
            let k = g.param(store, c.kernels);
            let b = g.param(store, c.bias);
            h = g.conv2d(h, k, Some(b), 2)?;
            h = g.relu(h);
        }
        let s = g.shape(h).to_vec();
        let h = g.permute(h, &[1, 0, 2])?;
        let h = g.reshape(h, &[s[1], s[0] * s[2]])?;
        let h = self.embed.forward(g, store, h)?;
        add_positions(g, h)
    }

    /// `Encoder_Rec` (shared) and the final layer norm.
    fn recognize<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, h: Var, drop: &mut Dropout) -> Result<Var> {
        let h = encode(g, store, &self.rec, h, None, drop)?;
        self.enc_norm.forward(g, store, h)
    }

    /// One encoded stream per speaker from a single mixture.
    pub fn encode_single_channel<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, o: Var, drop: &mut Dropout) -> Result<Vec<Var>> {
        if self.cfg.speakers < 2 {
            return Err(Error::Config("single-channel separation needs at least two speakers".into()));
        }
        let h = self.cnn_embed(g, store, o)?;
        (0..self.cfg.speakers)
            .map(|j| {
                let branch = &self.sd[if self.cfg.share_sd { 0 } else { j }];
                let hj = encode(g, store, branch, h, None, drop)?;
                self.recognize(g, store, hj, drop)
            })
            .collect()
    }

    /// Single-path encoder for one already separated feature stream.
    pub fn encode_stream<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, o: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.cnn_embed(g, store, o)?;
        self.recognize(g, store, h, drop)
    }

    /// CTC log-posteriors `L×V`.
    pub fn ctc_log_probs<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, enc: Var) -> Result<Var> {
        let z = self.ctc_out.forward(g, store, enc)?;
        g.log_softmax(z)
    }

    /// Decoder log-probabilities `len(prefix)×V`; row `i` predicts the token
    /// following `prefix[..=i]`.
    pub fn decoder_log_probs<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        memory: Var,
        prefix: &[usize],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let d = self.cfg.attention.d_att;
        let v = self.cfg.vocab.size();
        if prefix.is_empty() {
            return Err(Error::Contract("decoder prefix is empty".into()));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= v) {
            return Err(Error::Index { index: bad, len: v });
        }
        let table = g.param(store, self.token_embed);
        let index: Vec<usize> = prefix.iter().flat_map(|&t| (0..d).map(move |k| t * d + k)).collect();
        let y = g.gather(table, index.into(), &[prefix.len(), d])?;
        let y = g.scale(y, R::lit((d as f64).sqrt()));
        let mut y = add_positions(g, y)?;
        for layer in &self.decoder {
            y = layer.forward(g, store, y, memory, drop)?;
        }
        let y = self.dec_norm.forward(g, store, y)?;
        let y = self.att_out.forward(g, store, y)?;
        g.log_softmax(y)
    }

    /// Teacher-forced label-smoothed cross-entropy, averaged over the
    /// `|r|+1` prediction steps.
    pub fn attention_ce_loss<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, memory: Var, r: &[usize], drop: &mut Dropout) -> Result<Var> {
        if r.is_empty() {
            return Err(Error::Contract("attention loss needs a non-empty reference".into()));
        }
        self.cfg.vocab.check_reference(r)?;
        let vocab = &self.cfg.vocab;
        let v = vocab.size();
        let mut input = vec![vocab.sos()];
        input.extend_from_slice(r);
        let mut target = r.to_vec();
        target.push(vocab.eos());
        let logp = self.decoder_log_probs(g, store, memory, &input, drop)?;
        let eps = self.cfg.label_smoothing;
        let off = eps / v as f64;
        let q: Vec<R> = target.iter().flat_map(|&y| (0..v).map(move |k| R::lit(if k == y { 1.0 - eps + off } else { off }))).collect();
        let q = g.constant(&[target.len(), v], q);
        let p = g.mul(logp, q)?;
        let s = g.sum(p);
        Ok(g.scale(s, R::lit(-1.0 / target.len() as f64)))
    }

    /// PIT on CTC losses, then `Σ_j λ·CTC + (1−λ)·CE` under the selected
    /// permutation. Infinite CTC terms (stream too short for its
    /// reference) are reported but contribute nothing to the loss node.
    pub fn pit_joint_loss<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        streams: &[Var],
        refs: &[Vec<usize>],
        drop: &mut Dropout,
    ) -> Result<(Var, LossTerms)> {
        let j_n = streams.len();
        if refs.len() != j_n {
            return Err(Error::Shape(format!("{j_n} streams for {} references", refs.len())));
        }
        for r in refs {
            self.cfg.vocab.check_reference(r)?;
        }
        let lambda = self.cfg.ctc_weight;
        let blank = self.cfg.vocab.blank();
        let z = streams.iter().map(|&s| self.ctc_log_probs(g, store, s)).collect::<Result<Vec<_>>>()?;
        let mut matrix = vec![vec![0.0; j_n]; j_n];
        for (j, &zj) in z.iter().enumerate() {
            let values: Vec<f64> = g.value(zj).iter().map(|v| v.to_f64_lossy()).collect();
            let (frames, v) = (g.shape(zj)[0], g.shape(zj)[1]);
            for (k, r) in refs.iter().enumerate() {
                matrix[j][k] = ctc::ctc_nll(&values, frames, v, r, blank)?;
            }
        }
        let permutation = pit_assign(&matrix)?;
        let mut total: Option<Var> = None;
        let mut terms = LossTerms { permutation: permutation.clone(), ctc: Vec::with_capacity(j_n), att: Vec::with_capacity(j_n), joint: 0.0 };
        for (j, &k) in permutation.iter().enumerate() {
            let mut parts = Vec::new();
            if lambda > 0.0 {
                let c = ctc_loss(g, z[j], &refs[k], blank)?;
                let cv = g.item(c).to_f64_lossy();
                terms.ctc.push(cv);
                if cv.is_finite() {
                    parts.push(g.scale(c, R::lit(lambda)));
                    terms.joint += lambda * cv;
                } else {
                    log::warn!("stream {j} is too short for its reference; CTC term skipped");
                }
            } else {
                terms.ctc.push(matrix[j][k]);
            }
            if lambda < 1.0 {
                let a = self.attention_ce_loss(g, store, streams[j], &refs[k], drop)?;
                let av = g.item(a).to_f64_lossy();
                terms.att.push(av);
                terms.joint += (1.0 - lambda) * av;
                parts.push(g.scale(a, R::lit(1.0 - lambda)));
            } else {
                terms.att.push(0.0);
            }
            for p in parts {
                total = Some(match total {
                    None => p,
                    Some(t) => g.add(t, p)?,
                });
            }
        }
        let total = match total {
            Some(t) => t,
            None => g.scalar_const(R::zero()),
        };
        Ok((total, terms))
    }

    /// Beam search over decoder steps with length-normalized scores;
    /// `beam = 1` is greedy decoding.
    pub fn decode<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, memory: Var, beam: usize, max_len: usize) -> Result<Hypothesis> {
        if max_len == 0 || beam == 0 {
            return Err(Error::Config("beam and max_len must be at least 1".into()));
        }
        let vocab = &self.cfg.vocab;
        let (sos, eos) = (vocab.sos(), vocab.eos());
        let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![sos], 0.0)];
        let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
        let mut drop = Dropout::off();
        for _ in 0..max_len {
            let mut candidates: Vec<(Vec<usize>, f64)> = Vec::new();
            for (prefix, score) in &live {
                let logp = self.decoder_log_probs(g, store, memory, prefix, &mut drop)?;
                let v = g.shape(logp)[1];
                let last: Vec<f64> = g.value(logp)[(prefix.len() - 1) * v..].iter().map(|x| x.to_f64_lossy()).collect();
                let mut order: Vec<usize> = (0..v).collect();
                order.sort_by(|&a, &b| last[b].total_cmp(&last[a]).then(a.cmp(&b)));
                for &k in order.iter().take(beam) {
                    let mut p = prefix.clone();
                    p.push(k);
                    candidates.push((p, score + last[k]));
                }
            }
            candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
            live.clear();
            for c in candidates.into_iter().take(beam) {
                if c.0.last() == Some(&eos) {
                    done.push(c);
                } else {
                    live.push(c);
                }
            }
            if live.is_empty() || done.len() >= beam {
                break;
            }
        }
        let finish = |(tokens, log_prob): (Vec<usize>, f64), complete: bool| {
            let tokens = tokens[1..].to_vec();
            Hypothesis { score: log_prob / tokens.len().max(1) as f64, tokens, log_prob, complete }
        };
        let pool: Vec<Hypothesis> =
            if done.is_empty() { live.into_iter().map(|h| finish(h, false)).collect() } else { done.into_iter().map(|h| finish(h, true)).collect() };
        pool.into_iter()
            .reduce(|best, h| if h.score > best.score { h } else { best })
            .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
    }

    pub fn conv_params(&self) -> [(ParamId, ParamId); 2] {
        self.conv.map(|c| (c.kernels, c.bias))
    }

    pub fn attention_output(&self) -> Linear {
        self.att_out
    }

    pub fn sd_branches(&self) -> &[Vec<EncoderLayer>] {
        &self.sd
    }
}

/// `Σ_j λ·ctc_j + (1−λ)·att_j` on plain values.
pub fn joint_loss(ctc: &[f64], att: &[f64], lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("CTC weight {lambda} outside [0, 1]")));
    }
    if ctc.len() != att.len() {
        return Err(Error::Shape(format!("{} CTC terms for {} attention terms", ctc.len(), att.len())));
    }
    Ok(ctc.iter().zip(att).map(|(c, a)| lambda * c + (1.0 - lambda) * a).sum())
}
