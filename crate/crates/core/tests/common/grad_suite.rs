//! Central finite-difference checks of every differentiable operation and of
//! the composed frontend + backend loss. Each group records the worst
//! relative error per check; inputs are drawn from `seed`.

use std::sync::Arc;

use msar::attention::{AttentionConfig, Dropout, Window};
use msar::backend::{Backend, BackendConfig, Vocabulary};
use msar::dsp::{ComplexSpectrogram, GlobalStats, MelFilterbank, StftParams};
use msar::frontend::{ops, Frontend, FrontendConfig, ReferenceMode};
use msar::numerics::{gradient_check, Graph, ParamId, ParamStore, Tensor, Var};
use msar::Result;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
/// Whole-model losses are of order 50: small steps drown in rounding while
/// large ones may straddle a ReLU kink. Each entry is scored at its best step.
const PARAM_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
/// Losses of order 10 lose about 1e-10 absolute to rounding in the central
/// difference; measure errors against at least this magnitude.
const LOSS_FLOOR: f64 = 1e-4;

#[derive(Debug, Default)]
pub struct Report {
    pub checks: Vec<(String, f64)>,
}

impl Report {
    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.1).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&(String, f64)> {
        self.checks.iter().filter(|c| !(c.1 < TOL)).collect()
    }

    pub fn assert_ok(&self) {
        let f = self.failures();
        assert!(f.is_empty(), "gradient checks above {TOL:e}: {f:?}");
    }

    pub fn merge(&mut self, other: Report) {
        self.checks.extend(other.checks);
    }
}

struct Suite {
    seed: u64,
    report: Report,
}

impl Suite {
    fn new(seed: u64) -> Self {
        Self { seed, report: Report::default() }
    }

    fn s(&self, k: u64) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(k)
    }

    fn rand(&self, shape: &[usize], lo: f64, hi: f64, k: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.s(k));
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn konst(&self, g: &mut Graph<f64>, shape: &[usize], k: u64) -> Var {
        let t = self.rand(shape, -1.0, 1.0, k);
        g.constant(shape, t.into_data())
    }

    /// Σ w ⊙ y with fixed random weights, so every output element matters.
    fn weighted(&self, g: &mut Graph<f64>, y: Var, k: u64) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        let w = self.rand(&shape, -1.0, 1.0, k);
        let wv = g.constant(&shape, w.into_data());
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    }

    fn check(&mut self, name: &str, x: &Tensor<f64>, f: impl Fn(&Self, &mut Graph<f64>, Var) -> Result<Var>) -> Result<()> {
        let err = gradient_check(x, STEP, FLOOR, |g, v| {
            let y = f(self, g, v)?;
            self.weighted(g, y, 99)
        })?;
        self.report.checks.push((name.to_string(), err));
        Ok(())
    }

    fn spectrogram(&self, t: usize, f: usize, c: usize, k: u64) -> Arc<ComplexSpectrogram<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.s(k));
        let mut s = ComplexSpectrogram::zeros(t, f, c, StftParams { win: 8, hop: 4, nfft: 2 * (f - 1) }, 16_000);
        s.data_mut().iter_mut().for_each(|z| *z = Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        Arc::new(s)
    }

    /// Checks analytic parameter gradients of `loss` at the first, middle
    /// and last entry of every parameter it reaches.
    fn check_params(
        &mut self,
        label: &str,
        store: &ParamStore<f64>,
        loss: impl Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
    ) -> Result<usize> {
        let mut g = Graph::new();
        let l = loss(store, &mut g)?;
        g.backward(l)?;
        let grads: Vec<(ParamId, Vec<f64>)> = g.param_grads().map(|(id, gr)| (id, gr.to_vec())).collect();
        for (id, grad) in &grads {
            let n = grad.len();
            let mut worst = 0.0f64;
            for i in [0, n / 2, n - 1] {
                let eval = |d: f64| -> Result<f64> {
                    let mut s = store.clone();
                    s.tensor_mut(*id).data_mut()[i] += d;
                    let mut g = Graph::new();
                    let l = loss(&s, &mut g)?;
                    Ok(g.item(l))
                };
                let mut best = f64::INFINITY;
                for h in PARAM_STEPS {
                    let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
                    best = best.min((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(LOSS_FLOOR));
                }
                worst = worst.max(best);
            }
            self.report.checks.push((format!("{label}: {}", store.get(*id).name), worst));
        }
        Ok(grads.len())
    }
}

pub fn elementwise(seed: u64) -> Result<Report> {
    let mut s = Suite::new(seed);
    let x = s.rand(&[3, 4], -1.0, 1.0, 1);
    let pos = s.rand(&[3, 4], 0.5, 2.0, 2);
    s.check("add", &x, |s, g, v| {
        let c = s.konst(g, &[3, 4], 3);
        g.add(v, c)
    })?;
    s.check("sub", &x, |s, g, v| {
        let c = s.konst(g, &[3, 4], 3);
        g.sub(c, v)
    })?;
    s.check("mul", &x, |_, g, v| g.mul(v, v))?;
    let pv = pos.data().to_vec();
    s.check("div numerator", &x, |_, g, v| {
        let c = g.constant(&[3, 4], pv.clone());
        g.div(v, c)
    })?;
    s.check("div denominator", &pos, |s, g, v| {
        let c = s.konst(g, &[3, 4], 4);
        g.div(c, v)
    })?;
    let row = s.rand(&[4], -1.0, 1.0, 5);
    s.check("add_row", &row, |s, g, v| {
        let c = s.konst(g, &[3, 4], 6);
        g.add_row(c, v)
    })?;
    s.check("mul_row", &row, |s, g, v| {
        let c = s.konst(g, &[3, 4], 6);
        g.mul_row(c, v)
    })?;
    s.check("mul_row input", &x, |s, g, v| {
        let c = s.konst(g, &[4], 7);
        g.mul_row(v, c)
    })?;
    s.check("scale", &x, |_, g, v| Ok(g.scale(v, -2.5)))?;
    s.check("add_scalar", &x, |_, g, v| Ok(g.add_scalar(v, 0.3)))?;
    s.check("sigmoid", &x, |_, g, v| Ok(g.sigmoid(v)))?;
    s.check("tanh", &x, |_, g, v| Ok(g.tanh(v)))?;
    s.check("exp", &x, |_, g, v| Ok(g.exp(v)))?;
    s.check("log", &pos, |_, g, v| Ok(g.log(v)))?;
    // keep inputs away from the kink
    let away = Tensor::from_fn(&[3, 4], |i| {
        let m = x.data()[i].abs().max(0.1);
        if i % 2 == 0 {
            m
        } else {
            -m
        }
    });
    s.check("relu", &away, |_, g, v| Ok(g.relu(v)))?;
    Ok(s.report)
}

pub fn matrix_and_normalization(seed: u64) -> Result<Report> {
    let mut s = Suite::new(seed);
    let a = s.rand(&[3, 4], -1.0, 1.0, 10);
    s.check("matmul left", &a, |s, g, v| {
        let b = s.konst(g, &[4, 2], 11);
        g.matmul(v, b)
    })?;
    s.check("matmul right", &s.rand(&[4, 2], -1.0, 1.0, 12), |s, g, v| {
        let b = s.konst(g, &[3, 4], 13);
        g.matmul(b, v)
    })?;
    s.check("softmax last", &a, |_, g, v| g.softmax(v, 1))?;
    s.check("softmax first", &a, |_, g, v| g.softmax(v, 0))?;
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
    s.check("softmax_masked", &a, |_, g, v| g.softmax_masked(v, 1, Some(&mask)))?;
    s.check("log_softmax", &a, |_, g, v| g.log_softmax(v))?;
    s.check("layer_norm x", &a, |s, g, v| {
        let gain = s.konst(g, &[4], 14);
        let bias = s.konst(g, &[4], 15);
        g.layer_norm(v, gain, bias, 1e-5)
    })?;
    s.check("layer_norm gain", &s.rand(&[4], -1.0, 1.0, 16), |s, g, v| {
        let x = s.konst(g, &[3, 4], 17);
        let bias = s.konst(g, &[4], 15);
        g.layer_norm(x, v, bias, 1e-5)
    })?;
    s.check("layer_norm bias", &s.rand(&[4], -1.0, 1.0, 16), |s, g, v| {
        let x = s.konst(g, &[3, 4], 17);
        let gain = s.konst(g, &[4], 14);
        g.layer_norm(x, gain, v, 1e-5)
    })?;
    for stride in [1, 2] {
        s.check(&format!("conv2d input s{stride}"), &s.rand(&[2, 5, 6], -1.0, 1.0, 18), |s, g, v| {
            let k = s.konst(g, &[3, 2, 3, 3], 19);
            let b = s.konst(g, &[3], 20);
            g.conv2d(v, k, Some(b), stride)
        })?;
        s.check(&format!("conv2d kernels s{stride}"), &s.rand(&[3, 2, 3, 3], -1.0, 1.0, 21), |s, g, v| {
            let x = s.konst(g, &[2, 5, 6], 22);
            g.conv2d(x, v, None, stride)
        })?;
        s.check(&format!("conv2d bias s{stride}"), &s.rand(&[3], -1.0, 1.0, 23), |s, g, v| {
            let x = s.konst(g, &[2, 5, 6], 22);
            let k = s.konst(g, &[3, 2, 3, 3], 19);
            g.conv2d(x, k, Some(v), stride)
        })?;
    }
    Ok(s.report)
}

pub fn shapes(seed: u64) -> Result<Report> {
    let mut s = Suite::new(seed);
    let x = s.rand(&[2, 3, 4], -1.0, 1.0, 30);
    s.check("sum", &x, |_, g, v| {
        let t = g.sum(v);
        g.mul(t, t)
    })?;
    s.check("mean", &x, |_, g, v| {
        let t = g.mean(v);
        g.mul(t, t)
    })?;
    for axis in 0..3 {
        s.check(&format!("sum_axis {axis}"), &x, |_, g, v| g.sum_axis(v, axis))?;
    }
    s.check("reshape", &x, |_, g, v| g.reshape(v, &[6, 4]))?;
    s.check("permute", &x, |_, g, v| g.permute(v, &[2, 0, 1]))?;
    s.check("transpose", &s.rand(&[3, 5], -1.0, 1.0, 31), |_, g, v| g.transpose(v))?;
    s.check("slice", &x, |_, g, v| g.slice(v, 1, 1, 2))?;
    s.check("concat", &x, |s, g, v| {
        let c = s.konst(g, &[2, 1, 4], 32);
        g.concat(&[c, v, v], 1)
    })?;
    let index: Arc<[usize]> = vec![0, 5, 5, 23, 7, 0].into();
    s.check("gather", &x, |_, g, v| g.gather(v, index.clone(), &[2, 3]))?;
    Ok(s.report)
}

pub fn beamformer_ops(seed: u64) -> Result<Report> {
    let mut s = Suite::new(seed);
    let x = s.spectrogram(6, 3, 2, 40);
    s.check("psd", &s.rand(&[2, 6, 9], 0.1, 0.9, 41), |_, g, m| ops::psd(g, &x, m, 3))?;
    for c in [2, 3] {
        let x = s.spectrogram(12, 3, c, 50 + c as u64);
        let masks = s.rand(&[c, 12, 9], 0.1, 0.9, 51);
        let mut rng = ChaCha8Rng::seed_from_u64(s.s(52));
        let u: Vec<f64> = (0..2)
            .flat_map(|_| {
                let w: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
                let t: f64 = w.iter().sum();
                w.into_iter().map(move |v| v / t)
            })
            .collect();
        let uc = u.clone();
        s.check(&format!("mvdr via masks C={c}"), &masks, |_, g, m| {
            let p = ops::psd(g, &x, m, 3)?;
            let r = g.constant(&[2, c], uc.clone());
            ops::mvdr(g, p, r)
        })?;
        let mv = masks.data().to_vec();
        s.check(&format!("mvdr via reference C={c}"), &Tensor::new(vec![2, c], u)?, |_, g, r| {
            let m = g.constant(&[c, 12, 9], mv.clone());
            let p = ops::psd(g, &x, m, 3)?;
            ops::mvdr(g, p, r)
        })?;
    }
    let x = s.spectrogram(5, 4, 3, 60);
    s.check("beamform_magnitude", &s.rand(&[2, 4, 3, 2], -1.0, 1.0, 61), |_, g, w| ops::beamform_magnitude(g, &x, w))?;
    Ok(s.report)
}

fn tiny_frontend(store: &mut ParamStore<f64>, reference: ReferenceMode, n_mels: usize, rng: &mut ChaCha8Rng) -> Result<Frontend<f64>> {
    let cfg = FrontendConfig { d_att: 4, heads: 2, d_ff: 6, layers: 1, window: Some(Window::new(2, 3)), reference, scorer_hidden: 3 };
    Frontend::new(store, cfg, 2, 5, MelFilterbank::new(n_mels, 8, 16_000), GlobalStats::identity(n_mels), rng)
}

/// Every frontend parameter against a weighted sum of the output features,
/// in both reference modes.
pub fn frontend(seed: u64) -> Result<Report> {
    let mut s = Suite::new(seed);
    for reference in [ReferenceMode::Attention, ReferenceMode::Fixed { channel: 1 }] {
        let label = format!("frontend {reference:?}");
        let x = s.spectrogram(10, 5, 2, 80);
        let mut rng = ChaCha8Rng::seed_from_u64(s.s(81));
        let mut store = ParamStore::new();
        let fe = tiny_frontend(&mut store, reference, 4, &mut rng)?;
        let w: Vec<Tensor<f64>> = (0..2).map(|j| s.rand(&[10, 4], -1.0, 1.0, 70 + j)).collect();
        let reached = s.check_params(&label, &store, |st, g| {
            let out = fe.forward(g, st, &x, &mut Dropout::off())?;
            let mut total = None;
            for (f, wj) in out.features.iter().zip(&w) {
                let wv = g.constant(&[10, 4], wj.data().to_vec());
                let p = g.mul(*f, wv)?;
                let l = g.sum(p);
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            Ok(total.expect("two speakers"))
        })?;
        let missing = store.len() - reached;
        s.report.checks.push((format!("{label}: parameters without gradient"), missing as f64));
    }
    Ok(s.report)
}

/// Frontend feeding the single-path encoder, decoder and PIT joint loss.
pub fn composed(seed: u64) -> Result<Report> {
    let mut s = Suite::new(seed);
    let x = s.spectrogram(16, 5, 2, 90);
    let mut rng = ChaCha8Rng::seed_from_u64(s.s(91));
    let mut store = ParamStore::new();
    let fe = tiny_frontend(&mut store, ReferenceMode::Attention, 6, &mut rng)?;
    let bcfg = BackendConfig {
        attention: AttentionConfig { d_att: 4, heads: 2, d_ff: 6, window: None },
        cnn_channels: [2, 2],
        n_mels: 6,
        sd_layers: 0,
        rec_layers: 1,
        decoder_layers: 1,
        share_sd: false,
        speakers: 2,
        ctc_weight: 0.2,
        label_smoothing: 0.1,
        vocab: Vocabulary::synthetic(3),
    };
    let be = Backend::new(&mut store, bcfg, &mut rng)?;
    // Zero biases on all-zero padding patches put ReLU inputs exactly on
    // the kink.
    for (_, bias) in be.conv_params() {
        store.tensor_mut(bias).data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.2));
    }
    let refs = vec![vec![1, 2], vec![3]];
    s.check_params("joint loss", &store, |st, g| {
        let out = fe.forward(g, st, &x, &mut Dropout::off())?;
        let streams = out.features.iter().map(|&f| be.encode_stream(g, st, f, &mut Dropout::off())).collect::<Result<Vec<_>>>()?;
        Ok(be.pit_joint_loss(g, st, &streams, &refs, &mut Dropout::off())?.0)
    })?;
    Ok(s.report)
}

pub type Group = fn(u64) -> Result<Report>;

pub const GROUPS: [(&str, Group); 7] = [
    ("elementwise", elementwise),
    ("matrix and normalization", matrix_and_normalization),
    ("shape", shapes),
    ("beamformer ops", beamformer_ops),
    ("frontend", frontend),
    ("composed loss", composed),
    ("encoder-decoder", encoder_decoder),
];

/// Single-channel backend: CNN, speaker-differentiating branches, shared
/// recognition encoder, decoder and PIT joint loss.
pub fn encoder_decoder(seed: u64) -> Result<Report> {
    let mut s = Suite::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(s.s(100));
    let mut store = ParamStore::new();
    let cfg = BackendConfig {
        attention: AttentionConfig { d_att: 4, heads: 2, d_ff: 6, window: None },
        cnn_channels: [2, 2],
        n_mels: 6,
        sd_layers: 1,
        rec_layers: 1,
        decoder_layers: 1,
        share_sd: false,
        speakers: 2,
        ctc_weight: 0.3,
        label_smoothing: 0.1,
        vocab: Vocabulary::synthetic(3),
    };
    let be = Backend::new(&mut store, cfg, &mut rng)?;
    for (_, bias) in be.conv_params() {
        store.tensor_mut(bias).data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.2));
    }
    let feats = s.rand(&[14, 6], -1.0, 1.0, 101);
    let refs = vec![vec![2, 1], vec![3, 1]];
    s.check_params("single-channel loss", &store, |st, g| {
        let o = g.constant(&[14, 6], feats.data().to_vec());
        let streams = be.encode_single_channel(g, st, o, &mut Dropout::off())?;
        Ok(be.pit_joint_loss(g, st, &streams, &refs, &mut Dropout::off())?.0)
    })?;
    Ok(s.report)
}
