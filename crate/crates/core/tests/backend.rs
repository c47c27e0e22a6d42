mod common;

use common::oracles::{brute_force_pit, ctc_enumeration, log_normalized};
use msar::attention::{AttentionConfig, Dropout};
use msar::backend::ctc::ctc_nll_grad;
use msar::backend::{ctc_nll, joint_loss, pit_assign, Backend, BackendConfig, Vocabulary};
use msar::numerics::{Graph, ParamStore, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> BackendConfig {
    BackendConfig {
        attention: AttentionConfig { d_att: 8, heads: 2, d_ff: 12, window: None },
        cnn_channels: [2, 3],
        n_mels: 6,
        sd_layers: 1,
        rec_layers: 1,
        decoder_layers: 1,
        share_sd: false,
        speakers: 2,
        ctc_weight: 0.3,
        label_smoothing: 0.1,
        vocab: Vocabulary::synthetic(3),
    }
}

fn build(cfg: BackendConfig, seed: u64) -> (ParamStore<f64>, Backend) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = Backend::new(&mut store, cfg, &mut rng).unwrap();
    (store, b)
}

fn features(g: &mut Graph<f64>, t: usize, m: usize, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.constant(&[t, m], (0..t * m).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn ctc_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let frames = rng.random_range(1..=6);
        let vocab = rng.random_range(2..=4);
        let n = rng.random_range(0..=3);
        let target: Vec<usize> = (0..n).map(|_| rng.random_range(1..vocab)).collect();
        let logp = log_normalized(frames, vocab, &mut rng);
        let got = ctc_nll(&logp, frames, vocab, &target, 0).unwrap();
        let want = ctc_enumeration(&logp, frames, vocab, &target, 0);
        if want.is_infinite() {
            assert!(got.is_infinite());
        } else {
            assert!(((got - want) / want.abs().max(1e-300)).abs() < 1e-10, "{got} vs {want}");
        }
    }
}

#[test]
fn ctc_uniform_posteriors() {
    let logp = vec![(1.0f64 / 3.0).ln(); 12];
    let got = ctc_nll(&logp, 4, 3, &[1, 2], 0).unwrap();
    assert!((got - ctc_enumeration(&logp, 4, 3, &[1, 2], 0)).abs() < 1e-12);
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let logp = log_normalized(5, 4, &mut rng);
        let target = [1, 3, 3];
        let (_, grad) = ctc_nll_grad(&logp, 5, 4, &target, 0).unwrap();
        for i in 0..logp.len() {
            let mut p = logp.clone();
            p[i] += 1e-6;
            let mut m = logp.clone();
            m[i] -= 1e-6;
            let fd = (ctc_nll(&p, 5, 4, &target, 0).unwrap() - ctc_nll(&m, 5, 4, &target, 0).unwrap()) / 2e-6;
            assert!((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-4) < 1e-5, "{i}: {fd} vs {}", grad[i]);
        }
    }
}

#[test]
fn pit_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [2, 3] {
        for _ in 0..100 {
            let m: Vec<Vec<f64>> =
                (0..n).map(|_| (0..n).map(|_| if rng.random_bool(0.2) { f64::INFINITY } else { rng.random_range(0..5) as f64 }).collect()).collect();
            assert_eq!(pit_assign(&m).unwrap(), brute_force_pit(&m));
        }
    }
}

#[test]
fn cnn_embed_shapes() {
    for (t, l) in [(8, 2), (4, 1), (9, 3), (17, 5)] {
        assert_eq!(BackendConfig::subsampled_len(t), l);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..5 {
        let mut cfg = tiny_cfg();
        cfg.n_mels = rng.random_range(3..12);
        cfg.attention.d_att = 2 * rng.random_range(2..6);
        let (store, b) = build(cfg.clone(), seed);
        let t = rng.random_range(4..20);
        let mut g = Graph::new();
        let o = features(&mut g, t, cfg.n_mels, seed);
        let h = b.cnn_embed(&mut g, &store, o).unwrap();
        assert_eq!(g.shape(h), &[BackendConfig::subsampled_len(t), cfg.attention.d_att]);
    }
    let (store, b) = build(tiny_cfg(), 0);
    let mut g = Graph::new();
    let o = features(&mut g, 3, 6, 0);
    assert!(b.cnn_embed(&mut g, &store, o).is_err());
}

#[test]
fn zero_input_gives_bias_plus_positions() {
    let (store, b) = build(tiny_cfg(), 5);
    let mut g = Graph::new();
    let o = g.constant(&[8, 6], vec![0.0; 48]);
    let h = b.cnn_embed(&mut g, &store, o).unwrap();
    // conv biases start at zero, so the projection of zero is its bias (zero)
    let pe = msar::attention::sinusoidal_positions::<f64>(2, 8).unwrap();
    for (a, p) in g.value(h).iter().zip(pe.data()) {
        assert!((a - p).abs() < 1e-15);
    }
}

#[test]
fn identical_branches_give_identical_streams() {
    let mut cfg = tiny_cfg();
    cfg.share_sd = true;
    let (store, b) = build(cfg, 6);
    let mut g = Graph::new();
    let o = features(&mut g, 12, 6, 6);
    let s = b.encode_single_channel(&mut g, &store, o, &mut Dropout::off()).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(g.value(s[0]), g.value(s[1]));
}

#[test]
fn perturbing_one_branch_changes_only_its_stream() {
    let (mut store, b) = build(tiny_cfg(), 7);
    let mut g = Graph::new();
    let o = features(&mut g, 12, 6, 7);
    let before = b.encode_single_channel(&mut g, &store, o, &mut Dropout::off()).unwrap();
    let (v0, v1) = (g.value(before[0]).to_vec(), g.value(before[1]).to_vec());
    let id = b.sd_branches()[0][0].att.wq.w;
    store.tensor_mut(id).data_mut().iter_mut().for_each(|w| *w += 0.1);
    let mut g = Graph::new();
    let o = features(&mut g, 12, 6, 7);
    let after = b.encode_single_channel(&mut g, &store, o, &mut Dropout::off()).unwrap();
    assert!(g.value(after[0]) != v0.as_slice());
    assert_eq!(g.value(after[1]), v1.as_slice());
}

#[test]
fn stream_encoder_equals_zero_sd_pathway() {
    let mut cfg = tiny_cfg();
    cfg.sd_layers = 0;
    cfg.rec_layers = 3;
    let (store, b) = build(cfg, 8);
    let mut g = Graph::new();
    let o = features(&mut g, 13, 6, 8);
    let s = b.encode_single_channel(&mut g, &store, o, &mut Dropout::off()).unwrap();
    let e = b.encode_stream(&mut g, &store, o, &mut Dropout::off()).unwrap();
    let e2 = b.encode_stream(&mut g, &store, o, &mut Dropout::off()).unwrap();
    assert_eq!(g.shape(e), &[4, 8]);
    assert_eq!(g.value(e), g.value(s[0]));
    assert_eq!(g.value(e), g.value(e2));
}

#[test]
fn uniform_decoder_cross_entropy_is_log_v() {
    let (mut store, b) = build(tiny_cfg(), 9);
    let out = b.attention_output();
    msar::attention::layers::zero_param(&mut store, out.w);
    msar::attention::layers::zero_param(&mut store, out.b);
    let mut g = Graph::new();
    let m = features(&mut g, 3, 8, 9);
    let l = b.attention_ce_loss(&mut g, &store, m, &[1, 2, 3], &mut Dropout::off()).unwrap();
    assert!((g.item(l) - 5f64.ln()).abs() < 1e-12);
    assert!(b.attention_ce_loss(&mut g, &store, m, &[], &mut Dropout::off()).is_err());
}

#[test]
fn cross_entropy_respects_smoothing_floor() {
    let (store, b) = build(tiny_cfg(), 10);
    let (v, eps) = (5.0f64, 0.1);
    let hi = 1.0 - eps + eps / v;
    let lo = eps / v;
    let entropy = -hi * hi.ln() - (v - 1.0) * lo * lo.ln();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for seed in 0..10 {
        let mut g = Graph::new();
        let m = features(&mut g, 4, 8, seed);
        let r: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(1..4)).collect();
        let l = b.attention_ce_loss(&mut g, &store, m, &r, &mut Dropout::off()).unwrap();
        assert!(g.item(l) >= entropy);
    }
}

#[test]
fn teacher_forcing_matches_incremental_decoding() {
    let (store, b) = build(tiny_cfg(), 11);
    let mut g = Graph::new();
    let m = features(&mut g, 4, 8, 11);
    let prefix = [4, 1, 3, 2, 2];
    let full = b.decoder_log_probs(&mut g, &store, m, &prefix, &mut Dropout::off()).unwrap();
    let full = g.value(full).to_vec();
    for i in 1..=prefix.len() {
        let step = b.decoder_log_probs(&mut g, &store, m, &prefix[..i], &mut Dropout::off()).unwrap();
        let row = &g.value(step)[(i - 1) * 5..i * 5];
        for (a, c) in row.iter().zip(&full[(i - 1) * 5..i * 5]) {
            assert!((a - c).abs() < 1e-10);
        }
    }
}

#[test]
fn joint_loss_endpoints_and_weighting() {
    let (c, a) = ([2.0, 3.0], [5.0, 7.0]);
    assert_eq!(joint_loss(&c, &a, 1.0).unwrap(), 5.0);
    assert_eq!(joint_loss(&c, &a, 0.0).unwrap(), 12.0);
    let want = 0.2 * 2.0 + 0.8 * 5.0 + 0.2 * 3.0 + 0.8 * 7.0;
    assert!((joint_loss(&c, &a, 0.2).unwrap() - want).abs() < 1e-14);
    assert!(joint_loss(&c, &a, 1.5).is_err());
}

#[test]
fn pit_joint_loss_is_symmetric_and_minimal() {
    let (store, b) = build(tiny_cfg(), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..10 {
        let mut g = Graph::new();
        let s1 = features(&mut g, 6, 8, 100 + seed);
        let s2 = features(&mut g, 6, 8, 200 + seed);
        let r1: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(1..4)).collect();
        let r2: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(1..4)).collect();
        let mut drop = Dropout::off();
        let (_, t) = b.pit_joint_loss(&mut g, &store, &[s1, s2], &[r1.clone(), r2.clone()], &mut drop).unwrap();
        let (_, swapped) = b.pit_joint_loss(&mut g, &store, &[s2, s1], &[r2.clone(), r1.clone()], &mut drop).unwrap();
        assert!((t.joint - swapped.joint).abs() < 1e-12);
        // CTC part under the chosen permutation is no worse than the other one
        let z: Vec<Vec<f64>> = [s1, s2]
            .iter()
            .map(|&s| {
                let z = b.ctc_log_probs(&mut g, &store, s).unwrap();
                g.value(z).to_vec()
            })
            .collect();
        let c = |j: usize, r: &[usize]| ctc_nll(&z[j], 6, 5, r, 0).unwrap();
        let chosen: f64 = t.ctc.iter().sum();
        let other = if t.permutation == [0, 1] { c(0, &r2) + c(1, &r1) } else { c(0, &r1) + c(1, &r2) };
        assert!(chosen <= other);
    }
}

#[test]
fn greedy_decode_matches_stepwise_argmax() {
    let (store, b) = build(tiny_cfg(), 13);
    for seed in 0..5 {
        let mut g = Graph::new();
        let m = features(&mut g, 3, 8, seed);
        let h = b.decode(&mut g, &store, m, 1, 6).unwrap();
        let mut prefix = vec![4];
        let mut log_prob = 0.0;
        for _ in 0..6 {
            let lp = b.decoder_log_probs(&mut g, &store, m, &prefix, &mut Dropout::off()).unwrap();
            let row = g.value(lp)[(prefix.len() - 1) * 5..].to_vec();
            let k = (0..5).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            log_prob += row[k];
            prefix.push(k);
            if k == 4 {
                break;
            }
        }
        assert_eq!(h.tokens, prefix[1..]);
        assert!((h.log_prob - log_prob).abs() < 1e-12);
        assert!(h.complete == (h.tokens.last() == Some(&4)));
        assert!(h.complete || h.tokens.len() == 6);
    }
}

#[test]
fn beam_hypotheses_end_or_hit_the_length_cap() {
    let (store, b) = build(tiny_cfg(), 14);
    for seed in 0..5 {
        let mut g = Graph::new();
        let m = features(&mut g, 3, 8, seed);
        for max_len in [1, 3, 8] {
            let h = b.decode(&mut g, &store, m, 4, max_len).unwrap();
            assert!(h.tokens.last() == Some(&4) || h.tokens.len() == max_len);
            assert!(h.log_prob <= 0.0);
            assert!((h.score - h.log_prob / h.tokens.len() as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn joint_loss_gradient_reaches_encoder_parameters() {
    let (mut store, b) = build(tiny_cfg(), 15);
    // nonzero biases keep ReLU inputs off the kink at exactly zero
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for (_, bias) in b.conv_params() {
        store.tensor_mut(bias).data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.2));
    }
    let refs = [vec![vec![1, 2], vec![3]], vec![vec![2], vec![1, 3]]];
    let loss_of = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
        let mut total = None;
        for (u, r) in refs.iter().enumerate() {
            let o = features(g, 14, 6, 300 + u as u64);
            let streams = b.encode_single_channel(g, s, o, &mut Dropout::off()).unwrap();
            let (l, _) = b.pit_joint_loss(g, s, &streams, r, &mut Dropout::off()).unwrap();
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l).unwrap(),
            });
        }
        total.unwrap()
    };
    let mut g = Graph::new();
    let l = loss_of(&store, &mut g);
    g.backward(l).unwrap();
    let grads: Vec<_> = g.param_grads().map(|(id, v)| (id, v.to_vec())).collect();
    let picks = [b.conv_params()[0].0, b.sd_branches()[1][0].att.wk.w, b.conv_params()[1].1];
    for id in picks {
        let grad = &grads.iter().find(|(i, _)| *i == id).expect("parameter reached").1;
        for i in [0, grad.len() / 2, grad.len() - 1] {
            let eval = |d: f64| {
                let mut s = store.clone();
                s.tensor_mut(id).data_mut()[i] += d;
                let mut g = Graph::new();
                let l = loss_of(&s, &mut g);
                g.item(l)
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-5, "{}[{i}]: {} vs {fd}", store.get(id).name, grad[i]);
        }
    }
}

proptest! {
    #[test]
    fn token_error_rate_bounds(h in proptest::collection::vec(0usize..5, 0..8), r in proptest::collection::vec(0usize..5, 1..8)) {
        let ter = msar::backend::token_error_rate(&h, &r).unwrap();
        let d = msar::backend::edit_distance(&h, &r);
        prop_assert!(d <= h.len().max(r.len()));
        prop_assert!(d >= h.len().abs_diff(r.len()));
        prop_assert!((ter - d as f64 / r.len() as f64).abs() < 1e-15);
        prop_assert_eq!(msar::backend::edit_distance(&r, &h), d);
    }
}
