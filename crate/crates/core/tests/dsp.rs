mod common;

use common::oracles::{bursty_source, drr, gaussian};
use msar::dsp::room::convolve;
use msar::dsp::wpe::{apply_filters, wpe_detailed, WpeParams};
use msar::dsp::{istft, mix, si_snr, spatialize, stft, synth_utterance, RoomMode, RoomSpec, SpeakerProfile, StftParams, Waveform};
use proptest::prelude::*;

#[test]
fn wpe_improves_effective_rir_drr() {
    let params = StftParams::default();
    let w = WpeParams::default();
    for seed in 0..3u64 {
        let src = bursty_source(seed, 16_000 * 4);
        let room = RoomSpec { mode: RoomMode::Reverberant { t60: 0.3 }, delays: vec![vec![0, 4]], decays: vec![vec![1.0, 0.85]], seed: 100 + seed };
        let y = spatialize(&Waveform::mono(16_000, src.clone()).unwrap(), &room, 0).unwrap();
        let out = wpe_detailed(&stft(&y, params).unwrap(), w).unwrap();
        let hs: Vec<Vec<f64>> = (0..2).map(|c| room.impulse_response(0, c, 16_000).unwrap()).collect();
        // Pass the known RIRs, placed mid-signal, through the fixed filters.
        let pos = 16_000;
        let placed: Vec<Vec<f64>> = hs
            .iter()
            .map(|h| {
                let mut x = vec![0.0; src.len()];
                x[pos..pos + h.len()].copy_from_slice(h);
                x
            })
            .collect();
        let filtered = apply_filters(&stft(&Waveform::new(16_000, placed).unwrap(), params).unwrap(), &out.filters, w).unwrap();
        let eff = istft(&filtered).unwrap();
        let heff: Vec<Vec<f64>> = (0..2).map(|c| eff.channel(c)[pos..pos + hs[c].len()].to_vec()).collect();
        let before = drr(&hs, &room.delays[0], 800);
        let after = drr(&heff, &room.delays[0], 800);
        assert!(after > before + 3.0, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn istft_bounds_edge_gain() {
    let x = gaussian(3, 4000);
    let s = stft(&Waveform::mono(16_000, x).unwrap(), StftParams::default()).unwrap();
    let mut noisy = s.clone();
    noisy.data_mut().iter_mut().enumerate().for_each(|(i, z)| *z += num_complex::Complex::new(1e-3 * (i % 7) as f64, 0.0));
    let a = istft(&s).unwrap();
    let b = istft(&noisy).unwrap();
    let diff = a.channel(0).iter().zip(b.channel(0)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(diff < 1.0, "edge amplification {diff}");
}

#[test]
fn convolution_matches_spatialize() {
    let src = Waveform::mono(16_000, gaussian(4, 3000)).unwrap();
    let room = RoomSpec { mode: RoomMode::Reverberant { t60: 0.25 }, delays: vec![vec![2]], decays: vec![vec![0.7]], seed: 1 };
    let y = spatialize(&src, &room, 0).unwrap();
    let h = room.impulse_response(0, 0, 16_000).unwrap();
    let full = convolve(src.channel(0), &h);
    assert!(y.channel(0).iter().zip(&full).all(|(a, b)| (a - b).abs() < 1e-10));
}

#[test]
fn generation_is_deterministic() {
    let p = SpeakerProfile::evenly_spaced(110.0, 100.0, 10, 120.0).unwrap();
    let u = synth_utterance(&[1, 5, 3], &p, 16_000).unwrap();
    let room = RoomSpec { mode: RoomMode::Reverberant { t60: 0.4 }, delays: vec![vec![0, 3]], decays: vec![vec![1.0, 0.9]], seed: 77 };
    let a = mix(&[spatialize(&u, &room, 0).unwrap()], Some(25.0), 9).unwrap().mixture;
    let b = mix(&[spatialize(&u, &room, 0).unwrap()], Some(25.0), 9).unwrap().mixture;
    assert_eq!(a, b);
    assert!(si_snr(a.channel(0), u.channel(0)).unwrap() > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stft_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = gaussian(seed, 2000);
        let y = gaussian(seed + 1, 2000);
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let p = StftParams::default();
        let sx = stft(&Waveform::mono(16_000, x).unwrap(), p).unwrap();
        let sy = stft(&Waveform::mono(16_000, y).unwrap(), p).unwrap();
        let sz = stft(&Waveform::mono(16_000, z).unwrap(), p).unwrap();
        for ((u, v), w) in sx.data().iter().zip(sy.data()).zip(sz.data()) {
            prop_assert!((u * a + v * b - w).norm() < 1e-12);
        }
    }

    #[test]
    fn round_trip_interior(seed in 0u64..10_000, len in 800usize..5000) {
        let x = gaussian(seed, len);
        let w = Waveform::mono(16_000, x.clone()).unwrap();
        let y = istft(&stft(&w, StftParams::default()).unwrap()).unwrap();
        for i in 400..y.len().saturating_sub(400) {
            prop_assert!((y.channel(0)[i] - x[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn mix_snr_is_exact(seed in 0u64..1000, snr in -5.0f64..30.0) {
        let s = Waveform::mono(16_000, gaussian(seed, 3000)).unwrap();
        let m = mix(&[s.clone()], Some(snr), seed).unwrap();
        let n = m.noise.unwrap();
        let ratio = s.power() / n.power();
        prop_assert!((10.0 * ratio.log10() - snr).abs() < 1e-9);
    }
}
