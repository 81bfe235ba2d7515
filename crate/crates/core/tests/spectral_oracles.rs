//! Spectral transforms against direct-summation oracles.

use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectra_core::spectral::{frsst, rdft, rdft_raw, stft, WindowSpec};
use spectra_tensor::Tensor;

/// O(T^2) one-sided DFT, unnormalized.
fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let t = x.len();
    (0..t / 2 + 1)
        .map(|f| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (k, &v)| {
                let a = -2.0 * PI * (f * k) as f64 / t as f64;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect()
}

/// O(L K^2) windowed DFT, `[F][L]` layout, normalized by the window energy.
fn naive_stft(x: &[f64], k: usize, hop: usize) -> Vec<(f64, f64)> {
    let w: Vec<f64> = (0..k).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / k as f64).cos()).collect();
    let e: f64 = w.iter().map(|v| v * v).sum();
    let frames = (x.len() - k) / hop + 1;
    let mut out = vec![(0.0, 0.0); (k / 2 + 1) * frames];
    for l in 0..frames {
        for f in 0..=k / 2 {
            let mut acc = (0.0, 0.0);
            for i in 0..k {
                let a = -2.0 * PI * (f * i) as f64 / k as f64;
                let v = x[l * hop + i] * w[i];
                acc.0 += v * a.cos();
                acc.1 += v * a.sin();
            }
            out[f * frames + l] = (acc.0 / e, acc.1 / e);
        }
    }
    out
}

fn series(values: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(values.to_vec(), &[values.len()]).unwrap()
}

fn random_series(t: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn cosine_concentrates_in_bin_one() {
    let x: Vec<f64> = (0..8).map(|t| (2.0 * PI * t as f64 / 8.0).cos()).collect();
    let g = rdft(&series(&x)).unwrap();
    for f in 0..5 {
        let mag = g.coeffs.re.data()[f].hypot(g.coeffs.im.data()[f]);
        let want = if f == 1 { 1.0 } else { 0.0 };
        assert!((mag - want).abs() < 1e-9, "bin {f}: {mag}");
    }
    let oracle = naive_dft(&x);
    assert!((oracle[1].0.hypot(oracle[1].1) * 2.0 / 8.0 - 1.0).abs() < 1e-12);
}

#[test]
fn rdft_matches_naive_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in [2, 3, 7, 16, 96] {
        let x = random_series(t, &mut rng);
        let g = rdft_raw(&series(&x)).unwrap();
        for (f, (re, im)) in naive_dft(&x).into_iter().enumerate() {
            assert!((g.coeffs.re.data()[f] - re).abs() < 1e-9);
            assert!((g.coeffs.im.data()[f] - im).abs() < 1e-9);
        }
    }
}

#[test]
fn hann_energy_is_three_eighths_of_length() {
    // direct sum of squares against 3K/8
    for k in [32usize, 64, 96] {
        let w = WindowSpec::new(k, k / 2).unwrap();
        let direct: f64 = (0..k)
            .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / k as f64).cos()).powi(2))
            .sum();
        assert!((direct - 3.0 * k as f64 / 8.0).abs() < 1e-12);
        assert_eq!(w.energy(), 3.0 * k as f64 / 8.0);
    }
    for k in (4..=256).step_by(4) {
        let e = WindowSpec::new(k, k / 2).unwrap().energy();
        assert!((e - 3.0 * k as f64 / 8.0).abs() <= 1e-14 * k as f64, "{k}: {e}");
    }
}

#[test]
fn stft_matches_naive_windowed_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (k, hop) in [(64, 32), (32, 8), (96, 48)] {
        let x = random_series(96, &mut rng);
        let g = stft(&series(&x), &WindowSpec::new(k, hop).unwrap()).unwrap();
        let oracle = naive_stft(&x, k, hop);
        assert_eq!(g.coeffs.re.numel(), oracle.len());
        for (i, (re, im)) in oracle.into_iter().enumerate() {
            assert!((g.coeffs.re.data()[i] - re).abs() < 1e-9);
            assert!((g.coeffs.im.data()[i] - im).abs() < 1e-9);
        }
    }
}

#[test]
fn parseval_for_rdft() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for t in [8usize, 9, 96, 97] {
        let x = random_series(t, &mut rng);
        let g = rdft_raw(&series(&x)).unwrap();
        let f = t / 2 + 1;
        let spectral: f64 = (0..f)
            .map(|i| {
                let mult = if i == 0 || (t % 2 == 0 && i == f - 1) { 1.0 } else { 2.0 };
                mult * (g.coeffs.re.data()[i].powi(2) + g.coeffs.im.data()[i].powi(2))
            })
            .sum();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        assert!((energy - spectral / t as f64).abs() <= 1e-9 * energy);
    }
}

#[test]
fn stft_shift_by_hop_shifts_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (k, hop, t) = (16, 8, 96);
    let base = random_series(t + hop, &mut rng);
    let win = WindowSpec::new(k, hop).unwrap();
    let a = stft(&series(&base[hop..]), &win).unwrap();
    let b = stft(&series(&base[..t]), &win).unwrap();
    let frames = win.frames(t);
    for f in 0..win.bins() {
        for l in 1..frames - 1 {
            let (i, j) = (f * frames + l, f * frames + l + 1);
            assert!((a.coeffs.re.data()[i] - b.coeffs.re.data()[j]).abs() < 1e-9);
            assert!((a.coeffs.im.data()[i] - b.coeffs.im.data()[j]).abs() < 1e-9);
        }
    }
}

#[test]
fn frsst_conserves_frame_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let win = WindowSpec::new(32, 16).unwrap();
    for _ in 0..20 {
        let x = random_series(128, &mut rng);
        let s = stft(&series(&x), &win).unwrap();
        let q = frsst(&series(&x), &win).unwrap();
        let frames = s.frames.unwrap();
        for l in 0..frames {
            let col = |t: &Tensor<f64>| (0..win.bins()).map(|f| t.data()[f * frames + l]).sum::<f64>();
            assert!((col(&s.coeffs.re) - col(&q.coeffs.re)).abs() < 1e-9);
            assert!((col(&s.coeffs.im) - col(&q.coeffs.im)).abs() < 1e-9);
        }
    }
}

#[test]
fn frsst_works_with_two_frames() {
    // K_f = 2T/3 with hop K_f/2 always yields two frames.
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random_series(96, &mut rng);
    let q = frsst(&series(&x), &WindowSpec::for_series(96).unwrap()).unwrap();
    assert_eq!(q.frames, Some(2));
}

/// Share of squared magnitude within one bin of `f0` over interior frames.
fn concentration(gram: &spectra_core::spectral::SpectralGram<f64>, f0: usize) -> f64 {
    let frames = gram.frames.unwrap();
    let (mut near, mut total) = (0.0, 0.0);
    for l in 1..frames - 1 {
        for f in 0..gram.bins {
            let i = f * frames + l;
            let e = gram.coeffs.re.data()[i].powi(2) + gram.coeffs.im.data()[i].powi(2);
            total += e;
            if f.abs_diff(f0) <= 1 {
                near += e;
            }
        }
    }
    near / total
}

#[test]
fn pure_tone_is_sharpened_around_its_bin() {
    let win = WindowSpec::new(32, 16).unwrap();
    for f0 in [2usize, 5, 9, 14] {
        let x: Vec<f64> = (0..256).map(|t| (2.0 * PI * (f0 * t) as f64 / 32.0).cos()).collect();
        let q = frsst(&series(&x), &win).unwrap();
        assert!(concentration(&q, f0) >= 0.9, "f0={f0}: {}", concentration(&q, f0));
    }
}

/// Bins of interior frames holding more than 1e-3 of the frame's peak magnitude.
fn support(gram: &spectra_core::spectral::SpectralGram<f64>) -> usize {
    let frames = gram.frames.unwrap();
    let mag = |i: usize| gram.coeffs.re.data()[i].hypot(gram.coeffs.im.data()[i]);
    (1..frames - 1)
        .map(|l| {
            let peak = (0..gram.bins).map(|f| mag(f * frames + l)).fold(0.0, f64::max);
            (0..gram.bins).filter(|f| mag(f * frames + l) > 1e-3 * peak).count()
        })
        .sum()
}

#[test]
fn off_bin_tone_occupies_fewer_bins() {
    // The frame difference only resolves offsets well below K/(4H) bins, so use a short hop.
    let win = WindowSpec::new(32, 2).unwrap();
    let x: Vec<f64> = (0..256).map(|t| (2.0 * PI * 6.3 * t as f64 / 32.0).cos()).collect();
    let s = stft(&series(&x), &win).unwrap();
    let q = frsst(&series(&x), &win).unwrap();
    assert!(support(&q) < support(&s), "{} vs {}", support(&q), support(&s));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn transforms_are_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_series(64, &mut rng);
        let y = random_series(64, &mut rng);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let win = WindowSpec::new(16, 8).unwrap();
        type Coeffs = spectra_core::spectral::ComplexTensor<f64>;
        let d: Box<dyn Fn(&[f64]) -> Coeffs> = Box::new(|v| rdft(&series(v)).unwrap().coeffs);
        let s: Box<dyn Fn(&[f64]) -> Coeffs> = Box::new(|v| stft(&series(v), &win).unwrap().coeffs);
        for f in [d, s] {
            let (cx, cy, cm) = (f(&x), f(&y), f(&mix));
            for i in 0..cm.re.numel() {
                let want_re = a * cx.re.data()[i] + b * cy.re.data()[i];
                let want_im = a * cx.im.data()[i] + b * cy.im.data()[i];
                prop_assert!((cm.re.data()[i] - want_re).abs() < 1e-9);
                prop_assert!((cm.im.data()[i] - want_im).abs() < 1e-9);
            }
        }
    }
}
