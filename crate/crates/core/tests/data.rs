use proptest::prelude::*;
use spectra_core::data::{
    apply_mask, read_csv, read_mask_csv, synth_dataset, window, write_csv, write_mask_csv, MaskSpec, Normalizer,
    Sinusoid, SynthFeature, SynthSpec, TimeSeriesBatch,
};
use spectra_core::spectral::rdft;
use spectra_tensor::Tensor;

fn series(len: usize, d: usize) -> TimeSeriesBatch {
    let rows: Vec<Vec<f64>> = (0..len)
        .map(|t| (0..d).map(|f| (t * d + f) as f64 * 0.5 - 3.0).collect())
        .collect();
    TimeSeriesBatch::from_rows(&rows, (0..d).map(|f| format!("f{f}")).collect()).unwrap()
}

#[test]
fn missing_cell_becomes_unobserved() {
    let csv = "date,a,b\n2020-01-01,1.5,2\n2020-01-02,,4\n2020-01-03,5,6\n";
    let b = read_csv(csv.as_bytes()).unwrap();
    assert_eq!(b.values.shape(), &[1, 3, 2]);
    assert_eq!(b.mask.data().iter().filter(|&&m| m == 0.0).count(), 1);
    assert_eq!(b.mask.data()[2], 0.0);
    assert_eq!(b.values.data()[2], 0.0);
    assert_eq!(b.feature_names, ["a", "b"]);
}

#[test]
fn rows_are_sorted_and_duplicates_rejected() {
    let b = read_csv("t,x\n3,30\n1,10\n2,20\n".as_bytes()).unwrap();
    assert_eq!(b.values.to_vec(), vec![10.0, 20.0, 30.0]);
    assert_eq!(b.timestamps, ["1", "2", "3"]);
    assert!(read_csv("t,x\n1,1\n1,2\n".as_bytes()).is_err());
}

#[test]
fn bad_cell_reports_position() {
    let err = read_csv("date,a,b\n1,2,3\n2,4,oops\n".as_bytes()).unwrap_err().to_string();
    assert!(err.contains("row 3") && err.contains("column 3"), "{err}");
}

#[test]
fn date_column_need_not_be_first() {
    let b = read_csv("a,date\n1,2021\n2,2020\n".as_bytes()).unwrap();
    assert_eq!(b.feature_names, ["a"]);
    assert_eq!(b.values.to_vec(), vec![2.0, 1.0]);
}

#[test]
fn csv_round_trip_is_exact() {
    let vals = [0.1f32, -3.25e-7, 12345.679, f32::MAX, f32::MIN_POSITIVE, 1.0 / 3.0];
    let rows: Vec<Vec<f64>> = vals.chunks(2).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
    let mut b = TimeSeriesBatch::from_rows(&rows, vec!["p".into(), "q".into()]).unwrap();
    let mut mask = b.mask.to_vec();
    mask[3] = 0.0;
    b = TimeSeriesBatch::new(b.values.clone(), Tensor::from_vec(mask, b.mask.shape()).unwrap(), b.timestamps, b.offsets, b.feature_names)
        .unwrap();
    let mut buf = Vec::new();
    write_csv(&b, &mut buf).unwrap();
    let back = read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.values.to_vec(), b.values.to_vec());
    assert_eq!(back.mask.to_vec(), b.mask.to_vec());
}

#[test]
fn ett_shaped_file_windows_into_96_steps() {
    let names = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"];
    let mut text = format!("date,{}\n", names.join(","));
    for h in 0..400 {
        let day = h / 24;
        let row: Vec<String> = (0..7).map(|f| format!("{:.3}", (h as f64 * 0.1 + f as f64).sin())).collect();
        text.push_str(&format!("2016-07-{:02} {:02}:00:00,{}\n", day + 1, h % 24, row.join(",")));
    }
    let b = read_csv(text.as_bytes()).unwrap();
    assert_eq!(b.values.shape(), &[1, 400, 7]);
    let w = window(&b, 96, 96).unwrap();
    assert_eq!(w.values.shape(), &[4, 96, 7]);
    assert_eq!(w.timestamps[w.offsets[1]], "2016-07-05 00:00:00");
}

#[test]
fn window_counts() {
    let b = series(10, 1);
    assert_eq!(window(&b, 4, 4).unwrap().batch(), 2);
    assert_eq!(window(&b, 4, 1).unwrap().batch(), 7);
    assert!(window(&b, 11, 1).is_err());
    assert!(window(&b, 4, 0).is_err());
}

#[test]
fn windows_do_not_alias() {
    let b = series(10, 1);
    let w = window(&b, 4, 2).unwrap();
    let mut v = w.values.to_vec();
    v[2] = 99.0;
    let changed = Tensor::from_vec(v, w.values.shape()).unwrap();
    assert_ne!(changed.data()[2], w.values.data()[2]);
    assert_eq!(w.values.data()[4], b.values.data()[2]);
}

#[test]
fn single_sinusoid_lands_in_its_bin() {
    let spec = SynthSpec {
        length: 96,
        period: 96,
        features: vec![SynthFeature {
            sinusoids: vec![Sinusoid {
                freq: 5.0,
                amp: 2.0,
                phase: 0.3,
            }],
            trend: vec![],
        }],
        noise_std: 0.0,
        seed: 1,
    };
    let b = synth_dataset(&spec).unwrap();
    let c = rdft(&b.values.reshape(&[96]).unwrap()).unwrap().coeffs;
    let energy: Vec<f64> = c.re.data().iter().zip(c.im.data()).map(|(r, i)| r * r + i * i).collect();
    let total: f64 = energy.iter().sum();
    assert!(energy[5] / total > 1.0 - 1e-12);
    assert!((energy[5].sqrt() - 2.0).abs() < 1e-12);
}

#[test]
fn synth_is_seed_deterministic() {
    let a = synth_dataset(&SynthSpec::random(3, 200, 48, 9)).unwrap();
    let b = synth_dataset(&SynthSpec::random(3, 200, 48, 9)).unwrap();
    let c = synth_dataset(&SynthSpec::random(3, 200, 48, 10)).unwrap();
    assert_eq!(a.values.to_vec(), b.values.to_vec());
    assert_ne!(a.values.to_vec(), c.values.to_vec());
}

#[test]
fn zero_amplitude_leaves_the_trend() {
    let spec = SynthSpec {
        length: 20,
        period: 10,
        features: vec![SynthFeature {
            sinusoids: vec![Sinusoid {
                freq: 2.0,
                amp: 0.0,
                phase: 0.0,
            }],
            trend: vec![1.5],
        }],
        noise_std: 0.0,
        seed: 0,
    };
    let b = synth_dataset(&spec).unwrap();
    assert!(b.values.data().iter().all(|&v| v == 1.5));
}

#[test]
fn pointwise_hides_an_exact_count() {
    let b = series(10, 10);
    let m = apply_mask(&b, &MaskSpec::pointwise(0.5, 3)).unwrap();
    assert_eq!(m.eval_mask.data().iter().filter(|&&x| x > 0.0).count(), 50);
    assert_eq!(m.batch.mask.data().iter().filter(|&&x| x > 0.0).count(), 50);
    assert_eq!(m.truth.to_vec(), b.values.to_vec());
}

fn runs(line: &[bool]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut n = 0;
    for &h in line.iter().chain(std::iter::once(&false)) {
        if h {
            n += 1;
        } else if n > 0 {
            out.push(n);
            n = 0;
        }
    }
    out
}

#[test]
fn timewise_hides_contiguous_blocks() {
    let b = window(&series(96 * 4, 3), 96, 96).unwrap();
    let m = apply_mask(&b, &MaskSpec::timewise(0.5, 11)).unwrap();
    let e = m.eval_mask.data();
    for s in 0..4 {
        for f in 0..3 {
            let line: Vec<bool> = (0..96).map(|t| e[(s * 96 + t) * 3 + f] > 0.0).collect();
            let r = runs(&line);
            assert_eq!(r.iter().sum::<usize>(), 48);
            // Adjacent blocks may touch, so a run is a union of blocks of at
            // most 16 steps; far fewer runs than hidden entries.
            assert!(r.len() <= 48 / 8 + 1, "{r:?}");
        }
    }
}

#[test]
fn aligned_timewise_hides_whole_rows() {
    let b = window(&series(96, 4), 96, 96).unwrap();
    let spec = MaskSpec {
        aligned: true,
        ..MaskSpec::timewise(0.25, 2)
    };
    let m = apply_mask(&b, &spec).unwrap();
    let e = m.eval_mask.data();
    for t in 0..96 {
        let row = &e[t * 4..t * 4 + 4];
        assert!(row.iter().all(|&x| x == row[0]));
    }
    assert_eq!(e.iter().filter(|&&x| x > 0.0).count(), 24 * 4);
}

#[test]
fn masking_rejects_bad_rates() {
    let b = series(8, 1);
    assert!(apply_mask(&b, &MaskSpec::pointwise(0.0, 0)).is_err());
    assert!(apply_mask(&b, &MaskSpec::pointwise(1.0, 0)).is_err());
}

#[test]
fn mask_csv_round_trip() {
    let b = window(&series(40, 3), 10, 10).unwrap();
    let m = apply_mask(&b, &MaskSpec::pointwise(0.3, 5)).unwrap();
    let mut buf = Vec::new();
    write_mask_csv(&m.eval_mask, &mut buf).unwrap();
    let back = read_mask_csv(buf.as_slice(), m.eval_mask.shape()).unwrap();
    assert_eq!(back.to_vec(), m.eval_mask.to_vec());
    assert!(read_mask_csv("b,t,d\n4,0,0\n".as_bytes(), &[4, 10, 3]).is_err());
}

#[test]
fn normalizer_ignores_unobserved_values() {
    let b = read_csv("t,x,y\n0,1,5\n1,3,\n2,,7\n".as_bytes()).unwrap();
    let n = Normalizer::fit(&b).unwrap();
    assert_eq!(n.mean, vec![2.0, 6.0]);
    assert_eq!(n.std, vec![1.0, 1.0]);
    let z = n.normalize(&b).unwrap();
    assert_eq!(z.values.to_vec(), vec![-1.0, -1.0, 1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn constant_feature_uses_the_floor() {
    let b = read_csv("t,x\n0,4\n1,4\n".as_bytes()).unwrap();
    let n = Normalizer::fit(&b).unwrap();
    assert_eq!(n.std, vec![1e-8]);
}

proptest! {
    #[test]
    fn masks_are_reproducible_and_nested(seed in 0u64..1000, rate in 0.05f64..0.95, timewise in any::<bool>()) {
        let b = window(&series(120, 2), 24, 12).unwrap();
        let spec = if timewise { MaskSpec::timewise(rate, seed) } else { MaskSpec::pointwise(rate, seed) };
        let a = apply_mask(&b, &spec).unwrap();
        let again = apply_mask(&b, &spec).unwrap();
        prop_assert_eq!(a.eval_mask.to_vec(), again.eval_mask.to_vec());
        for ((&e, &m), &orig) in a.eval_mask.data().iter().zip(a.batch.mask.data()).zip(b.mask.data()) {
            prop_assert!(e <= orig);
            prop_assert_eq!(e + m, orig);
        }
        for (i, &e) in a.eval_mask.data().iter().enumerate() {
            if e > 0.0 {
                prop_assert_eq!(a.batch.values.data()[i], 0.0);
                prop_assert_eq!(a.truth.data()[i], b.values.data()[i]);
            }
        }
    }

    #[test]
    fn windows_keep_mask_alignment(len in 12usize..60, t in 1usize..12, stride in 1usize..6, seed in 0u64..100) {
        let b = apply_mask(&series(len, 2), &MaskSpec::pointwise(0.3, seed)).unwrap().batch;
        let w = window(&b, t, stride).unwrap();
        prop_assert_eq!(w.batch(), (len - t) / stride + 1);
        for s in 0..w.batch() {
            let o = w.offsets[s];
            for step in 0..t {
                for f in 0..2 {
                    prop_assert_eq!(w.mask.data()[(s * t + step) * 2 + f], b.mask.data()[(o + step) * 2 + f]);
                    prop_assert_eq!(w.values.data()[(s * t + step) * 2 + f], b.values.data()[(o + step) * 2 + f]);
                }
            }
        }
    }

    #[test]
    fn normalizer_round_trips_and_ignores_hidden_values(seed in 0u64..500, junk in -1e3f64..1e3) {
        let masked = apply_mask(&series(30, 3), &MaskSpec::pointwise(0.4, seed)).unwrap().batch;
        let n = Normalizer::fit(&masked).unwrap();
        let back = n.denormalize_values(&n.normalize_values(&masked.values).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(masked.values.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        // Replace hidden entries with junk; statistics must not move.
        let mut v = masked.values.to_vec();
        for (x, &m) in v.iter_mut().zip(masked.mask.data()) {
            if m == 0.0 { *x = junk; }
        }
        let mut raw = masked.clone();
        raw.values = Tensor::from_vec(v, masked.values.shape()).unwrap();
        prop_assert_eq!(Normalizer::fit(&raw).unwrap(), n);
    }
}
