mod common;

use std::io::Write;

use asgmamba::data::{
    chronological_split, load_csv, make_windows, naive_baseline_forecast, synth_generate, CsvOptions, RawSeries,
    Split, SplitRanges, SplitSpec, SynthKind, SYNTH_PERIOD,
};
use asgmamba::{Error, Tensor};
use proptest::prelude::*;

fn csv_file(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

fn counting_series(len: usize, m: usize) -> RawSeries {
    let values = (0..len * m).map(|i| i as f64).collect();
    RawSeries::new(values, (0..m).map(|i| format!("c{i}")).collect()).unwrap()
}

fn train_only(len: usize) -> SplitRanges {
    SplitRanges { train: 0..len, val: len..len, test: len..len }
}

#[test]
fn loads_header_and_datetime_columns() {
    let f = csv_file("a,b\n1,2\n3,4\n5,6\n");
    let s = load_csv(f.path(), CsvOptions::default()).unwrap();
    assert_eq!((s.len(), s.variates()), (3, 2));
    assert_eq!(s.names, ["a", "b"]);

    let mut text = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
    for h in 0..5 {
        text.push_str(&format!("2016-07-01 0{h}:00:00,1,2,3,4,5,6,{h}\n"));
    }
    let s = load_csv(csv_file(&text).path(), CsvOptions::default()).unwrap();
    assert_eq!(s.variates(), 7);
    assert_eq!(s.names[6], "OT");
    assert_eq!(s.timestamps.as_ref().unwrap()[2], "2016-07-01 02:00:00");
    assert_eq!(s.row(4)[6], 4.0);

    let s = load_csv(csv_file("1,2\n3,4\n").path(), CsvOptions::default()).unwrap();
    assert_eq!(s.names, ["v0", "v1"]);
}

#[test]
fn bad_cells_report_their_location() {
    let err = load_csv(csv_file("1,abc\n").path(), CsvOptions::default()).unwrap_err();
    match err {
        Error::Csv { row, column, .. } => assert_eq!((row, column), (1, 2)),
        e => panic!("unexpected {e}"),
    }
    let err = load_csv(csv_file("a,b\n1,2\n3\n").path(), CsvOptions::default()).unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
    assert!(matches!(load_csv("/no/such/file.csv", CsvOptions::default()), Err(Error::Io(_))));
}

#[test]
fn split_arithmetic() {
    let r = chronological_split(100, &SplitSpec::default()).unwrap();
    assert_eq!((r.train, r.val, r.test), (0..70, 70..80, 80..100));
    let r = chronological_split(17420, &SplitSpec::default()).unwrap();
    assert_eq!((r.train, r.val, r.test), (0..12194, 12194..13936, 13936..17420));
    let bad: SplitSpec = "0.7,0.3,0.2".parse().unwrap();
    assert!(chronological_split(100, &bad).is_err());
    let ett = chronological_split(17420, &"ett-hourly".parse().unwrap()).unwrap();
    assert_eq!((ett.train, ett.val, ett.test), (0..8640, 8640..11520, 11520..14400));
}

#[test]
fn window_counts() {
    let s = counting_series(10, 1);
    let ranges = train_only(10);
    assert_eq!(make_windows(&s, &ranges, 4, 2).unwrap().train.len(), 5);
    let s = counting_series(17420, 1);
    let ranges = chronological_split(17420, &SplitSpec::default()).unwrap();
    let w = make_windows(&s, &ranges, 96, 96).unwrap();
    assert_eq!(w.train.len(), 12003);
    assert_eq!(w.val.len(), 1742 - 191);
    let short = chronological_split(20, &SplitSpec::default()).unwrap();
    assert!(make_windows(&counting_series(20, 1), &short, 16, 4).is_err());
}

#[test]
fn windows_stay_inside_their_split() {
    let (len, m) = (300, 2);
    let s = counting_series(len, m);
    let ranges = chronological_split(len, &SplitSpec::default()).unwrap();
    let w = make_windows(&s, &ranges, 24, 6).unwrap();
    for split in [Split::Train, Split::Val, Split::Test] {
        let ds = w.get(split);
        let r = ranges.get(split);
        for i in 0..ds.len() {
            let span = ds.span(i);
            assert!(span.start >= r.start && span.end <= r.end, "{} window {i}", split.name());
            assert_eq!(span.len(), 30);
            let mut x = ds.input(i).to_vec();
            let mut y = ds.target(i).to_vec();
            ds.scaler.inverse(&mut x);
            ds.scaler.inverse(&mut y);
            let first_target = y[0];
            let last_input = x[x.len() - m];
            assert!((first_target - last_input - m as f64).abs() < 1e-6);
            assert!((x[0] - (span.start * m) as f64).abs() < 1e-6);
        }
    }
}

#[test]
fn scaler_comes_from_train_only() {
    let s = counting_series(200, 3);
    let ranges = chronological_split(200, &SplitSpec::default()).unwrap();
    let w = make_windows(&s, &ranges, 8, 4).unwrap();
    let train_col0: Vec<f64> = (0..140).map(|t| s.row(t)[0]).collect();
    let mean = train_col0.iter().sum::<f64>() / 140.0;
    for ds in [&w.train, &w.val, &w.test] {
        assert_eq!(ds.scaler.source, Split::Train);
        assert!((ds.scaler.mean[0] - mean).abs() < 1e-9);
    }
}

#[test]
fn constant_variate_standardizes_to_zero() {
    let values: Vec<f64> = (0..40).flat_map(|t| [3.5, t as f64]).collect();
    let s = RawSeries::new(values, vec!["k".into(), "t".into()]).unwrap();
    let ranges = train_only(40);
    let w = make_windows(&s, &ranges, 8, 2).unwrap();
    assert_eq!(w.train.scaler.std[0], 1e-8);
    let (x, _) = w.train.batch(&[0, 5]);
    assert!(x.data().iter().step_by(2).all(|&v| v == 0.0));
}

#[test]
fn noise_power_at_zero_db() {
    let n = 100_000;
    let s = synth_generate(SynthKind::SinePlusNoise, n, 1, 0.0, 3).unwrap();
    let (mut sig, mut noise) = (0.0, 0.0);
    for t in 0..n {
        let clean = (2.0 * std::f64::consts::PI * t as f64 / SYNTH_PERIOD as f64).sin();
        sig += clean * clean;
        noise += (s.row(t)[0] - clean).powi(2);
    }
    let ratio = sig / noise;
    assert!((0.9..=1.1).contains(&ratio), "ratio {ratio}");
}

#[test]
fn synthetic_kinds() {
    let s = synth_generate(SynthKind::Sine, 48, 1, 10.0, 0).unwrap();
    assert_eq!(s.len(), 48);
    let col = s.column(0);
    assert!((col.iter().copied().fold(f64::MIN, f64::max) - 1.0).abs() < 1e-12);
    for t in 0..24 {
        assert!((col[t] - col[t + 24]).abs() < 1e-12);
    }
    let a = synth_generate(SynthKind::Noise, 64, 2, 0.0, 9).unwrap();
    let b = synth_generate(SynthKind::Noise, 64, 2, 0.0, 9).unwrap();
    assert_eq!(a.values(), b.values());
    assert_ne!(a.values(), synth_generate(SynthKind::Noise, 64, 2, 0.0, 10).unwrap().values());
    let mixed = synth_generate(SynthKind::MixedChannels, 240, 5, 0.0, 1).unwrap();
    for m in 0..3 {
        let c = mixed.column(m);
        assert!((0..216).all(|t| (c[t] - c[t + 24]).abs() < 1e-12), "variate {m}");
    }
    let noisy = mixed.column(4);
    assert!((0..216).any(|t| (noisy[t] - noisy[t + 24]).abs() > 1e-3));
    assert!(synth_generate(SynthKind::MixedChannels, 10, 1, 0.0, 0).is_err());
}

#[test]
fn naive_baseline() {
    let x = Tensor::new(vec![2, 2], vec![1.0, 1.0, 5.0, -2.0]).unwrap();
    let y = naive_baseline_forecast(&x, 3).unwrap();
    assert_eq!(y.data(), &[5.0, -2.0, 5.0, -2.0, 5.0, -2.0]);
    assert_eq!(naive_baseline_forecast(&x, 1).unwrap().data(), &[5.0, -2.0]);
}

#[test]
fn naive_mse_on_a_sine_cycle() {
    // over one full cycle the mean of sin is 0 and the mean of sin² is ½,
    // so repeating the last value c costs ½ + c²
    let s = synth_generate(SynthKind::Sine, 24 * 8, 1, 0.0, 0).unwrap();
    let col = s.column(0);
    let (l, t) = (48, 24);
    for start in 0..col.len() - l - t {
        let input = Tensor::new(vec![l, 1], col[start..start + l].to_vec()).unwrap();
        let pred = naive_baseline_forecast(&input, t).unwrap();
        let truth = &col[start + l..start + l + t];
        let mse: f64 = pred.data().iter().zip(truth).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / t as f64;
        let c = col[start + l - 1];
        assert!((mse - (0.5 + c * c)).abs() < 1e-12, "start {start}");
    }
}

proptest! {
    #[test]
    fn splits_partition_a_prefix(len in 1usize..5000, a in 0.05f64..0.9, b in 0.01f64..0.5) {
        prop_assume!(a + b < 1.0);
        let spec = SplitSpec::Ratios { train: a, val: b, test: 1.0 - a - b };
        let r = match chronological_split(len, &spec) {
            Ok(r) => r,
            Err(_) => {
                let fl = |r: f64| (r * len as f64 + 1e-9).floor() as usize;
                prop_assert!(fl(a) == 0 || fl(b) == 0 || fl(a) + fl(b) >= len);
                return Ok(());
            }
        };
        prop_assert_eq!(r.train.start, 0);
        prop_assert_eq!(r.train.end, r.val.start);
        prop_assert_eq!(r.val.end, r.test.start);
        prop_assert_eq!(r.test.end, len);
        prop_assert_eq!(r.train.end, ((a * len as f64) + 1e-9).floor() as usize);
    }

    #[test]
    fn window_count_formula(len in 2usize..200, l in 1usize..40, t in 1usize..20) {
        let s = counting_series(len, 1);
        let ranges = train_only(len);
        match make_windows(&s, &ranges, l, t) {
            Ok(w) => prop_assert_eq!(w.train.len(), len + 1 - l - t),
            Err(_) => prop_assert!(len < l + t),
        }
    }

    #[test]
    fn standardize_round_trip(seed in any::<u64>(), scale in 0.01f64..1e3) {
        let s = synth_generate(SynthKind::Noise, 50, 3, 0.0, seed).unwrap();
        let values: Vec<f64> = s.values().iter().map(|v| v * scale + 7.0).collect();
        let s = RawSeries::new(values.clone(), s.names.clone()).unwrap();
        let ranges = chronological_split(50, &SplitSpec::default()).unwrap();
        let scaler = make_windows(&s, &ranges, 4, 2).unwrap().train.scaler;
        let mut round = values.clone();
        scaler.transform(&mut round);
        scaler.inverse(&mut round);
        for (u, v) in round.iter().zip(&values) {
            prop_assert!((u - v).abs() <= 1e-9 * v.abs().max(1.0));
        }
    }
}
