use ndarray::Array2;
use proptest::prelude::*;
use robustcast_core::data::{load_csv, read_csv, save_csv, split, windows, SplitRatios, TimeSeriesFrame};
use robustcast_core::metrics::{self, MetricOptions};

fn frame(n: usize, len: usize) -> TimeSeriesFrame {
    let values = Array2::from_shape_fn((n, len), |(c, t)| (t as f64 * 0.37 + c as f64).sin() * 1e3 / 7.0);
    TimeSeriesFrame::new((0..n).map(|c| format!("ch{c}")).collect(), values).unwrap()
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    let mut f = frame(3, 50);
    f.values[[1, 4]] = 1e-300;
    f.values[[2, 7]] = -123456789.123456789;
    save_csv(&f, &path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back.values, f.values);
    assert_eq!(back.channels, f.channels);
    assert_eq!(back.index, f.index);
}

#[test]
fn csv_with_timestamps() {
    let text = "date,OT,HUFL\n2016-07-01 00:00:00,30.5,5.8\n2016-07-01 01:00:00,,5.7\n";
    let f = read_csv(text.as_bytes()).unwrap();
    assert_eq!(f.channels, vec!["OT", "HUFL"]);
    assert_eq!(f.values[[0, 1]], 0.0);
    assert_eq!(f.nan_filled, 1);
    assert_eq!(f.index[1], "2016-07-01 01:00:00");
}

#[test]
fn metric_fixtures() {
    let opts = MetricOptions::default();
    let y = Array2::from_shape_vec((1, 4), vec![1.0, -1.0, 0.5, 2.0]).unwrap();
    let m = metrics::metrics(&y, &y, Some(&y), &opts).unwrap();
    assert_eq!((m.mse, m.mae, m.msmape, m.mase), (0.0, 0.0, 0.0, Some(0.0)));
    let p = Array2::from_shape_vec((1, 2), vec![2.0, 1.0]).unwrap();
    let t = Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap();
    let ctx = Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let m = metrics::metrics(&p, &t, Some(&ctx), &opts).unwrap();
    assert_eq!(m.mse, 2.0);
    assert_eq!(m.mae, 1.0);
    assert_eq!(m.mase, Some(1.0));
    assert_eq!(m.msmape, 0.5 * 400.0 / 2.1);
    let flat = Array2::from_elem((1, 4), 3.0);
    assert_eq!(metrics::metrics(&p, &t, Some(&flat), &opts).unwrap().mase, None);
}

#[test]
fn table_split_ratios() {
    let f = frame(1, 17420);
    let (a, b, c) = split(&f, &SplitRatios::SIX_TWO_TWO, 96 + 720).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (10452, 3484, 3484));
    let (a, b, c) = split(&f, &SplitRatios::SEVEN_ONE_TWO, 0).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (12194, 1742, 3484));
}

proptest! {
    #[test]
    fn splits_are_chronological_and_complete(len in 10usize..500, which in 0usize..2) {
        let ratios = [SplitRatios::SIX_TWO_TWO, SplitRatios::SEVEN_ONE_TWO][which];
        let f = frame(2, len);
        let (a, b, c) = split(&f, &ratios, 0).unwrap();
        prop_assert_eq!(a.len() + b.len() + c.len(), len);
        prop_assert_eq!(a.len(), (len as f64 * ratios.train + 1e-9).floor() as usize);
        let joined = TimeSeriesFrame::concat(&[&a, &b, &c]).unwrap();
        prop_assert_eq!(joined.values, f.values);
        let idx = |fr: &TimeSeriesFrame| fr.index.iter().map(|s| s.parse::<usize>().unwrap()).collect::<Vec<_>>();
        if let (Some(x), Some(y)) = (idx(&a).last().copied(), idx(&b).first().copied()) { prop_assert!(x < y); }
        if let (Some(x), Some(y)) = (idx(&b).last().copied(), idx(&c).first().copied()) { prop_assert!(x < y); }
    }

    #[test]
    fn window_count_has_no_drop_last(len in 1usize..300, t in 1usize..50, f in 1usize..30, stride in 1usize..5) {
        let w = windows(&frame(1, len), t, f, stride);
        let expected = if len >= t + f { (len - t - f) / stride + 1 } else { 0 };
        prop_assert_eq!(w.len(), expected);
        for win in &w {
            prop_assert_eq!(win.input[[0, t - 1]], frame(1, len).values[[0, win.origin + t - 1]]);
            prop_assert_eq!(win.target[[0, 0]], frame(1, len).values[[0, win.origin + t]]);
        }
    }

    #[test]
    fn metrics_are_non_negative(v in prop::collection::vec(-1e3f64..1e3, 2..40)) {
        let half = v.len() / 2;
        let (p, y) = (&v[..half], &v[half..2 * half]);
        let mse = metrics::mse(p, y).unwrap();
        let mae = metrics::mae(p, y).unwrap();
        prop_assert!(mse >= 0.0 && mae >= 0.0);
        prop_assert_eq!(mse == 0.0, mae == 0.0);
        prop_assert!(metrics::msmape(p, y, 0.1).unwrap() >= 0.0);
    }
}
