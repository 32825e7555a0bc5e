use proptest::prelude::*;
use uct::tensor::{gaussian_label, hann1d, hann2d, map_stats, xcorr2d_valid};
use uct::DenseMap;

fn oracle(x: &DenseMap, f: &DenseMap) -> Vec<f64> {
    let (oh, ow) = (x.height() - f.height() + 1, x.width() - f.width() + 1);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for l in 0..x.channels() {
                for u in 0..f.height() {
                    for v in 0..f.width() {
                        acc += x.get(l, i + u, j + v) * f.get(l, u, v);
                    }
                }
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

fn map_strategy(c: usize, h: usize, w: usize) -> impl Strategy<Value = DenseMap> {
    prop::collection::vec(-1.0f64..1.0, c * h * w).prop_map(move |d| DenseMap::from_vec(c, h, w, d).unwrap())
}

fn pair() -> impl Strategy<Value = (DenseMap, DenseMap)> {
    (1usize..=4, 1usize..=16, 1usize..=16)
        .prop_flat_map(|(c, h, w)| (Just(c), Just(h), Just(w), 1..=h, 1..=w))
        .prop_flat_map(|(c, h, w, fh, fw)| (map_strategy(c, h, w), map_strategy(c, fh, fw)))
}

proptest! {
    #[test]
    fn xcorr_matches_nested_loops((x, f) in pair()) {
        let r = xcorr2d_valid(&x, &f).unwrap();
        prop_assert_eq!(r.height(), x.height() - f.height() + 1);
        prop_assert_eq!(r.width(), x.width() - f.width() + 1);
        for (a, b) in r.data().iter().zip(oracle(&x, &f)) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn xcorr_is_linear_in_both_arguments((x, f) in pair(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let x2 = x.map(|v| v * v - 0.3);
        let f2 = f.map(|v| 0.5 - v);
        let mut combo = x.scaled(alpha);
        combo.add_scaled(beta, &x2).unwrap();
        let lhs = xcorr2d_valid(&combo, &f).unwrap();
        let mut rhs = xcorr2d_valid(&x, &f).unwrap().scaled(alpha);
        rhs.add_scaled(beta, &xcorr2d_valid(&x2, &f).unwrap()).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
        let mut fcombo = f.scaled(alpha);
        fcombo.add_scaled(beta, &f2).unwrap();
        let lhs = xcorr2d_valid(&x, &fcombo).unwrap();
        let mut rhs = xcorr2d_valid(&x, &f).unwrap().scaled(alpha);
        rhs.add_scaled(beta, &xcorr2d_valid(&x, &f2).unwrap()).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn hann_is_symmetric_and_bounded(h in 1usize..40, w in 1usize..40) {
        let m = hann2d(h, w).unwrap();
        for i in 0..h {
            for j in 0..w {
                let v = m.get(0, i, j);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!((v - m.get(0, h - 1 - i, j)).abs() < 1e-12);
                prop_assert!((v - m.get(0, i, w - 1 - j)).abs() < 1e-12);
            }
        }
        let row = hann1d(w);
        prop_assert_eq!(row.len(), w);
    }

    #[test]
    fn gaussian_label_peaks_at_center(h in 3usize..30, w in 3usize..30, s in 1.0f64..4.0) {
        let (ci, cj) = (h / 2, w / 2);
        let g = gaussian_label(h, w, (ci as f64, cj as f64), (s, s)).unwrap();
        let stats = map_stats(&g).unwrap();
        prop_assert_eq!(stats.max_pos, (ci, cj));
        prop_assert!((stats.max_value - 1.0).abs() < 1e-12);
        prop_assert!(g.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        for i in ci + 1..h {
            prop_assert!(g.get(0, i, cj) < g.get(0, i - 1, cj));
        }
        for i in 0..ci {
            prop_assert!(g.get(0, i, cj) < g.get(0, i + 1, cj));
        }
        for j in cj + 1..w {
            prop_assert!(g.get(0, ci, j) < g.get(0, ci, j - 1));
        }
        for j in 0..cj {
            prop_assert!(g.get(0, ci, j) < g.get(0, ci, j + 1));
        }
    }

    #[test]
    fn map_stats_agrees_with_direct_computation(m in (1usize..8, 2usize..8).prop_flat_map(|(h, w)| map_strategy(1, h, w))) {
        let s = map_stats(&m).unwrap();
        let d = m.data();
        let best = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = d.iter().position(|&v| v == best).unwrap();
        prop_assert_eq!(s.max_value, best);
        prop_assert_eq!(s.max_pos, (first / m.width(), first % m.width()));
        prop_assert_eq!(s.min_value, d.iter().cloned().fold(f64::INFINITY, f64::min));
        let rest: f64 = d.iter().enumerate().filter(|(k, _)| *k != first).map(|(_, v)| v).sum();
        prop_assert!((s.mean_excluding_max - rest / (d.len() - 1) as f64).abs() < 1e-12);
        let total: f64 = d.iter().sum();
        prop_assert!((s.max_value + s.mean_excluding_max * (d.len() - 1) as f64 - total).abs() < 1e-9);
    }
}

#[test]
fn xcorr_rejects_mismatched_shapes() {
    let x = DenseMap::zeros(2, 5, 5);
    assert!(xcorr2d_valid(&x, &DenseMap::zeros(3, 2, 2)).is_err());
    assert!(xcorr2d_valid(&x, &DenseMap::zeros(2, 6, 2)).is_err());
}

#[test]
fn map_stats_needs_two_cells() {
    assert!(map_stats(&DenseMap::zeros(1, 1, 1)).is_err());
    assert!(map_stats(&DenseMap::zeros(2, 2, 2)).is_err());
}
