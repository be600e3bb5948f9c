use planet_core::objectives::*;
use planet_core::{BinMask, Grid};
use proptest::prelude::*;

fn mask_strategy(side: usize) -> impl Strategy<Value = BinMask> {
    (prop::collection::vec(any::<bool>(), side * side), 0.0..1.0f64).prop_map(move |(bits, density)| {
        let data = bits
            .iter()
            .enumerate()
            .map(|(i, &b)| u8::from(b && (i as f64 * 0.618_033).fract() < density + 0.2))
            .collect();
        Grid::from_vec(side, side, data).unwrap()
    })
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut i = i;
    while parent[i] != r {
        let next = parent[i];
        parent[i] = r;
        i = next;
    }
    r
}

/// Union-find over forward neighbours.
fn cc_union_find(m: &BinMask, eight: bool) -> usize {
    let (h, w) = m.dims();
    let mut parent: Vec<usize> = (0..h * w).collect();
    let on = |r: usize, c: usize| m.get(r, c) != 0;
    for r in 0..h {
        for c in 0..w {
            if !on(r, c) {
                continue;
            }
            let mut nbrs = vec![];
            if c + 1 < w {
                nbrs.push((r, c + 1));
            }
            if r + 1 < h {
                nbrs.push((r + 1, c));
                if eight && c + 1 < w {
                    nbrs.push((r + 1, c + 1));
                }
                if eight && c > 0 {
                    nbrs.push((r + 1, c - 1));
                }
            }
            for (nr, nc) in nbrs {
                if on(nr, nc) {
                    let (a, b) = (find(&mut parent, r * w + c), find(&mut parent, nr * w + nc));
                    parent[a] = b;
                }
            }
        }
    }
    (0..h * w)
        .filter(|&i| m.data()[i] != 0 && find(&mut parent, i) == i)
        .count()
}

proptest! {
    #[test]
    fn hard_iou_matches_pixel_counts(a in mask_strategy(16), b in mask_strategy(16)) {
        let (mut inter, mut uni) = (0usize, 0usize);
        for (x, y) in a.data().iter().zip(b.data()) {
            inter += usize::from(*x != 0 && *y != 0);
            uni += usize::from(*x != 0 || *y != 0);
        }
        let expected = if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
        prop_assert_eq!(hard_iou(&a, &b).unwrap(), expected);
        prop_assert_eq!(hard_iou(&a, &b).unwrap(), hard_iou(&b, &a).unwrap());
    }

    #[test]
    fn component_counts_match_union_find(m in mask_strategy(20)) {
        prop_assert_eq!(count_cc(&m, Connectivity::Four), cc_union_find(&m, false));
        prop_assert_eq!(count_cc(&m, Connectivity::Eight), cc_union_find(&m, true));
        prop_assert!(count_cc(&m, Connectivity::Eight) <= count_cc(&m, Connectivity::Four));
    }

    #[test]
    fn loss_matches_per_pixel_sums(
        probs in prop::collection::vec(0.0..1.0f64, 64),
        bits in prop::collection::vec(any::<bool>(), 64),
    ) {
        let p = Grid::from_vec(8, 8, probs.clone()).unwrap();
        let y = Grid::from_vec(8, 8, bits.iter().map(|&b| u8::from(b)).collect()).unwrap();
        let mut bce = 0.0;
        let (mut i, mut sp, mut sy) = (0.0, 0.0, 0.0);
        for (&pv, &b) in probs.iter().zip(&bits) {
            let c = pv.clamp(1e-7, 1.0 - 1e-7);
            let t = if b { 1.0 } else { 0.0 };
            bce -= t * c.ln() + (1.0 - t) * (1.0 - c).ln();
            i += pv * t;
            sp += pv;
            sy += t;
        }
        let expected = bce / 64.0 + 1.0 - (i + 1e-7) / (sp + sy - i + 1e-7);
        let got = combined_loss(&p, &y).unwrap().total;
        prop_assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_central_differences(
        probs in prop::collection::vec(0.05..0.95f64, 16),
        bits in prop::collection::vec(any::<bool>(), 16),
    ) {
        let y = Grid::from_vec(4, 4, bits.iter().map(|&b| u8::from(b)).collect()).unwrap();
        let p = Grid::from_vec(4, 4, probs.clone()).unwrap();
        let grad = combined_loss_grad(&p, &y).unwrap();
        let h = 1e-6;
        for k in 0..16 {
            let mut up = probs.clone();
            let mut down = probs.clone();
            up[k] += h;
            down[k] -= h;
            let f = |v: Vec<f64>| combined_loss(&Grid::from_vec(4, 4, v).unwrap(), &y).unwrap().total;
            let fd = (f(up) - f(down)) / (2.0 * h);
            let rel = (grad[k] - fd).abs() / fd.abs().max(1e-3);
            prop_assert!(rel < 1e-4, "pixel {}: analytic {} fd {}", k, grad[k], fd);
        }
    }

    #[test]
    fn t_test_matches_hand_formula(d in prop::collection::vec(-1.0..1.0f64, 3..30)) {
        let ys = vec![0.0; d.len()];
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        let r = paired_t_test(&d, &ys).unwrap();
        prop_assert!((r.statistic - mean / (sd / n.sqrt())).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&r.p_value));
    }
}

/// Two-sided exact p-value for `min(W+, W−)` by enumerating every sign pattern.
fn enumerated_p(d: &[f64]) -> f64 {
    let mut mags: Vec<(f64, usize)> = d.iter().map(|v| v.abs()).zip(0..).collect();
    mags.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; d.len()];
    for (r, (_, i)) in mags.iter().enumerate() {
        ranks[*i] = r as f64 + 1.0;
    }
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let observed = w_plus.min(total - w_plus);
    let n = d.len();
    let extreme = (0u32..1 << n)
        .filter(|signs| {
            let wp: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
            wp.min(total - wp) <= observed + 1e-9
        })
        .count();
    extreme as f64 / (1u64 << n) as f64
}

#[test]
fn wilcoxon_matches_enumeration_on_small_samples() {
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for n in 1..=10 {
        for _ in 0..40 {
            let d: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0 + next() * 0.5) * if next() < 0.5 { -1.0 } else { 1.0 }).collect();
            let zeros = vec![0.0; n];
            let r = wilcoxon_signed_rank_with(&d, &zeros, WilcoxonMethod::Exact).unwrap();
            let expected = enumerated_p(&d);
            assert!((r.p_value - expected.min(1.0)).abs() < 1e-12, "n={n} d={d:?}: {} vs {expected}", r.p_value);
        }
    }
}

#[test]
fn wilcoxon_drops_zero_differences() {
    let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let ys = [1.0, 1.0, 1.0, 1.0, 1.0, 6.0];
    let r = wilcoxon_signed_rank(&xs, &ys).unwrap();
    assert_eq!(r.n_effective, 4);
    assert_eq!(r.w_minus, Some(0.0));
    assert!((r.p_value - 0.125).abs() < 1e-12);
}

#[test]
fn degenerate_tests_are_reported() {
    assert!(matches!(
        wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]),
        Err(planet_core::Error::Degenerate(_))
    ));
    assert!(matches!(
        paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]),
        Err(planet_core::Error::Degenerate(_))
    ));
}

#[test]
fn metrics_record_combines_iou_and_counts() {
    let truth: BinMask = Grid::from_fn(8, 8, |r, c| u8::from(r < 4 && c < 4));
    let pred: BinMask = Grid::from_fn(8, 8, |r, c| u8::from((r < 4 && c < 2) || (r > 5 && c > 5)));
    let m = MetricsRecord::compute("x", &pred, &truth, Connectivity::Eight).unwrap();
    assert_eq!(m.iou, 8.0 / 20.0);
    assert_eq!((m.cc_pred, m.cc_gt, m.cc_abs_diff), (2, 1, 1));
}

fn tie_free(n: usize) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(any::<bool>(), n), prop::collection::vec(0.0..0.9f64, n)).prop_map(|(signs, jitter)| {
        signs
            .iter()
            .zip(jitter)
            .enumerate()
            .map(|(i, (&neg, j))| (i as f64 + 1.0 + j) * if neg { -1.0 } else { 1.0 })
            .collect()
    })
}

proptest! {
    #[test]
    fn soft_iou_of_binary_prediction_is_hard_iou(a in mask_strategy(12), b in mask_strategy(12)) {
        let p = a.map(f64::from);
        let soft = 1.0 - soft_iou_loss(&p, &b).unwrap();
        prop_assert!((soft - hard_iou(&a, &b).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn half_probability_loss_is_ln2_plus_soft_iou(y in mask_strategy(8)) {
        let p = Grid::filled(8, 8, 0.5f64);
        let total = combined_loss(&p, &y).unwrap().total;
        let expected = std::f64::consts::LN_2 + soft_iou_loss(&p, &y).unwrap();
        prop_assert!((total - expected).abs() < 1e-12);
    }

    #[test]
    fn swapping_samples_negates_t(xs in prop::collection::vec(-1.0..1.0f64, 3..20), shift in -0.5..0.5f64) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * 0.5 + shift + (i as f64 * 0.37).sin()).collect();
        let a = paired_t_test(&xs, &ys).unwrap();
        let b = paired_t_test(&ys, &xs).unwrap();
        prop_assert!((a.statistic + b.statistic).abs() < 1e-12);
        prop_assert!((a.p_value - b.p_value).abs() < 1e-12);
    }

    #[test]
    fn negating_differences_swaps_signed_rank_sums(d in (1usize..30).prop_flat_map(tie_free)) {
        let zeros = vec![0.0; d.len()];
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        let a = wilcoxon_signed_rank(&d, &zeros).unwrap();
        let b = wilcoxon_signed_rank(&neg, &zeros).unwrap();
        prop_assert_eq!(a.w_plus, b.w_minus);
        prop_assert_eq!(a.w_minus, b.w_plus);
        prop_assert_eq!(a.p_value, b.p_value);
    }

    #[test]
    fn normal_approximation_tracks_exact_p(d in prop_oneof![Just(1usize), 4usize..=10].prop_flat_map(tie_free)) {
        let zeros = vec![0.0; d.len()];
        let exact = wilcoxon_signed_rank_with(&d, &zeros, WilcoxonMethod::Exact).unwrap();
        let normal = wilcoxon_signed_rank_with(&d, &zeros, WilcoxonMethod::Normal).unwrap();
        prop_assert!((exact.p_value - normal.p_value).abs() <= 0.05, "{} vs {}", exact.p_value, normal.p_value);
    }
}
