use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shortcut_audit::stats::{bootstrap_ci, holm_adjust, kendall, spearman, wilcoxon_signed_rank, Statistic};

fn nonzero_diffs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![
            (1i32..6).prop_map(f64::from),
            (-5i32..0).prop_map(f64::from),
            -3.0f64..3.0
        ],
        5..40,
    )
    .prop_filter("need five non-zero", |d| d.iter().filter(|&&x| x != 0.0).count() >= 5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn holm_sits_between_raw_and_bonferroni(ps in prop::collection::vec(0.0f64..=1.0, 1..12)) {
        let m = ps.len() as f64;
        let adj = holm_adjust(&ps);
        for (p, h) in ps.iter().zip(&adj) {
            prop_assert!(h >= p);
            prop_assert!(*h <= (m * p).min(1.0));
        }
        let mut order: Vec<usize> = (0..ps.len()).collect();
        order.sort_by(|&a, &b| ps[a].total_cmp(&ps[b]));
        prop_assert!(order.windows(2).all(|w| adj[w[0]] <= adj[w[1]]));
    }

    #[test]
    fn wilcoxon_ignores_scale_and_sign(d in nonzero_diffs(), c in 0.01f64..100.0) {
        let p = wilcoxon_signed_rank(&d).unwrap();
        let scaled: Vec<f64> = d.iter().map(|x| x * c).collect();
        let flipped: Vec<f64> = d.iter().map(|x| -x).collect();
        prop_assert!((wilcoxon_signed_rank(&scaled).unwrap() - p).abs() < 1e-12);
        prop_assert!((wilcoxon_signed_rank(&flipped).unwrap() - p).abs() < 1e-12);
        prop_assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn rank_correlations_ignore_monotone_transforms(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let x2: Vec<f64> = x.iter().map(|v| (v / 3.0).exp()).collect();
        let y2: Vec<f64> = y.iter().map(|v| v * v * v + 2.0 * v).collect();
        if let (Ok(a), Ok(b)) = (spearman(&x, &y), spearman(&x2, &y2)) {
            prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
        if let (Ok(a), Ok(b)) = (kendall(&x, &y), kendall(&x2, &y2)) {
            prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
    }
}

/// Noisy increasing data; the interval should tighten with more points.
#[test]
fn bootstrap_interval_narrows_with_n() {
    let width = |n: usize, rep: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-8.0..8.0)).collect();
        let ci = bootstrap_ci(&x, &y, Statistic::Spearman, 1000, rep).unwrap();
        ci.hi - ci.lo
    };
    let (mut small, mut large, mut narrower) = (0.0, 0.0, 0);
    for rep in 0..20 {
        let (a, b) = (width(10, rep), width(40, rep));
        small += a;
        large += b;
        narrower += (b < a) as usize;
    }
    assert!(large < small, "mean width {large} at n=40 vs {small} at n=10");
    assert!(narrower >= 15, "only {narrower}/20 repetitions narrowed");
}
