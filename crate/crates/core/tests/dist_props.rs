//! Property tests and independent oracles for the distribution algebra.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsrl_core::dist::{wasserstein, ReturnDistribution};

fn arb_dist() -> impl Strategy<Value = ReturnDistribution> {
    prop::collection::vec((-50.0f64..50.0, 0.05f64..1.0), 1..8)
        .prop_map(|atoms| ReturnDistribution::from_atoms(atoms).expect("positive mass"))
}

proptest! {
    #[test]
    fn normalize_is_idempotent(raw in prop::collection::vec((-50.0f64..50.0, 0.0f64..1.0), 1..10)) {
        prop_assume!(raw.iter().map(|&(_, p)| p).sum::<f64>() > 1e-6);
        let once = ReturnDistribution::from_atoms(raw).unwrap();
        let twice = ReturnDistribution::from_atoms(
            once.atoms().iter().map(|a| (a.value, a.prob)),
        ).unwrap();
        prop_assert_eq!(once.len(), twice.len());
        for (a, b) in once.atoms().iter().zip(twice.atoms()) {
            prop_assert!((a.value - b.value).abs() <= 1e-12);
            prop_assert!((a.prob - b.prob).abs() <= 1e-12);
        }
    }

    #[test]
    fn convolution_commutes_and_associates(d1 in arb_dist(), d2 in arb_dist(), d3 in arb_dist()) {
        let ab = d1.convolve(&d2);
        let ba = d2.convolve(&d1);
        prop_assert_eq!(ab.len(), ba.len());
        for (x, y) in ab.atoms().iter().zip(ba.atoms()) {
            prop_assert!((x.value - y.value).abs() <= 1e-12);
            prop_assert!((x.prob - y.prob).abs() <= 1e-12);
        }
        let left = d1.convolve(&d2).convolve(&d3);
        let right = d1.convolve(&d2.convolve(&d3));
        prop_assert!(wasserstein(&left, &right, 1.0).unwrap() <= 1e-9);
    }

    #[test]
    fn affine_mean_is_exact(d in arb_dist(), scale in 0.0f64..3.0, shift in -10.0f64..10.0) {
        let out = d.affine(scale, shift).unwrap();
        prop_assert!((out.mean() - (scale * d.mean() + shift)).abs() <= 1e-9);
    }

    #[test]
    fn mixture_mean_is_weighted_mean(d1 in arb_dist(), d2 in arb_dist(), w in 0.0f64..1.0) {
        let m = ReturnDistribution::mix(&[(w, &d1), (1.0 - w, &d2)]).unwrap();
        let expect = w * d1.mean() + (1.0 - w) * d2.mean();
        prop_assert!((m.mean() - expect).abs() <= 1e-9);
    }

    #[test]
    fn wasserstein_metric_axioms(d1 in arb_dist(), d2 in arb_dist(), d3 in arb_dist()) {
        for p in [1.0, 2.0] {
            let ab = wasserstein(&d1, &d2, p).unwrap();
            let ba = wasserstein(&d2, &d1, p).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-9);
            let ac = wasserstein(&d1, &d3, p).unwrap();
            let cb = wasserstein(&d3, &d2, p).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9);
        }
    }

    #[test]
    fn quantile_and_cdf_are_consistent(d in arb_dist()) {
        for i in 1..1000usize {
            let u = i as f64 / 1000.0;
            let q = d.quantile(u).unwrap();
            prop_assert!(d.cdf(q) >= u - 1e-9);
        }
    }

    #[test]
    fn w1_equals_cdf_area(d1 in arb_dist(), d2 in arb_dist()) {
        // Independent route: integrate |F1 - F2| piecewise over the union
        // of support points (exact for step CDFs).
        let mut xs: Vec<f64> = d1
            .atoms()
            .iter()
            .chain(d2.atoms())
            .map(|a| a.value)
            .collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let mut area = 0.0;
        for w in xs.windows(2) {
            area += (d1.cdf(w[0]) - d2.cdf(w[0])).abs() * (w[1] - w[0]);
        }
        let metric = wasserstein(&d1, &d2, 1.0).unwrap();
        prop_assert!((metric - area).abs() <= 1e-9, "{} vs {}", metric, area);
    }

    #[test]
    fn prune_error_is_bounded_by_range_over_atoms(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(80..220);
        let atoms: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(-30.0..30.0), rng.random_range(0.01..1.0)))
            .collect();
        let d = ReturnDistribution::from_atoms(atoms).unwrap();
        prop_assume!(d.len() > 64);
        let (pruned, err) = d.prune(64).unwrap();
        let range = d.max_value() - d.min_value();
        prop_assert!(err <= range / 64.0 + 1e-9, "err {} range {}", err, range);
        prop_assert!((pruned.mean() - d.mean()).abs() <= err + 1e-9);
    }
}

#[test]
fn convolve_mean_additivity_against_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let d1 = ReturnDistribution::from_atoms([(-3.0, 0.3), (1.0, 0.5), (8.0, 0.2)]).unwrap();
    let d2 = ReturnDistribution::from_atoms([(-1.0, 0.6), (4.0, 0.4)]).unwrap();
    let conv = d1.convolve(&d2);

    let n = 1_000_000usize;
    let mut acc = 0.0;
    for _ in 0..n {
        acc += d1.sample(&mut rng) + d2.sample(&mut rng);
    }
    let mc_mean = acc / n as f64;
    assert!((conv.mean() - (d1.mean() + d2.mean())).abs() < 1e-12);
    assert!((conv.mean() - mc_mean).abs() < 0.05, "{} vs {}", conv.mean(), mc_mean);
}

#[test]
fn empirical_cdf_obeys_dkw_bound() {
    let d = ReturnDistribution::from_atoms([(-10.0, 0.1), (0.0, 0.35), (5.0, 0.55)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 1_000_000usize;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        samples.push(d.sample(&mut rng));
    }
    let empirical = ReturnDistribution::from_samples(&samples).unwrap();
    // DKW with alpha = 1e-6
    let bound = ((2.0f64 / 1e-6).ln() / (2.0 * n as f64)).sqrt();
    for a in d.atoms() {
        let diff = (empirical.cdf(a.value) - d.cdf(a.value)).abs();
        assert!(diff <= bound, "cdf gap {diff} at {} exceeds {bound}", a.value);
    }
}

#[test]
fn empirical_mean_of_skewed_mixture() {
    let d = ReturnDistribution::from_atoms([(100.0, 0.9), (-10.0, 0.1)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 1_000_000usize;
    let mut acc = 0.0;
    for _ in 0..n {
        acc += d.sample(&mut rng);
    }
    assert!((acc / n as f64 - 89.0).abs() < 0.5);
}
