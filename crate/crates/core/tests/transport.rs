use gridmf::transport::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Best assignment by enumerating permutations; optimal for uniform equal-size measures.
fn brute_force(a: &[f64], b: &[f64], cost: impl Fn(f64, f64) -> f64) -> f64 {
    fn go(
        i: usize,
        a: &[f64],
        b: &[f64],
        used: &mut Vec<bool>,
        acc: f64,
        best: &mut f64,
        cost: &dyn Fn(f64, f64) -> f64,
    ) {
        if i == a.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                go(i + 1, a, b, used, acc + cost(a[i], b[j]), best, cost);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, a, b, &mut vec![false; b.len()], 0.0, &mut best, &cost);
    best / a.len() as f64
}

fn random_measure(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> DiscreteMeasure {
    let points: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..2.0)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let rest: f64 = w[1..].iter().sum();
    w[0] = 1.0 - rest;
    DiscreteMeasure::new(dim, points, w).unwrap()
}

fn exact(mu: &DiscreteMeasure, nu: &DiscreteMeasure, m: u32) -> f64 {
    w_discrete_exact(mu, nu, GroundMetric::Euclidean, m).unwrap().distance
}

#[test]
fn sorted_examples() {
    assert_eq!(w_sorted_1d(&[0.3, 0.1], &[0.1, 0.3], 1).unwrap(), 0.0);
    assert_eq!(w_sorted_1d(&[0.0], &[1.0], 1).unwrap(), 1.0);
    let a = [0.0, 1.0];
    let b = [0.5, 1.5];
    let brute = brute_force(&a, &b, |x, y| (x - y).abs());
    assert_eq!(brute, 0.5);
    assert!((w_sorted_1d(&a, &b, 1).unwrap() - brute).abs() < 1e-15);
    assert_eq!(w_sorted_1d(&[], &[1.0], 1).unwrap_err(), TransportError::Empty);
    assert!(matches!(w_sorted_1d(&[0.0], &[1.0], 3), Err(TransportError::BadOrder(3))));
}

#[test]
fn unequal_counts_use_quantile_refinement() {
    // Quantiles of {0, 1} against {0, 1, 2}: |0-0|·1/3 + |0-1|·1/6 + |1-1|·1/6 + |1-2|·1/3.
    let got = w_sorted_1d(&[0.0, 1.0], &[0.0, 1.0, 2.0], 1).unwrap();
    assert!((got - 0.5).abs() < 1e-15);
    let sq = w_sorted_1d(&[0.0, 1.0], &[0.0, 1.0, 2.0], 2).unwrap();
    assert!((sq - 0.5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn exact_examples() {
    let mu = DiscreteMeasure::uniform(1, vec![0.2, 0.9, 1.4]).unwrap();
    let p = w_discrete_exact(&mu, &mu, GroundMetric::Euclidean, 2).unwrap();
    assert_eq!(p.distance, 0.0);
    assert!(p.plan.iter().all(|&(i, j, _)| i == j));

    let a = DiscreteMeasure::uniform(1, vec![0.0, 1.0]).unwrap();
    let b = DiscreteMeasure::uniform(1, vec![0.8, 0.1]).unwrap();
    let brute = brute_force(&[0.0, 1.0], &[0.8, 0.1], |x, y| (x - y).abs());
    assert!((exact(&a, &b, 1) - brute).abs() < 1e-14);

    let point = DiscreteMeasure::uniform(1, vec![0.5]).unwrap();
    assert!((exact(&a, &point, 1) - 0.5).abs() < 1e-15);
}

#[test]
fn degenerate_inputs_are_rejected() {
    assert!(matches!(DiscreteMeasure::new(1, vec![0.0, 1.0], vec![1.0, 0.0]), Err(TransportError::BadWeights { .. })));
    let big = DiscreteMeasure::uniform(1, (0..600).map(|i| i as f64).collect()).unwrap();
    let small = DiscreteMeasure::uniform(1, vec![0.0]).unwrap();
    assert!(matches!(
        w_discrete_exact(&big, &small, GroundMetric::Euclidean, 1),
        Err(TransportError::Budget { atoms: 600, .. })
    ));
    assert!(w1_product_space(&big.clone(), &big, 1, false).is_err());
}

#[test]
fn one_dimensional_routes_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..200 {
        let n = rng.gen_range(1..=8);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mu = DiscreteMeasure::uniform(1, a.clone()).unwrap();
        let nu = DiscreteMeasure::uniform(1, b.clone()).unwrap();
        for m in [1, 2] {
            let sorted = w_sorted_1d(&a, &b, m).unwrap();
            assert!((sorted - exact(&mu, &nu, m)).abs() < 1e-9);
        }
        if n <= 6 {
            let brute = brute_force(&a, &b, |x, y| (x - y) * (x - y)).sqrt();
            assert!((w_sorted_1d(&a, &b, 2).unwrap() - brute).abs() < 1e-9);
        }
    }
}

#[test]
fn weighted_line_matches_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (na, nb) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let mu = random_measure(&mut rng, 1, na);
        let nu = random_measure(&mut rng, 1, nb);
        for m in [1, 2] {
            let w = w_weighted_1d(&mu.points, &mu.weights, &nu.points, &nu.weights, m).unwrap();
            assert!((w - exact(&mu, &nu, m)).abs() < 1e-9);
        }
    }
}

#[test]
fn product_space_shift_and_composite_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let mu = random_measure(&mut rng, 3, 4);
        let nu = random_measure(&mut rng, 3, 4);
        let est = w1_product_space(&mu, &nu, 1, false).unwrap();
        assert!(est.exact);
        let direct = w_discrete_exact(&mu, &nu, GroundMetric::Product { dim_x: 1 }, 1).unwrap().distance;
        assert!((est.value - direct).abs() < 1e-12);
    }
    let delta = 0.125;
    let mu = DiscreteMeasure::uniform(2, vec![0.1, 0.5, 0.3, 1.2, 0.6, 0.0]).unwrap();
    let shifted: Vec<f64> = mu.points.chunks(2).flat_map(|c| [c[0] + delta, c[1]]).collect();
    let nu = DiscreteMeasure::uniform(2, shifted).unwrap();
    assert!((w1_product_space(&mu, &nu, 1, false).unwrap().value - delta).abs() < 1e-12);
    assert_eq!(w1_product_space(&mu, &mu, 1, false).unwrap().value, 0.0);
}

#[test]
fn coupling_bound_examples() {
    let mu = DiscreteMeasure::uniform(2, vec![0.1, 0.4, 0.7, 1.1]).unwrap();
    assert_eq!(coupling_upper_bound(&mu, &mu, GroundMetric::Product { dim_x: 1 }).unwrap(), 0.0);
    // Same columns on both sides: the bound is the mean state gap.
    let nu = DiscreteMeasure::uniform(2, vec![0.1, 0.9, 0.7, 0.8]).unwrap();
    let bound = coupling_upper_bound(&mu, &nu, GroundMetric::Product { dim_x: 1 }).unwrap();
    assert!((bound - (0.5 + 0.3) / 2.0).abs() < 1e-15);
    let three = DiscreteMeasure::uniform(2, vec![0.0; 6]).unwrap();
    assert!(matches!(coupling_upper_bound(&mu, &three, GroundMetric::Euclidean), Err(TransportError::Mismatch { .. })));
}

#[test]
fn fallback_is_flagged_and_bounds_the_subsampled_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 700;
    let a: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| if i % 2 == 1 { x + 0.2 } else { *x }).collect();
    let mu = DiscreteMeasure::uniform(2, a).unwrap();
    let nu = DiscreteMeasure::uniform(2, b).unwrap();
    let est = w1_product_space(&mu, &nu, 1, true).unwrap();
    assert!(!est.exact);
    assert!(est.value >= 0.2 - 1e-12);
    let (mean, spread) = subsampled_w1(&mu, &nu, 1, 3, 5, 0).unwrap();
    assert!(mean <= 0.2 + 1e-9 && spread >= 0.0);
    assert_eq!(subsampled_w1(&mu, &nu, 1, 3, 5, 0).unwrap(), (mean, spread));
}

#[test]
fn histogram_distance_examples() {
    // A single sample at the centre of a unit-mass uniform cell: mean distance 1/4.
    let w = w1_samples_vs_histogram(&[0.5], &[0.0, 1.0], &[1.0]).unwrap();
    assert!((w - 0.25).abs() < 1e-15);
    let far = w1_samples_vs_histogram(&[3.0], &[0.0, 1.0], &[1.0]).unwrap();
    assert!((far - 2.5).abs() < 1e-15);
    assert!(w1_samples_vs_histogram(&[0.5], &[0.0, 1.0], &[0.5, 0.5]).is_err());
}

#[test]
fn lattice_matches_dense_product_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..20 {
        let columns = vec![0.125, 0.375, 0.625, 0.875];
        let levels = vec![0.0, 0.5, 1.0, 1.5, 2.0];
        let raw: Vec<f64> = (0..20).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let masses: Vec<f64> = raw.iter().map(|m| m / total).collect();
        let pts: Vec<(usize, f64, f64)> = (0..5).map(|_| (rng.gen_range(0..4), rng.gen_range(0.0..2.5), 0.2)).collect();
        let lattice = LatticeDensity { columns: columns.clone(), levels: levels.clone(), masses: masses.clone() };
        let fast = lattice_w1(&lattice, &pts).unwrap();
        let mu_pts: Vec<f64> = (0..20).flat_map(|a| [columns[a / 5], levels[a % 5]]).collect();
        let mu = DiscreteMeasure::new(2, mu_pts, masses).unwrap();
        let nu = DiscreteMeasure::uniform(2, pts.iter().flat_map(|&(c, u, _)| [columns[c], u]).collect()).unwrap();
        let dense = w_discrete_exact(&mu, &nu, GroundMetric::Product { dim_x: 1 }, 1).unwrap().distance;
        assert!((fast - dense).abs() < 1e-10, "{fast} vs {dense}");
    }
}

fn small_measure(dim: usize) -> impl Strategy<Value = DiscreteMeasure> {
    (1usize..6).prop_flat_map(move |n| {
        (prop::collection::vec(-1.0..1.0f64, n * dim), prop::collection::vec(0.05..1.0f64, n)).prop_map(
            move |(p, w)| {
                let total: f64 = w.iter().sum();
                let mut w: Vec<f64> = w.iter().map(|x| x / total).collect();
                let rest: f64 = w[1..].iter().sum();
                w[0] = 1.0 - rest;
                DiscreteMeasure::new(dim, p, w).unwrap()
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn metric_axioms(a in small_measure(2), b in small_measure(2), c in small_measure(2)) {
        for m in [1, 2] {
            let ab = exact(&a, &b, m);
            let ba = exact(&b, &a, m);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab <= exact(&a, &c, m) + exact(&c, &b, m) + 1e-10);
            prop_assert!(exact(&a, &a, m) < 1e-12);
        }
    }

    #[test]
    fn first_order_is_below_second(a in small_measure(2), b in small_measure(2)) {
        prop_assert!(exact(&a, &b, 1) <= exact(&a, &b, 2) + 1e-12);
    }

    #[test]
    fn plans_reproduce_marginals(a in small_measure(3), b in small_measure(3)) {
        let p = w_discrete_exact(&a, &b, GroundMetric::Product { dim_x: 1 }, 1).unwrap();
        let mut rows = vec![0.0; a.len()];
        let mut cols = vec![0.0; b.len()];
        for &(i, j, m) in &p.plan {
            rows[i] += m;
            cols[j] += m;
        }
        for (r, w) in rows.iter().zip(&a.weights) {
            prop_assert!((r - w).abs() < 1e-10);
        }
        for (c, w) in cols.iter().zip(&b.weights) {
            prop_assert!((c - w).abs() < 1e-10);
        }
    }

    #[test]
    fn coupling_bound_dominates_exact(pts in prop::collection::vec(-1.0..1.0f64, 4..24)) {
        let n = pts.len() / 4;
        let a = DiscreteMeasure::uniform(2, pts[..2 * n].to_vec()).unwrap();
        let b = DiscreteMeasure::uniform(2, pts[2 * n..4 * n].to_vec()).unwrap();
        let metric = GroundMetric::Product { dim_x: 1 };
        let bound = coupling_upper_bound(&a, &b, metric).unwrap();
        prop_assert!(bound >= w_discrete_exact(&a, &b, metric, 1).unwrap().distance - 1e-12);
    }
}
