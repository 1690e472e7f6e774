use gridmf::model::*;
use gridmf::noise::{build_field, default_epsilon, CorrelatedNoiseField, MollifierProfile};
use gridmf::particles::*;
use proptest::prelude::*;

fn line_model(firing: FiringRate, kernel: Kernel, sigma: f64) -> ModelSpec {
    build_concrete_model(&GridCellParams {
        dim: 1,
        orientations: 1,
        tau: vec![TimeConstant::Constant { value: 1.0 }],
        sigma,
        firing,
        kernels: vec![kernel],
        input: ExternalInput::Constant { values: vec![0.5] },
    })
    .unwrap()
}

fn hat() -> Kernel {
    Kernel::MexicanHat { a_e: 1.0, s_e: 0.1, a_i: 0.6, s_i: 0.25, shift: vec![] }
}

fn field(grid: &SpatialGrid, b: usize) -> CorrelatedNoiseField {
    build_field(&grid.points, grid.dim, default_epsilon(grid.n, grid.dim), MollifierProfile::Bump, b).unwrap()
}

fn rough(alpha: f64) -> InitialDataSpec {
    InitialDataSpec { alpha, n_modes: 16, amplitude: 0.5, offset: 0.0, profile: LacunaryProfile::NONE }
}

fn constant_start(u: f64) -> InitialDataSpec {
    InitialDataSpec { alpha: 1.0, n_modes: 0, amplitude: 0.0, offset: softplus_inv(u), profile: LacunaryProfile::NONE }
}

#[test]
fn grid_in_three_dimensions() {
    let g = grid_locations(27, 3).unwrap();
    assert_eq!(g.side, 3);
    assert_eq!(g.point(0), &[1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0]);
    assert!(g.point(26).iter().all(|&c| (c - 5.0 / 6.0).abs() < 1e-15));
    assert!((g.cell_diameter - 3f64.sqrt() / 3.0).abs() < 1e-15);
    for i in 0..27 {
        assert_eq!(g.cell_of(g.point(i)), i);
    }
    assert!(grid_locations(9, 3).is_err());
}

#[test]
fn eight_node_line_spacing() {
    let g = grid_locations(8, 1).unwrap();
    let min_gap = g.points.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    assert!((min_gap - 0.125).abs() < 1e-15);
    assert_eq!(g.cell_measure, 0.125);
}

#[test]
fn initial_field_is_keyed() {
    let spec = rough(0.7);
    let a = holder_initial_field(&spec, 2, 2, 5, 3);
    let b = holder_initial_field(&spec, 2, 2, 5, 3);
    let c = holder_initial_field(&spec, 2, 2, 5, 4);
    let mut differs = false;
    for p in 0..100 {
        let x = [(p as f64 * 0.37) % 1.0, (p as f64 * 0.73) % 1.0];
        for beta in 0..2 {
            assert_eq!(a.value(&x, beta).to_bits(), b.value(&x, beta).to_bits());
            assert!(a.value(&x, beta) > 0.0);
            differs |= a.value(&x, beta) != c.value(&x, beta);
        }
    }
    assert!(differs);
}

#[test]
fn half_holder_field_is_not_lipschitz() {
    let spec = InitialDataSpec {
        alpha: 0.5,
        n_modes: 0,
        amplitude: 0.0,
        offset: 0.0,
        profile: LacunaryProfile { amplitude: 1.0, levels: 7 },
    };
    let f = holder_initial_field(&spec, 1, 1, 0, 0);
    let scan = |r: f64, power: f64| -> f64 {
        (0..1000)
            .map(|j| {
                let x = j as f64 / 1000.0 * (1.0 - r);
                (f.value(&[x + r], 0) - f.value(&[x], 0)).abs() / r.powf(power)
            })
            .fold(0.0, f64::max)
    };
    let (coarse, fine) = (1e-1, 1e-4);
    assert!(scan(coarse, 0.5) <= 1.05 * f.seminorm && scan(fine, 0.5) <= 1.05 * f.seminorm);
    assert!(scan(fine, 1.0) > 10.0 * scan(coarse, 1.0), "{} vs {}", scan(fine, 1.0), scan(coarse, 1.0));
}

#[test]
fn single_particle_relaxes_exponentially() {
    let model = line_model(FiringRate::Constant { value: 0.0 }, Kernel::Zero, 0.0);
    let grid = grid_locations(1, 1).unwrap();
    let init = InitialFamily { spec: constant_start(1.0), dim: 1, orientations: 1, seed: 1 };
    let run = simulate_system(&model, &grid, 1, &field(&grid, 1), &init, &RunConfig::new(1.0, 1e-4, 1)).unwrap();
    let u = run.snapshots.last().unwrap()[0];
    assert!((u - (-1.0f64).exp()).abs() < 1e-3, "{u}");
}

#[test]
fn decoupled_particles_ignore_their_neighbours() {
    let model = line_model(FiringRate::Softplus, Kernel::Zero, 0.4);
    let grid = grid_locations(4, 1).unwrap();
    let noise = field(&grid, 1);
    let init = InitialFamily { spec: rough(1.0), dim: 1, orientations: 1, seed: 3 };
    let mut cfg = RunConfig::new(0.5, 0.01, 3);
    cfg.record_times =
        default_record_times(0.5).into_iter().filter(|t| (t / 0.01 - (t / 0.01).round()).abs() < 1e-9).collect();
    let one = simulate_system(&model, &grid, 1, &noise, &init, &cfg).unwrap();
    let two = simulate_system(&model, &grid, 2, &noise, &init, &cfg).unwrap();
    for r in 0..one.record_times.len() {
        for i in 0..4 {
            assert_eq!(one.snapshots[r][one.index(i, 0)].to_bits(), two.snapshots[r][two.index(i, 0)].to_bits());
        }
    }
}

#[test]
fn interacting_run_keeps_reflection_ledger() {
    let mut params = gridcell_params();
    params.sigma = 0.6;
    params.input = ExternalInput::Constant { values: vec![-1.0; 4] };
    let model = build_concrete_model(&params).unwrap();
    let grid = grid_locations(16, 2).unwrap();
    let init = InitialFamily { spec: rough(0.5), dim: 2, orientations: 4, seed: 8 };
    let run = simulate_system(&model, &grid, 4, &field(&grid, 4), &init, &RunConfig::new(1.0, 1.0 / 64.0, 8)).unwrap();
    assert!(run.ledger.holds(), "{:?}", run.ledger);
    assert!(run.ledger.pushes > 0);
    assert!(run.snapshots.iter().flatten().all(|&u| u >= 0.0));
    assert!(run.ell_tv.iter().all(|&v| v >= 0.0));
}

#[test]
fn first_step_uses_the_empirical_drift() {
    let model = line_model(FiringRate::Softplus, hat(), 0.0);
    let grid = grid_locations(8, 1).unwrap();
    let init = InitialFamily { spec: rough(1.0), dim: 1, orientations: 1, seed: 2 };
    let dt = 0.01;
    let mut cfg = RunConfig::new(dt, dt, 2);
    cfg.record_times = vec![0.0, dt];
    let m = 3;
    let run = simulate_system(&model, &grid, m, &field(&grid, 1), &init, &cfg).unwrap();
    let f0 = empirical_measure(&run, &grid, 0);
    for k in 0..m {
        for i in 0..8 {
            let u0 = run.snapshots[0][run.index(i, k)];
            let drift = eval_drift(&model, grid.point(i), 0.0, &[u0], &f0).unwrap()[0];
            let u1 = run.snapshots[1][run.index(i, k)];
            assert!((u1 - (u0 + dt * drift).max(0.0)).abs() < 1e-14);
        }
    }
}

#[test]
fn general_interaction_uses_the_full_double_sum() {
    let model = custom_linear_model();
    let grid = grid_locations(4, 1).unwrap();
    let init = InitialFamily { spec: rough(1.0), dim: 1, orientations: 1, seed: 6 };
    let dt = 0.01;
    let mut cfg = RunConfig::new(dt, dt, 6);
    cfg.record_times = vec![0.0, dt];
    let run = simulate_system(&model, &grid, 2, &field(&grid, 1), &init, &cfg).unwrap();
    let f0 = empirical_measure(&run, &grid, 0);
    let mean: f64 = run.snapshots[0].iter().sum::<f64>() / 8.0;
    let noise = field(&grid, 1);
    for k in 0..2 {
        let dw = noise.sample_increments(dt, k as u64, 0, 6).unwrap();
        for i in 0..4 {
            let u0 = run.snapshots[0][run.index(i, k)];
            let drift = eval_drift(&model, grid.point(i), 0.0, &[u0], &f0).unwrap()[0];
            assert!((drift - (-u0 + mean)).abs() < 1e-14);
            let expected = (u0 + dt * drift + 0.3 * dw[i]).max(0.0);
            assert!((run.snapshots[1][run.index(i, k)] - expected).abs() < 1e-14);
        }
    }
}

#[test]
fn empirical_measure_examples() {
    let model = line_model(FiringRate::Softplus, hat(), 0.2);
    let grid = grid_locations(1, 1).unwrap();
    let init = InitialFamily { spec: rough(1.0), dim: 1, orientations: 1, seed: 1 };
    let run = simulate_system(&model, &grid, 1, &field(&grid, 1), &init, &RunConfig::new(0.1, 0.01, 1)).unwrap();
    let f = empirical_measure(&run, &grid, 0);
    assert_eq!(f.atom_count(), 1);
    let mut weights = Vec::new();
    f.for_each_atom(&mut |_, _, w| weights.push(w));
    assert_eq!(weights, vec![1.0]);

    let grid = grid_locations(16, 2).unwrap();
    let model = build_concrete_model(&gridcell_params()).unwrap();
    let init = InitialFamily { spec: rough(0.5), dim: 2, orientations: 4, seed: 4 };
    let run = simulate_system(&model, &grid, 3, &field(&grid, 4), &init, &RunConfig::new(0.25, 1.0 / 64.0, 4)).unwrap();
    let f = empirical_measure(&run, &grid, 0);
    assert!((f.integrate(&|_, _| 1.0) - 1.0).abs() < 1e-12);
    for beta in 0..4 {
        let direct: f64 = (0..48).map(|a| f.values[a * 4 + beta]).sum::<f64>() / 48.0;
        assert!((f.integrate(&|_, v| v[beta]) - direct).abs() < 1e-14);
    }
}

#[test]
fn column_keys_permute_trajectories() {
    let model = line_model(FiringRate::Softplus, hat(), 0.3);
    let grid = grid_locations(8, 1).unwrap();
    let noise = field(&grid, 1);
    let init = InitialFamily { spec: rough(0.8), dim: 1, orientations: 1, seed: 12 };
    let m = 4;
    let perm = [2u64, 0, 3, 1];
    let base = simulate_system(&model, &grid, m, &noise, &init, &RunConfig::new(0.5, 0.01, 12)).unwrap();
    let mut cfg = RunConfig::new(0.5, 0.01, 12);
    cfg.column_keys = Some(perm.to_vec());
    let permuted = simulate_system(&model, &grid, m, &noise, &init, &cfg).unwrap();
    for (k, &p) in perm.iter().enumerate() {
        for i in 0..8 {
            let a = permuted.snapshots[0][permuted.index(i, k)];
            let b = base.snapshots[0][base.index(i, p as usize)];
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn second_moment_stays_bounded_as_m_doubles() {
    let model = line_model(FiringRate::Softplus, hat(), 0.3);
    let grid = grid_locations(8, 1).unwrap();
    let noise = field(&grid, 1);
    let mut moments = Vec::new();
    for m in [4usize, 8, 16] {
        let mut acc = vec![0.0; 8 * m];
        let reps = 8;
        for r in 0..reps {
            let init = InitialFamily { spec: rough(1.0), dim: 1, orientations: 1, seed: 100 + r };
            let run =
                simulate_system(&model, &grid, m, &noise, &init, &RunConfig::new(1.0, 1.0 / 64.0, 100 + r)).unwrap();
            for (a, s) in acc.iter_mut().zip(&run.running_sup) {
                *a += s * s / reps as f64;
            }
        }
        moments.push(acc.iter().cloned().fold(0.0, f64::max));
    }
    let lo = moments.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = moments.iter().cloned().fold(0.0, f64::max);
    assert!(hi < 2.0 * lo, "{moments:?}");
}

#[test]
fn run_config_is_validated() {
    let model = line_model(FiringRate::Softplus, hat(), 0.3);
    let grid = grid_locations(2, 1).unwrap();
    let noise = field(&grid, 1);
    let init = InitialFamily { spec: rough(1.0), dim: 1, orientations: 1, seed: 0 };
    assert!(simulate_system(&model, &grid, 1, &noise, &init, &RunConfig::new(0.105, 0.01, 0)).is_err());
    let mut cfg = RunConfig::new(0.1, 0.01, 0);
    cfg.record_times = vec![0.055];
    assert!(simulate_system(&model, &grid, 1, &noise, &init, &cfg).is_err());
    assert!(simulate_system(&model, &grid, 0, &noise, &init, &RunConfig::new(0.1, 0.01, 0)).is_err());
    let bad = InitialDataSpec { alpha: 1.5, ..rough(1.0) };
    assert!(bad.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampled_holder_quotients_respect_the_seminorm(alpha in 0.2..1.0f64, seed in any::<u64>(), k in 0u64..100) {
        let spec = InitialDataSpec { alpha, n_modes: 24, amplitude: 1.0, offset: 0.1, profile: LacunaryProfile::NONE };
        let f = holder_initial_field(&spec, 2, 1, seed, k);
        let mut rng = gridmf::rng::stream(seed, gridmf::rng::Purpose::Test, k, 0, 0);
        for _ in 0..1000 {
            let x: [f64; 2] = [rand::Rng::gen(&mut rng), rand::Rng::gen(&mut rng)];
            let y: [f64; 2] = [rand::Rng::gen(&mut rng), rand::Rng::gen(&mut rng)];
            let d = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
            let q = (f.value(&x, 0) - f.value(&y, 0)).abs() / d.powf(alpha);
            prop_assert!(q <= 1.05 * f.seminorm);
            prop_assert!(f.value(&x, 0) >= 0.0);
        }
    }
}
