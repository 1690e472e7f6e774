use gridmf::meanfield::*;
use gridmf::model::*;
use gridmf::noise::{build_field, default_epsilon, MollifierProfile};
use gridmf::particles::*;
use gridmf::transport::{w1_samples_vs_histogram, w_weighted_1d};

fn line_params(firing: FiringRate, kernel: Kernel, sigma: f64) -> GridCellParams {
    GridCellParams {
        dim: 1,
        orientations: 1,
        tau: vec![TimeConstant::Constant { value: 1.0 }],
        sigma,
        firing,
        kernels: vec![kernel],
        input: ExternalInput::Constant { values: vec![0.5] },
    }
}

fn hat() -> Kernel {
    Kernel::MexicanHat { a_e: 1.0, s_e: 0.1, a_i: 0.6, s_i: 0.25, shift: vec![] }
}

fn smooth_start() -> InitialDataSpec {
    InitialDataSpec {
        alpha: 1.0,
        n_modes: 8,
        amplitude: 0.5,
        offset: 0.0,
        profile: LacunaryProfile { amplitude: 0.3, levels: 1 },
    }
}

fn single_node_density(cells: UCells, masses: Vec<f64>) -> DensityEvolution {
    DensityEvolution {
        xgrid: grid_locations(1, 1).unwrap(),
        orientations: 1,
        ucells: cells,
        joint: false,
        record_times: vec![0.0],
        densities: vec![masses],
        dt: 1.0,
        moments: vec![],
        diagnostics: FpDiagnostics::default(),
    }
}

fn solve(model: &ModelSpec, p: usize, cells: UCells, horizon: f64, records: Vec<f64>) -> DensityEvolution {
    let grid = grid_locations(p, 1).unwrap();
    let spec = smooth_start();
    let f0 = initial_density(&spec, &grid, model.orientations, &cells);
    let dt = suggest_dt(model, &grid, &cells, &f0, horizon, 32, 0.5).unwrap();
    solve_marginal_fp(model, &grid, &cells, &f0, &FpConfig::new(horizon, dt, records)).unwrap()
}

#[test]
fn quantized_point_mass_moment() {
    let cells = UCells::new(30, 3.0).unwrap();
    let mut masses = vec![0.0; 30];
    masses[(0.7 / cells.du()) as usize] = 1.0;
    let m = moment_field(&single_node_density(cells, masses), 0.0).unwrap()[0];
    assert!((m - 0.7).abs() <= cells.du() / 2.0 + 1e-15);
}

#[test]
fn symmetric_density_moment() {
    let cells = UCells::new(100, 4.0).unwrap();
    let c = 2.0;
    let masses: Vec<f64> = cells.centers().iter().map(|u| (-(u - c) * (u - c) / 0.1).exp()).collect();
    let total: f64 = masses.iter().sum();
    let masses: Vec<f64> = masses.iter().map(|m| m / total).collect();
    let m = moment_field(&single_node_density(cells, masses), 0.0).unwrap()[0];
    assert!((m - c).abs() <= cells.du());
}

#[test]
fn stationary_oracle_is_a_gaussian_far_from_the_wall() {
    let cells = UCells::new(2000, 12.0).unwrap();
    let (c, sigma, tau) = (6.0, 0.5, 2.0);
    let m = reflected_ou_stationary(c, sigma, tau, &cells);
    let centers = cells.centers();
    let mean: f64 = m.iter().zip(&centers).map(|(a, u)| a * u).sum();
    let var: f64 = m.iter().zip(&centers).map(|(a, u)| a * (u - mean).powi(2)).sum();
    assert!(m[0] < 1e-8);
    assert!((mean - c).abs() < 1e-9);
    // Midpoint variance carries the du²/12 cell correction.
    assert!((var - (sigma * sigma / (2.0 * tau) + cells.du().powi(2) / 12.0)).abs() < 1e-6, "{var}");
}

#[test]
fn ou_density_relaxes_to_the_stationary_law() {
    let model = preset_model("ou-test").unwrap();
    let grid = grid_locations(1, 1).unwrap();
    let cells = UCells::new(400, 3.0).unwrap();
    let mut f0 = vec![0.0; 400];
    f0[100] = 1.0;
    let dt = suggest_dt(&model, &grid, &cells, &f0, 10.0, 1, 0.5).unwrap();
    let sol = solve_marginal_fp(&model, &grid, &cells, &f0, &FpConfig::new(10.0, dt, vec![10.0])).unwrap();
    let oracle = reflected_ou_stationary(0.3, 0.5, 1.0, &cells);
    let l1: f64 = sol.marginal(0, 0, 0).iter().zip(&oracle).map(|(a, b)| (a - b).abs()).sum();
    assert!(l1 < 1e-3, "{l1}");
    assert!(sol.diagnostics.max_mass_drift < 1e-12);
    assert!(sol.diagnostics.min_mass >= 0.0);
}

#[test]
fn interacting_solve_conserves_mass_and_positivity() {
    let model = build_concrete_model(&line_params(FiringRate::Softplus, hat(), 0.3)).unwrap();
    let cells = UCells::new(60, 3.0).unwrap();
    let sol = solve(&model, 16, cells, 1.0, vec![0.0, 0.5, 1.0]);
    assert!(sol.diagnostics.max_mass_drift < 1e-12);
    assert!(sol.diagnostics.min_mass >= 0.0);
    assert!(sol.diagnostics.max_cfl_ratio <= 1.0);
    for r in 0..3 {
        for p in 0..16 {
            let m = sol.marginal(r, p, 0);
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn picard_mode_agrees_with_lagged_moments() {
    let model = build_concrete_model(&line_params(FiringRate::Softplus, hat(), 0.3)).unwrap();
    let grid = grid_locations(8, 1).unwrap();
    let cells = UCells::new(60, 3.0).unwrap();
    let f0 = initial_density(&smooth_start(), &grid, 1, &cells);
    let dt = suggest_dt(&model, &grid, &cells, &f0, 0.5, 16, 0.5).unwrap();
    let lagged = solve_marginal_fp(&model, &grid, &cells, &f0, &FpConfig::new(0.5, dt, vec![0.5])).unwrap();
    let mut cfg = FpConfig::new(0.5, dt, vec![0.5]);
    cfg.picard_tol = Some(1e-10);
    let picard = solve_marginal_fp(&model, &grid, &cells, &f0, &cfg).unwrap();
    assert!(picard.diagnostics.picard_sweeps > 0);
    let a = moment_field(&lagged, 0.5).unwrap();
    let b = moment_field(&picard, 0.5).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 10.0 * dt, "{x} vs {y}");
    }
}

#[test]
fn cfl_violation_names_a_cell() {
    let model = preset_model("ou-test").unwrap();
    let grid = grid_locations(1, 1).unwrap();
    let cells = UCells::new(400, 3.0).unwrap();
    let f0 = reflected_ou_stationary(0.3, 0.5, 1.0, &cells);
    let err = solve_marginal_fp(&model, &grid, &cells, &f0, &FpConfig::new(0.1, 0.01, vec![0.1])).unwrap_err();
    assert!(matches!(err, MeanFieldError::Cfl { .. }));
    assert!(err.to_string().contains("cell"), "{err}");
}

#[test]
fn joint_solver_keeps_decoupled_product_exact() {
    let mut params = line_params(FiringRate::Softplus, Kernel::Zero, 0.3);
    params.orientations = 2;
    params.kernels = vec![Kernel::Zero, Kernel::Zero];
    params.input = ExternalInput::Constant { values: vec![0.5, -0.2] };
    let model = build_concrete_model(&params).unwrap();
    let grid = grid_locations(2, 1).unwrap();
    let cells = UCells::new(40, 3.0).unwrap();
    let f0 = initial_density(&smooth_start(), &grid, 2, &cells);
    let dt = suggest_dt(&model, &grid, &cells, &f0, 0.5, 8, 0.5).unwrap();
    let cfg = FpConfig::new(0.5, dt, vec![0.5]);
    let joint = solve_joint_fp_small(&model, &grid, &cells, &f0, &cfg).unwrap();
    let marg = solve_marginal_fp(&model, &grid, &cells, &f0, &cfg).unwrap();
    assert!(joint_product_gap(&joint, &marg, 0) < 1e-12);
    let total: f64 = joint.densities[0][..1600].iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
    let one_d = build_concrete_model(&line_params(FiringRate::Softplus, Kernel::Zero, 0.3)).unwrap();
    assert!(solve_joint_fp_small(&one_d, &grid, &cells, &f0[..80], &cfg).is_err());
}

#[test]
fn coupled_paths_match_particles_without_interaction() {
    let model = build_concrete_model(&line_params(FiringRate::Softplus, Kernel::Zero, 0.4)).unwrap();
    let cells = UCells::new(60, 3.0).unwrap();
    let reference = solve(&model, 8, cells, 0.5, vec![0.5]);
    let grid = grid_locations(8, 1).unwrap();
    let noise = build_field(&grid.points, 1, default_epsilon(8, 1), MollifierProfile::Bump, 1).unwrap();
    let init = InitialFamily { spec: smooth_start(), dim: 1, orientations: 1, seed: 7 };
    let cfg = RunConfig::new(0.5, 1.0 / 64.0, 7);
    let particles = simulate_system(&model, &grid, 4, &noise, &init, &cfg).unwrap();
    let mv = simulate_coupled_mv(&model, &grid, 4, &noise, &init, &reference, &cfg).unwrap();
    assert_eq!(particles.snapshots, mv.snapshots);
    assert_eq!(particles.running_sup, mv.running_sup);
}

#[test]
fn coupled_particle_follows_the_ode() {
    let model = build_concrete_model(&ou_params(0.3, 0.0, 1.0)).unwrap();
    let grid = grid_locations(1, 1).unwrap();
    let cells = UCells::new(60, 3.0).unwrap();
    let mut f0 = vec![0.0; 60];
    f0[20] = 1.0;
    let reference = solve_marginal_fp(&model, &grid, &cells, &f0, &FpConfig::new(1.0, 1e-3, vec![1.0])).unwrap();
    let noise = build_field(&grid.points, 1, 0.1, MollifierProfile::Bump, 1).unwrap();
    let spec = InitialDataSpec {
        alpha: 1.0,
        n_modes: 0,
        amplitude: 0.0,
        offset: softplus_inv(1.0),
        profile: LacunaryProfile::NONE,
    };
    let init = InitialFamily { spec, dim: 1, orientations: 1, seed: 1 };
    let mv = simulate_coupled_mv(&model, &grid, 1, &noise, &init, &reference, &RunConfig::new(1.0, 1e-4, 1)).unwrap();
    let expected = 0.3 + 0.7 * (-1.0f64).exp();
    assert!((mv.snapshots.last().unwrap()[0] - expected).abs() < 1e-3);
}

#[test]
fn mv_paths_are_independent_across_columns() {
    let model = build_concrete_model(&line_params(FiringRate::Softplus, hat(), 0.4)).unwrap();
    let cells = UCells::new(60, 3.0).unwrap();
    let reference = solve(&model, 4, cells, 0.5, vec![0.5]);
    let grid = grid_locations(4, 1).unwrap();
    let noise = build_field(&grid.points, 1, default_epsilon(4, 1), MollifierProfile::Bump, 1).unwrap();
    let init = InitialFamily { spec: smooth_start(), dim: 1, orientations: 1, seed: 21 };
    let m = 4000;
    let mv =
        simulate_coupled_mv(&model, &grid, m, &noise, &init, &reference, &RunConfig::new(0.5, 1.0 / 32.0, 21)).unwrap();
    let last = mv.snapshots.last().unwrap();
    let pairs = m / 2;
    let a: Vec<f64> = (0..pairs).map(|j| last[mv.index(0, 2 * j)]).collect();
    let b: Vec<f64> = (0..pairs).map(|j| last[mv.index(3, 2 * j + 1)]).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>();
    let corr = cov / (va * vb).sqrt();
    assert!(corr.abs() < 3.0 / (pairs as f64).sqrt(), "{corr}");
}

#[test]
fn mv_marginal_approaches_the_density_as_m_grows() {
    let model = build_concrete_model(&line_params(FiringRate::Softplus, hat(), 0.4)).unwrap();
    let cells = UCells::new(120, 3.0).unwrap();
    let reference = solve(&model, 4, cells, 0.5, vec![0.5]);
    let grid = grid_locations(4, 1).unwrap();
    let noise = build_field(&grid.points, 1, default_epsilon(4, 1), MollifierProfile::Bump, 1).unwrap();
    let edges: Vec<f64> = (0..=120).map(|i| cells.edge(i)).collect();
    let mut errors = Vec::new();
    for m in [16usize, 256] {
        let mut acc = 0.0;
        let reps = 6;
        for r in 0..reps {
            let init = InitialFamily { spec: smooth_start(), dim: 1, orientations: 1, seed: 40 + r };
            let mv = simulate_coupled_mv(
                &model,
                &grid,
                m,
                &noise,
                &init,
                &reference,
                &RunConfig::new(0.5, 1.0 / 64.0, 40 + r),
            )
            .unwrap();
            let last = mv.snapshots.last().unwrap();
            let samples: Vec<f64> = (0..m).map(|k| last[mv.index(1, k)]).collect();
            acc += w1_samples_vs_histogram(&samples, &edges, &reference.marginal(0, 1, 0)).unwrap() / reps as f64;
        }
        errors.push(acc);
    }
    // 16× more samples: expect roughly a factor 4.
    assert!(errors[1] < 0.5 * errors[0], "{errors:?}");
}

#[test]
fn second_moment_growth_is_stable_under_refinement() {
    let model = build_concrete_model(&line_params(FiringRate::Softplus, hat(), 0.3)).unwrap();
    let ratio = |n_u: usize| {
        let cells = UCells::new(n_u, 3.0).unwrap();
        let sol = solve(&model, 8, cells, 1.0, vec![0.0, 1.0]);
        let second = |r: usize| -> f64 {
            (0..8)
                .map(|p| sol.marginal(r, p, 0).iter().zip(cells.centers()).map(|(m, c)| m * c * c).sum::<f64>())
                .fold(0.0, f64::max)
        };
        second(1) / (1.0 + second(0))
    };
    let (a, b) = (ratio(60), ratio(120));
    assert!(a < 2.0 && (a - b).abs() < 0.05 * a, "{a} vs {b}");
}

#[test]
fn neighbouring_laws_are_holder_in_space() {
    let model = build_concrete_model(&line_params(FiringRate::Softplus, hat(), 0.3)).unwrap();
    let cells = UCells::new(60, 3.0).unwrap();
    let centers = cells.centers();
    let mut quotients = Vec::new();
    for p in [32usize, 64, 128] {
        let sol = solve(&model, p, cells, 0.5, vec![0.5]);
        let h = 1.0 / p as f64;
        let q = (0..p - 1)
            .map(|i| {
                w_weighted_1d(&centers, &sol.marginal(0, i, 0), &centers, &sol.marginal(0, i + 1, 0), 1).unwrap() / h
            })
            .fold(0.0, f64::max);
        quotients.push(q);
    }
    let lo = quotients.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = quotients.iter().cloned().fold(0.0, f64::max);
    assert!(hi < 1.5 * lo, "{quotients:?}");
}
