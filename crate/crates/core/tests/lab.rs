use gridmf::lab::*;
use gridmf::model::Kernel;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn small_plan(cells: Vec<[usize; 2]>) -> ExperimentPlan {
    let mut plan = preset_plan("rate-in-M").unwrap();
    plan.cells = cells;
    plan.horizon = 0.25;
    plan.dt = 1.0 / 64.0;
    plan.replicas = 8;
    plan.fp = FpResolution { side: None, n_u: 60, u_max: 3.0, dt: None };
    plan.record_times = Some(vec![0.125, 0.25]);
    plan.checks = PlanChecks::default();
    plan
}

fn errors(report: &ConvergenceReport) -> Vec<f64> {
    report.errors.iter().map(|c| c.error).collect()
}

#[test]
fn synthetic_power_law_recovers_its_exponent() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let pts: Vec<(f64, f64, f64)> = [4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0]
        .iter()
        .map(|&s: &f64| {
            let e = 3.0 * s.powf(-0.25);
            (s, e * (1.0 + noise.sample(&mut rng)), 0.01 * e)
        })
        .collect();
    let fit = fit_loglog_slope(&pts).unwrap();
    assert!((-0.27..=-0.23).contains(&fit.slope), "{fit:?}");
    assert!(fit.ci_low <= -0.25 && fit.ci_high >= -0.25);
}

#[test]
fn constant_errors_have_zero_slope() {
    let pts: Vec<(f64, f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&s| (s, 0.7, 0.01)).collect();
    assert!(fit_loglog_slope(&pts).unwrap().slope.abs() < 1e-12);
}

#[test]
fn slope_fit_rejects_short_or_nonpositive_input() {
    assert!(matches!(fit_loglog_slope(&[(1.0, 1.0, 0.1)]), Err(LabError::TooFewPoints(1))));
    let pts = [(1.0, 1.0, 0.1), (2.0, 0.0, 0.1), (4.0, 1.0, 0.1), (8.0, 1.0, 0.1)];
    assert!(matches!(fit_loglog_slope(&pts), Err(LabError::Nonpositive { .. })));
}

#[test]
fn empty_and_single_row_tables() {
    let empty = ConvergenceReport::empty("rate-in-M", 1, 8);
    let table = rate_table(&empty);
    assert_eq!(table.csv, format!("{}\n", RATE_COLUMNS.join(",")));
    assert!(parse_rate_csv(&table.csv).unwrap().is_empty());

    let mut one = empty.clone();
    one.errors.push(CellError { n: 4, m: 8, error: 0.1, stderr: 0.01, error_half_dt: None, ledger_ok: true });
    let table = rate_table(&one);
    assert_eq!(parse_rate_csv(&table.csv).unwrap(), vec![(4, 8, 0.1, 0.01, None)]);
    assert!(table.text.contains('-'));
}

#[test]
fn rate_csv_round_trips_bit_for_bit() {
    let mut report = ConvergenceReport::empty("x", 3, 8);
    let vals = [1.0 / 3.0, std::f64::consts::PI * 1e-7, 0.1 + 0.2, f64::MIN_POSITIVE];
    for (k, &v) in vals.iter().enumerate() {
        report.errors.push(CellError {
            n: 4,
            m: 1 << k,
            error: v,
            stderr: v / 7.0,
            error_half_dt: Some(v * 1.0000000000000002),
            ledger_ok: true,
        });
    }
    let rows = parse_rate_csv(&rate_table(&report).csv).unwrap();
    for (row, c) in rows.iter().zip(&report.errors) {
        assert_eq!(row.2.to_bits(), c.error.to_bits());
        assert_eq!(row.3.to_bits(), c.stderr.to_bits());
        assert_eq!(row.4.unwrap().to_bits(), c.error_half_dt.unwrap().to_bits());
    }
    assert!(parse_rate_csv("N,M\n").is_err());
}

#[test]
fn plan_validation_messages() {
    let mut plan = small_plan(vec![[10, 4]]);
    plan.model.dim = 2;
    plan.model.kernels = vec![Kernel::Zero];
    let err = plan.validate().unwrap_err().to_string();
    assert!(err.contains("N must be a perfect d-th power"), "{err}");
    let mut plan = small_plan(vec![[4, 4]]);
    plan.replicas = 3;
    assert!(plan.validate().is_err());
    let mut plan = small_plan(vec![[4, 4]]);
    plan.dt = 0.1;
    assert!(plan.validate().is_err());
}

#[test]
fn zero_interaction_gives_zero_error() {
    let mut plan = small_plan(vec![[4, 2], [4, 4], [4, 8], [4, 16]]);
    plan.model.kernels = vec![Kernel::Zero];
    let report = run_coupled_error(&plan).unwrap();
    assert!(report.errors.iter().all(|c| c.error == 0.0 && c.ledger_ok));
}

#[test]
fn error_decreases_in_m_and_grows_with_horizon() {
    let plan = small_plan(vec![[4, 2], [4, 8], [4, 32]]);
    let short = run_coupled_error(&plan).unwrap();
    let e = errors(&short);
    assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");

    let mut long = plan.clone();
    long.horizon = 0.5;
    long.record_times = Some(vec![0.125, 0.25, 0.5]);
    long.fp.dt = Some(short.reference.unwrap().dt);
    let mut pinned = plan.clone();
    pinned.fp.dt = long.fp.dt;
    let a = errors(&run_coupled_error(&pinned).unwrap());
    let b = errors(&run_coupled_error(&long).unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert!(y >= x, "{a:?} vs {b:?}");
    }
}

#[test]
fn splitting_terms_obey_the_triangle_inequality() {
    let plan = small_plan(vec![[4, 4], [4, 16]]);
    let report = run_empirical_measure(&plan).unwrap();
    assert_eq!(report.splitting.len(), 4);
    for row in &report.splitting {
        assert!(row.triangle_slack >= -1e-9, "{row:?}");
        assert!(row.coupling_subsampled <= row.coupling + 1e-12);
    }
    let mut other = plan.clone();
    other.master_seed ^= 0xabc;
    let again = run_empirical_measure(&other).unwrap();
    for (a, b) in report.splitting.iter().zip(&again.splitting) {
        assert_eq!(a.riemann.to_bits(), b.riemann.to_bits());
        assert_ne!(a.total, b.total);
    }
}

#[test]
fn sampling_term_without_interaction_falls_like_root_m() {
    let mut plan = small_plan(vec![[4, 8], [4, 32], [4, 128], [4, 512]]);
    plan.model.kernels = vec![Kernel::Zero];
    plan.replicas = 16;
    let report = run_empirical_measure(&plan).unwrap();
    let pts: Vec<(f64, f64, f64)> =
        report.splitting.iter().filter(|s| s.t == 0.25).map(|s| (s.m as f64, s.sampling, s.sampling_se)).collect();
    let fit = fit_loglog_slope(&pts).unwrap();
    assert!((fit.slope + 0.5).abs() < 0.1, "{fit:?}");
    assert!(report.splitting.iter().all(|s| s.coupling == 0.0));
}

#[test]
fn splitting_needs_an_odd_reference_multiple() {
    let mut plan = small_plan(vec![[4, 4]]);
    plan.fp.side = Some(8);
    assert!(run_empirical_measure(&plan).is_err());
}

#[test]
fn ou_oracle_at_desk_scale() {
    let cfg = OuOracleConfig { horizon: 4.0, n: 10, m: 50, dt: 1.0 / 100.0, ..OuOracleConfig::default() };
    let r = ou_oracle(&cfg).unwrap();
    assert!(r.fp_l1 < 0.02, "{r:?}");
    assert!(r.particle_w1 < 0.1, "{r:?}");
    assert!(r.ledger_ok);
    assert_eq!(r.atoms, 500);
}
