use mkv_core::autodiff::{Matrix, NetworkParams, Tape};
use mkv_core::meanfield::{initial_law_estimate, RingBuffer};
use mkv_core::models::{
    lognormal_linear, population_model, price_impact_mean_path, price_impact_pontryagin, LognormalParams,
    ModelDefinition, PopulationParams, PriceImpactParams,
};
use mkv_core::sde::{gaussian_increments, RngStream, Stream, TimeGrid};
use mkv_core::solvers::{
    forward_stats, forward_sweep, simulate, solve, train_global, train_local, FnFeedback, LawSource, LocalNetworks,
    NetworkPair, Phase, RunReport, Scheme, SolverConfig, Status,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn tiny(scheme: Scheme) -> SolverConfig {
    SolverConfig {
        batch: 32,
        iterations: 6,
        memory: 4,
        law_samples: 200,
        inner_steps: 2,
        hidden_layers: 2,
        hidden_width: Some(5),
        eval_batch: 100,
        record_law: true,
        ..SolverConfig::for_scheme(scheme)
    }
}

const SCHEMES: [Scheme; 4] = [Scheme::Direct, Scheme::Dynamic, Scheme::Expectation, Scheme::Local];

fn without_clock(mut r: RunReport) -> RunReport {
    r.elapsed_seconds = 0.0;
    r
}

#[test]
fn zero_cost_model_with_zero_feedback_has_zero_loss() {
    let p = PriceImpactParams {
        c_x: 0.0,
        gamma: 0.0,
        c_g: 0.0,
        d: 3,
        ..Default::default()
    };
    let model = price_impact_pontryagin(p).unwrap();
    let grid = TimeGrid::new(0.25, 5).unwrap();
    let pair = NetworkPair {
        y: NetworkParams::zeros(&[3, 4, 3]).unwrap(),
        z: NetworkParams::zeros(&[4, 4, 9]).unwrap(),
    };
    let mut tape = Tape::new();
    let bound = pair.bind_pair(&mut tape);
    let sweep = forward_sweep(&mut tape, &model, &grid, &bound, &mut LawSource::Batch, 16, &RngStream::new(1), Phase::Train(0)).unwrap();
    assert_eq!(tape.value(sweep.loss).item(), 0.0);
}

#[test]
fn single_step_loss_matches_hand_expansion() {
    let p = PriceImpactParams {
        gamma: 0.0,
        d: 2,
        ..Default::default()
    };
    let model = price_impact_pontryagin(p).unwrap();
    let grid = TimeGrid::new(0.5, 1).unwrap();
    let (y0, zc) = (0.4, 0.3);
    let fb = FnFeedback {
        y: move |x: &Matrix| Matrix::filled(x.rows(), 2, y0),
        // Z = zc * I
        z: move |_t: f64, x: &Matrix| Matrix::from_vec(x.rows(), 4, [zc, 0.0, 0.0, zc].repeat(x.rows())),
    };
    let rng = RngStream::new(21);
    let b = 8;
    let mut tape = Tape::new();
    let bound = mkv_core::solvers::FeedbackSource::bind(&fb, &mut tape);
    let sweep = forward_sweep(&mut tape, &model, &grid, bound.as_ref(), &mut LawSource::Batch, b, &rng, Phase::Train(3)).unwrap();

    let delta = gaussian_increments(b, 2, &mut rng.substream(Stream::Increment, 3, 0)).unwrap();
    let dt = grid.dt();
    let mut expected = 0.0;
    for r in 0..b {
        for j in 0..2 {
            let dw = dt.sqrt() * delta.get(r, j);
            let x1 = p.x0 - y0 / p.c_alpha * dt + p.sigma * dw;
            let y1 = y0 - p.c_x * p.x0 * dt + zc * dw;
            expected += (y1 - p.c_g * x1).powi(2);
        }
    }
    expected /= b as f64;
    let got = tape.value(sweep.loss).item();
    assert!((got - expected).abs() < 1e-12 * expected.max(1.0), "{got} vs {expected}");
}

/// Affine solution of the Euler scheme itself.
///
/// With `Y_i = ybar_i + eta_i (X_i - xbar_i)` and `Z_i = sigma eta_{i+1} I`,
/// one Euler step maps the ansatz onto itself when
/// `eta_i = (eta_{i+1} + c_X dt) / (1 + eta_{i+1} dt / c_alpha)`, `eta_N = c_g`,
/// and `ybar_0` solves the discrete mean boundary problem.
fn discrete_affine_solution(p: &PriceImpactParams, grid: &TimeGrid) -> (f64, Vec<f64>) {
    let (n, dt) = (grid.steps(), grid.dt());
    let mut eta = vec![p.c_g; n + 1];
    for i in (0..n).rev() {
        eta[i] = (eta[i + 1] + p.c_x * dt) / (1.0 + eta[i + 1] * dt / p.c_alpha);
    }
    let miss = |y0: f64| {
        let (mut x, mut y) = (p.x0, y0);
        for _ in 0..n {
            (x, y) = (x - y / p.c_alpha * dt, y - (p.c_x * x + p.gamma / p.c_alpha * y) * dt);
        }
        y - p.c_g * x
    };
    let (f0, f1) = (miss(0.0), miss(1.0));
    (-f0 / (f1 - f0), eta)
}

#[test]
fn analytic_price_impact_feedback_nearly_zeroes_the_loss() {
    let p = PriceImpactParams::default();
    let d = p.d;
    let horizon = 0.25;
    let grid = TimeGrid::new(horizon, 25).unwrap();
    let model = price_impact_pontryagin(p).unwrap();
    let (ybar0, eta) = discrete_affine_solution(&p, &grid);
    // The discrete solution tracks the continuous one to first order.
    let continuous = price_impact_mean_path(&p, horizon, 0.0).unwrap().1;
    assert!((ybar0 - continuous).abs() < 0.05, "{ybar0} vs {continuous}");
    let dt = grid.dt();
    let fb = FnFeedback {
        y: move |x: &Matrix| Matrix::filled(x.rows(), d, ybar0),
        z: move |t: f64, x: &Matrix| {
            let next = eta[(t / dt).round() as usize + 1];
            let mut row = vec![0.0; d * d];
            for j in 0..d {
                row[j * d + j] = p.sigma * next;
            }
            Matrix::tile_row(&row, x.rows())
        },
    };
    let sim = simulate(&model, &grid, &fb, &mut LawSource::Batch, 10_000, &RngStream::new(4), Phase::Evaluate).unwrap();
    assert!(sim.loss < 1e-3, "loss {}", sim.loss);

    // The same law with Z switched off is far from optimal.
    let off = FnFeedback {
        y: move |x: &Matrix| Matrix::filled(x.rows(), d, ybar0),
        z: move |_t: f64, x: &Matrix| Matrix::zeros(x.rows(), d * d),
    };
    let worse = simulate(&model, &grid, &off, &mut LawSource::Batch, 10_000, &RngStream::new(4), Phase::Evaluate).unwrap();
    assert!(worse.loss > 10.0 * sim.loss);
}

#[test]
fn exact_lognormal_solution_sits_at_the_discretization_floor() {
    let p = LognormalParams::default();
    let model = lognormal_linear(p).unwrap();
    let grid = TimeGrid::new(0.25, 25).unwrap();
    let d = p.d;
    let exact = FnFeedback {
        y: |x: &Matrix| Matrix::from_vec(x.rows(), 1, (0..x.rows()).map(|r| x.row(r).iter().map(|v| v.ln()).sum()).collect()),
        z: move |t: f64, x: &Matrix| Matrix::filled(x.rows(), d, p.sigma * (p.alpha * t).exp()),
    };
    let law = move |t: f64| Ok(p.exact_law(t, false));
    let rng = RngStream::new(6);
    let floor = simulate(&model, &grid, &exact, &mut LawSource::Fixed(&law), 10_000, &rng, Phase::Evaluate).unwrap();
    assert!(floor.loss < 5e-3, "loss {}", floor.loss);
    let mean: f64 = floor.terminal_x.mean_rows().iter().sum::<f64>() / d as f64;
    assert!((mean - 1.0253).abs() < 5e-3, "{mean}");

    let batch_law = simulate(&model, &grid, &exact, &mut LawSource::Batch, 10_000, &rng, Phase::Evaluate).unwrap();
    assert!(batch_law.loss < 5e-3, "loss {}", batch_law.loss);

    let shifted = FnFeedback {
        y: |x: &Matrix| Matrix::from_vec(x.rows(), 1, (0..x.rows()).map(|r| x.row(r).iter().map(|v| v.ln()).sum::<f64>() + 0.2).collect()),
        z: move |t: f64, x: &Matrix| Matrix::filled(x.rows(), d, p.sigma * (p.alpha * t).exp()),
    };
    let off = simulate(&model, &grid, &shifted, &mut LawSource::Fixed(&law), 10_000, &rng, Phase::Evaluate).unwrap();
    assert!(off.loss > floor.loss);
}

#[test]
fn direct_and_dynamic_coincide_without_law_dependence() {
    let p = PriceImpactParams {
        gamma: 0.0,
        d: 2,
        ..Default::default()
    };
    let model = price_impact_pontryagin(p).unwrap();
    let grid = TimeGrid::new(0.25, 5).unwrap();
    let direct = tiny(Scheme::Direct);
    let dynamic = SolverConfig {
        scheme: Scheme::Dynamic,
        ..direct.clone()
    };
    let a = train_global(&model, &grid, &direct).unwrap();
    let b = train_global(&model, &grid, &dynamic).unwrap();
    assert_eq!(a.report.losses, b.report.losses);
    assert_eq!(a.networks, b.networks);
    assert_eq!(a.report.terminal_mean, b.report.terminal_mean);
}

fn small_models() -> Vec<ModelDefinition> {
    vec![
        price_impact_pontryagin(PriceImpactParams { d: 2, ..Default::default() }).unwrap(),
        population_model(PopulationParams { rho: 0.5, ..Default::default() }).unwrap(),
        lognormal_linear(LognormalParams { d: 2, ..Default::default() }).unwrap(),
    ]
}

#[test]
fn reruns_are_identical_and_losses_non_negative() {
    let grid = TimeGrid::new(0.2, 4).unwrap();
    for model in small_models() {
        for scheme in SCHEMES {
            let cfg = tiny(scheme);
            let first = without_clock(solve(&model, &grid, &cfg).unwrap());
            let second = without_clock(solve(&model, &grid, &cfg).unwrap());
            assert_eq!(first, second, "{} / {}", model.name, scheme.name());
            assert_ne!(first.status, Status::Diverged, "{} / {}", model.name, scheme.name());
            assert!(first.losses.iter().all(|l| *l >= 0.0 && l.is_finite()));
            assert!(first.law_trajectory.as_ref().is_some_and(|l| l.len() == grid.steps()));

            let other_seed = solve(&model, &grid, &SolverConfig { seed: 99, ..cfg }).unwrap();
            assert_ne!(first.losses, other_seed.losses);
        }
    }
}

#[test]
fn zero_iterations_record_one_loss_and_keep_initial_networks() {
    let model = &small_models()[0];
    let grid = TimeGrid::new(0.2, 4).unwrap();
    for scheme in [Scheme::Direct, Scheme::Dynamic, Scheme::Expectation] {
        let none = train_global(model, &grid, &SolverConfig { iterations: 0, ..tiny(scheme) }).unwrap();
        let one = train_global(model, &grid, &SolverConfig { iterations: 1, ..tiny(scheme) }).unwrap();
        assert_eq!(none.report.losses.len(), 1);
        assert_eq!(none.report.gradient_steps, 0);
        assert_eq!(none.report.losses[0], one.report.losses[0]);
        assert_ne!(none.networks, one.networks);
        let again = train_global(model, &grid, &SolverConfig { iterations: 0, ..tiny(scheme) }).unwrap();
        assert_eq!(none.networks, again.networks);
    }
}

#[test]
fn loss_tolerance_stops_early_as_converged() {
    let model = &small_models()[0];
    let grid = TimeGrid::new(0.2, 4).unwrap();
    let cfg = SolverConfig {
        loss_tolerance: Some(1e6),
        ..tiny(Scheme::Direct)
    };
    let r = solve(model, &grid, &cfg).unwrap();
    assert_eq!(r.status, Status::Converged);
    assert_eq!(r.losses.len(), 1);
}

#[test]
fn scheme_mismatch_is_a_config_error() {
    let model = &small_models()[0];
    let grid = TimeGrid::new(0.2, 4).unwrap();
    let cfg = tiny(Scheme::Direct);
    assert!(mkv_core::solvers::solve_dynamic(model, &grid, &cfg).is_err());
    assert!(mkv_core::solvers::solve_local(model, &grid, &cfg).is_err());
    assert!(solve(model, &grid, &SolverConfig { batch: 0, ..cfg }).is_err());
}

/// `E[arctan(x0 + sigma W_T)] - arctan(x0) T` by plain Monte Carlo.
fn decoupled_population_y0(p: &PopulationParams, horizon: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 1_000_000;
    let s: f64 = (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(&mut rng);
            (p.x0 + p.sigma * horizon.sqrt() * w).atan()
        })
        .sum();
    s / n as f64 - p.x0.atan() * horizon
}

#[test]
fn decoupled_population_matches_monte_carlo_oracle() {
    let p = PopulationParams { rho: 0.0, ..Default::default() };
    let model = population_model(p).unwrap();
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let oracle = decoupled_population_y0(&p, 1.0);
    for scheme in [Scheme::Direct, Scheme::Dynamic] {
        let cfg = SolverConfig {
            batch: 256,
            iterations: 1500,
            eval_batch: 20_000,
            ..SolverConfig::for_scheme(scheme)
        };
        let r = solve(&model, &grid, &cfg).unwrap();
        let y0 = r.initial_value.unwrap().mean;
        assert!((y0 - oracle).abs() < 0.03, "{}: {y0} vs {oracle}", scheme.name());
    }
}

#[test]
fn local_single_step_regresses_onto_the_conditional_mean() {
    let p = PopulationParams { rho: 0.0, ..Default::default() };
    let model = population_model(p).unwrap();
    let grid = TimeGrid::new(1.0, 1).unwrap();
    let cfg = SolverConfig {
        iterations: 1,
        inner_steps: 3000,
        law_samples: 1000,
        ..SolverConfig::for_scheme(Scheme::Local)
    };
    let (report, nets) = train_local(&model, &grid, &cfg).unwrap();
    let oracle = decoupled_population_y0(&p, 1.0);
    let y0 = nets.y[0].forward(&[p.x0]).unwrap()[0];
    assert!((y0 - oracle).abs() < 0.02, "{y0} vs {oracle}");
    assert_eq!(report.gradient_steps, 3000);
}

#[test]
fn local_forward_statistics_start_from_a_point_mass() {
    let model = &small_models()[0];
    let grid = TimeGrid::new(0.2, 4).unwrap();
    let cfg = tiny(Scheme::Local);
    let nets = LocalNetworks::init(model, &grid, &cfg).unwrap();
    let init = initial_law_estimate(model, vec![1.0; model.d]);
    let mut buffer = RingBuffer::new(grid.steps() + 1, cfg.memory, &init).unwrap();
    let stats = forward_stats(model, &grid, &nets, &mut buffer, 0, false, 500, &RngStream::new(1)).unwrap();
    assert_eq!(stats.mean.len(), grid.steps() + 1);
    assert_eq!(stats.variance[0], vec![0.0; model.d]);
    assert_eq!(stats.mean[0], vec![1.0; model.d]);
    assert!(stats.variance[grid.steps()].iter().all(|v| *v > 0.0));
    assert_eq!(stats.laws.len(), grid.steps() + 1);
}
