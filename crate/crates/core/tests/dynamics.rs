use mkv_core::autodiff::{Matrix, NetworkParams, Tape};
use mkv_core::meanfield::{penalty_loss, MeanFieldVector};
use mkv_core::models::{
    lognormal_linear, lognormal_moments, lognormal_quadratic, phi_source, population_model, price_impact_pontryagin,
    price_impact_reference, price_impact_weak, LognormalParams, ModelDefinition, PopulationParams, PriceImpactParams,
};
use mkv_core::sde::{euler_backward_step, euler_forward_step, gaussian_increments, RngStream, Stream, TimeGrid};
use mkv_core::solvers::{forward_sweep, simulate, FnFeedback, LawSource, NetworkPair, Phase};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn law_on(tape: &mut Tape, model: &ModelDefinition, values: &[f64]) -> mkv_core::meanfield::LawVars {
    MeanFieldVector::from_slice(values, model.layout()).unwrap().to_tape(tape)
}

#[test]
fn pontryagin_drift_moves_state_down() {
    let model = price_impact_pontryagin(PriceImpactParams::default()).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(1, 10, 1.0);
    let y = tape.constant(1, 10, 1.0);
    let z = tape.constant(1, 100, 0.0);
    let delta = tape.constant(1, 10, 0.0);
    let law = law_on(&mut tape, &model, &vec![0.0; model.layout().total()]);
    let next = euler_forward_step(&mut tape, &model, 0.0, x, y, z, &law, delta, 0.01).unwrap();
    for v in tape.value(next).as_slice() {
        assert!((v - (1.0 - 0.015)).abs() < 1e-14, "{v}");
    }
}

#[test]
fn population_backward_step_rises_by_arctan_of_mean() {
    let model = population_model(PopulationParams::default()).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(1, 1, 1.0);
    let y = tape.constant(1, 1, 0.25);
    let z = tape.constant(1, 1, 0.0);
    let delta = tape.constant(1, 1, 0.7);
    let law = law_on(&mut tape, &model, &[1.0]);
    let next = euler_backward_step(&mut tape, &model, 0.0, x, y, z, &law, delta, 0.01).unwrap();
    let rise = tape.value(next).item() - 0.25;
    assert!((rise - 0.007854).abs() < 1e-6, "{rise}");
}

#[test]
fn positive_driver_lowers_y() {
    // f = -arctan(uX) > 0 when the population mean is negative.
    let model = population_model(PopulationParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let mut tape = Tape::new();
        let y0 = rng.random_range(-2.0..2.0);
        let x = tape.constant(1, 1, rng.random_range(-2.0..2.0));
        let y = tape.constant(1, 1, y0);
        let z = tape.constant(1, 1, 0.0);
        let delta = tape.constant(1, 1, rng.random_range(-2.0..2.0));
        let law = law_on(&mut tape, &model, &[rng.random_range(-3.0..-0.01)]);
        let next = euler_backward_step(&mut tape, &model, 0.0, x, y, z, &law, delta, 0.01).unwrap();
        assert!(tape.value(next).item() < y0);
    }
}

#[test]
fn zero_drift_walk_has_variance_sigma_squared_t() {
    // Pontryagin drift is -Y / c_alpha, so Y = 0 leaves a scaled Brownian motion.
    let p = PriceImpactParams { d: 1, ..Default::default() };
    let model = price_impact_pontryagin(p).unwrap();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let rng = RngStream::new(11);
    let b = 20_000;
    let mut x = Matrix::filled(b, 1, p.x0);
    for i in 0..grid.steps() {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = tape.constant(b, 1, 0.0);
        let z = tape.constant(b, 1, 0.0);
        let mut r = rng.substream(Stream::Increment, 0, i as u64);
        let delta = tape.leaf(gaussian_increments(b, 1, &mut r).unwrap());
        let law = law_on(&mut tape, &model, &vec![0.0; model.layout().total()]);
        let next = euler_forward_step(&mut tape, &model, grid.time(i), xv, y, z, &law, delta, grid.dt()).unwrap();
        x = tape.value(next).clone();
    }
    let var = x.variance_rows()[0];
    let target = p.sigma * p.sigma;
    // sd of the sample variance is about target * sqrt(2 / B)
    assert!((var - target).abs() < 4.0 * target * (2.0 / b as f64).sqrt(), "{var} vs {target}");
}

#[test]
fn uncoupled_lognormal_forward_mean_matches_gbm() {
    let p = LognormalParams {
        b_coef: 0.0,
        ..Default::default()
    };
    let model = lognormal_linear(p).unwrap();
    let grid = TimeGrid::new(0.25, 25).unwrap();
    let d = p.d;
    let fb = FnFeedback {
        y: |x: &Matrix| Matrix::zeros(x.rows(), 1),
        z: move |_t: f64, x: &Matrix| Matrix::zeros(x.rows(), d),
    };
    let exact = move |t: f64| Ok(p.exact_law(t, false));
    let mut law = LawSource::Fixed(&exact);
    let b = 100_000;
    let sim = simulate(&model, &grid, &fb, &mut law, b, &RngStream::new(3), Phase::Evaluate).unwrap();
    let all = sim.terminal_x.as_slice();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let target = 0.025f64.exp();
    assert!((target - 1.0253).abs() < 5e-5);
    assert!((mean - target).abs() < 3.0 * sd / n.sqrt(), "{mean} vs {target} (se {})", sd / n.sqrt());
}

fn random_positive_state(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Matrix {
    Matrix::from_vec(rows, d, (0..rows * d).map(|_| rng.random_range(-1.0f64..1.0).exp()).collect())
}

/// Drift and driver at the known solution against `(a X, -phi(t, X))`.
fn check_compensators(quadratic: bool) {
    let p = LognormalParams::default();
    let model = if quadratic { lognormal_quadratic(p) } else { lognormal_linear(p) }.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(if quadratic { 2 } else { 1 });
    let states = 1000;
    let mut worst = 0.0f64;
    for _ in 0..states / 50 {
        let t = rng.random_range(0.0..1.5);
        let rows = 50;
        let xm = random_positive_state(&mut rng, rows, p.d);
        let ea = (p.alpha * t).exp();
        let ym = Matrix::from_vec(
            rows,
            1,
            (0..rows).map(|r| ea * xm.row(r).iter().map(|v| v.ln()).sum::<f64>()).collect(),
        );
        let mut tape = Tape::new();
        let x = tape.leaf(xm.clone());
        let y = tape.leaf(ym);
        let z = tape.constant(rows, p.d, p.sigma * ea);
        let law = p.exact_law(t, quadratic).to_tape(&mut tape);
        let drift = model.drift(&mut tape, t, x, y, z, &law).unwrap();
        let driver = model.driver(&mut tape, t, x, y, z, &law).unwrap();
        for r in 0..rows {
            for (c, &xv) in xm.row(r).iter().enumerate() {
                let got = tape.value(drift).get(r, c);
                worst = worst.max((got - p.a * xv).abs() / (1.0 + xv.abs()));
            }
            let phi = phi_source(&p, t, xm.row(r)).unwrap();
            let got = tape.value(driver).get(r, 0);
            worst = worst.max((got + phi).abs() / (1.0 + phi.abs()));
        }
    }
    assert!(worst < 1e-12, "largest scaled residual {worst:e}");
}

#[test]
fn linear_compensator_cancels_at_known_solution() {
    check_compensators(false);
}

#[test]
fn quadratic_compensator_cancels_at_known_solution() {
    check_compensators(true);
}

#[test]
fn quadratic_without_squares_weight_matches_linear() {
    let p = LognormalParams {
        c_coef: 0.0,
        ..Default::default()
    };
    let lin = lognormal_linear(p).unwrap();
    let quad = lognormal_quadratic(p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xm = random_positive_state(&mut rng, 20, p.d);
    let ym = Matrix::from_vec(20, 1, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect());
    let zm = Matrix::from_vec(20, p.d, (0..20 * p.d).map(|_| rng.random_range(-1.0..1.0)).collect());
    let lin_law: Vec<f64> = (0..lin.layout().total()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let l = lin.layout();
    // Same first halves; arbitrary second halves.
    let mut quad_law = Vec::new();
    quad_law.extend_from_slice(&lin_law[..l.x]);
    quad_law.extend(std::iter::repeat(0.3).take(l.x));
    quad_law.extend_from_slice(&lin_law[l.x..l.x + l.y]);
    quad_law.extend(std::iter::repeat(0.3).take(l.y));
    quad_law.extend_from_slice(&lin_law[l.x + l.y..]);
    quad_law.extend(std::iter::repeat(0.3).take(l.z));

    let eval = |model: &ModelDefinition, law: &[f64]| {
        let mut tape = Tape::new();
        let x = tape.leaf(xm.clone());
        let y = tape.leaf(ym.clone());
        let z = tape.leaf(zm.clone());
        let lv = law_on(&mut tape, model, law);
        let b = model.drift(&mut tape, 0.3, x, y, z, &lv).unwrap();
        let f = model.driver(&mut tape, 0.3, x, y, z, &lv).unwrap();
        (tape.value(b).clone(), tape.value(f).clone())
    };
    let (bl, fl) = eval(&lin, &lin_law);
    let (bq, fq) = eval(&quad, &quad_law);
    for (a, b) in bl.as_slice().iter().chain(fl.as_slice()).zip(bq.as_slice().iter().chain(fq.as_slice())) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn price_impact_oracle_tends_to_x0() {
    let p = PriceImpactParams::default();
    let mut prev = (price_impact_reference(&p, 0.1).unwrap() - p.x0).abs();
    for t in [1e-2, 1e-3, 1e-4, 1e-6] {
        let gap = (price_impact_reference(&p, t).unwrap() - p.x0).abs();
        assert!(gap < prev);
        prev = gap;
    }
    assert!(prev < 1e-5);
}

#[test]
fn lognormal_reference_means() {
    let p = LognormalParams::default();
    for (t, published) in [(0.25, 1.0253), (0.75, 1.0779), (1.0, 1.1052), (1.5, 1.1618)] {
        assert!((lognormal_moments(&p, t).mean_x - published).abs() < 5e-5, "T = {t}");
    }
    let k = lognormal_moments(&p, 1.0).second_x;
    assert!((k - 0.36f64.exp()).abs() < 1e-12);
}

fn tiny_pair(model: &ModelDefinition, seed: u64) -> NetworkPair {
    let (d, k) = (model.d, model.k);
    NetworkPair {
        y: NetworkParams::init(&[d, 4, k], seed).unwrap(),
        z: NetworkParams::init(&[d + 1, 4, k * d], seed + 1).unwrap(),
    }
}

fn sweep_loss(model: &ModelDefinition, grid: &TimeGrid, pair: &NetworkPair, psi: Option<&NetworkParams>) -> (f64, Vec<f64>) {
    let rng = RngStream::new(17);
    let mut tape = Tape::new();
    let bound = pair.bind_pair(&mut tape);
    let psi_bound = psi.map(|p| p.bind(&mut tape));
    let mut law = match &psi_bound {
        Some(b) => LawSource::Network(b),
        None => LawSource::Batch,
    };
    let sweep = forward_sweep(&mut tape, model, grid, &bound, &mut law, 3, &rng, Phase::Train(0)).unwrap();
    let mut loss = sweep.loss;
    if let Some(b) = &psi_bound {
        let pen = penalty_loss(&mut tape, b, grid, &sweep.moments, model.layout(), 2.0).unwrap();
        loss = tape.add(loss, pen);
    }
    let grads = tape.backward(loss).unwrap();
    let mut flat: Vec<f64> = Vec::new();
    for net in [bound.y.gradients(&grads), bound.z.gradients(&grads)] {
        flat.extend(net.buffers().flat_map(|s| s.to_vec()));
    }
    if let Some(b) = &psi_bound {
        flat.extend(b.gradients(&grads).buffers().flat_map(|s| s.to_vec()));
    }
    (tape.value(loss).item(), flat)
}

/// Central differences over every network parameter of one full sweep.
fn check_sweep_gradients(model: &ModelDefinition, with_psi: bool) {
    let grid = TimeGrid::new(0.05, 2).unwrap();
    let pair = tiny_pair(model, 31);
    let psi = with_psi.then(|| NetworkParams::init(&[1, 4, model.layout().total()], 40).unwrap());
    let (_, analytic) = sweep_loss(model, &grid, &pair, psi.as_ref());

    let h = 1e-5;
    let mut k = 0;
    let mut nets: Vec<NetworkParams> = vec![pair.y.clone(), pair.z.clone()];
    nets.extend(psi.clone());
    for which in 0..nets.len() {
        let lens: Vec<usize> = nets[which].buffers().map(|b| b.len()).collect();
        for (j, len) in lens.into_iter().enumerate() {
            for e in 0..len {
                let eval = |shift: f64| {
                    let mut n = nets.clone();
                    n[which].buffers_mut().nth(j).unwrap()[e] += shift;
                    let p = NetworkPair {
                        y: n[0].clone(),
                        z: n[1].clone(),
                    };
                    sweep_loss(model, &grid, &p, n.get(2)).0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let g = analytic[k];
                k += 1;
                if g.abs() > 1e-8 {
                    let rel = (g - fd).abs() / g.abs().max(fd.abs());
                    assert!(rel < 1e-5, "{}: net {which} buffer {j} entry {e}: {g:e} vs {fd:e}", model.name);
                }
            }
        }
    }
    assert_eq!(k, analytic.len());
}

#[test]
fn sweep_gradients_match_central_differences_for_every_model() {
    let small_pi = PriceImpactParams { d: 2, ..Default::default() };
    let small_ln = LognormalParams { d: 2, ..Default::default() };
    let models = [
        price_impact_pontryagin(small_pi).unwrap(),
        price_impact_weak(small_pi).unwrap(),
        population_model(PopulationParams { rho: 0.5, ..Default::default() }).unwrap(),
        lognormal_linear(small_ln).unwrap(),
        lognormal_quadratic(small_ln).unwrap(),
    ];
    for model in &models {
        check_sweep_gradients(model, false);
    }
    check_sweep_gradients(&models[0], true);
    check_sweep_gradients(&models[4], true);
}
