//! Backward sequence of one-step regressions.
//!
//! Each time index `i < N` has its own networks `Y^i`, `Z^i` of the state.
//! An outer iteration first simulates `R` paths forward with the current
//! networks to estimate, at every node, the marginal mean and variance of
//! `X` and the blended law `u~_i`. It then walks backward from `N - 1` to `0`,
//! fitting `(Y^i, Z^i)` on states resampled from a Gaussian with the recorded
//! moments so that one Euler step of `Y` lands on the frozen `Y^{i+1}` (or on
//! `g` at the last step).

use std::time::Instant;

use super::config::{Scheme, SolverConfig};
use super::global::{check_scheme, column_means, initial_law_x, layer_sizes};
use super::report::{CoordinateSummary, LawPoint, RunReport, Status};
use crate::autodiff::{AdamState, Matrix, NetworkParams, Tape};
use crate::error::{Error, Result};
use crate::meanfield::{batch_moments, dynamic_update, initial_law_estimate, MeanFieldVector, RingBuffer};
use crate::models::ModelDefinition;
use crate::sde::{derive_seed, euler_forward_step, sample_initial, standard_normals, RngStream, Stream, TimeGrid};

const SEED_BASE: u64 = 100;

/// Marginal statistics of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardStats {
    /// Per-coordinate mean of `X_i`, `i = 0..=N`.
    pub mean: Vec<Vec<f64>>,
    /// Per-coordinate variance of `X_i`, clamped at zero.
    pub variance: Vec<Vec<f64>>,
    /// Blended law `u~_i`, `i = 0..=N`.
    pub laws: Vec<MeanFieldVector>,
    /// Mean of `Y^0(X_0)` per component.
    pub initial_y: Vec<f64>,
}

/// Per-step networks of the local scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalNetworks {
    pub y: Vec<NetworkParams>,
    pub z: Vec<NetworkParams>,
}

impl LocalNetworks {
    pub fn init(model: &ModelDefinition, grid: &TimeGrid, cfg: &SolverConfig) -> Result<Self> {
        let (d, k) = (model.d, model.k);
        let mut y = Vec::with_capacity(grid.steps());
        let mut z = Vec::with_capacity(grid.steps());
        for i in 0..grid.steps() as u64 {
            y.push(NetworkParams::init(
                &layer_sizes(d, cfg, d, k),
                derive_seed(cfg.seed, SEED_BASE + 2 * i),
            )?);
            z.push(NetworkParams::init(
                &layer_sizes(d, cfg, d, k * d),
                derive_seed(cfg.seed, SEED_BASE + 2 * i + 1),
            )?);
        }
        Ok(LocalNetworks { y, z })
    }
}

fn variance_clamped(m: &Matrix) -> Vec<f64> {
    m.variance_rows().iter().map(|v| v.max(0.0)).collect()
}

/// Simulates `samples` paths with the current networks.
///
/// With `write` the blended law estimates are pushed into the ring buffer at
/// slot `iteration % M`; otherwise the buffer is only read.
#[allow(clippy::too_many_arguments)]
pub fn forward_stats(
    model: &ModelDefinition,
    grid: &TimeGrid,
    nets: &LocalNetworks,
    buffer: &mut RingBuffer,
    iteration: usize,
    write: bool,
    samples: usize,
    rng: &RngStream,
) -> Result<ForwardStats> {
    let n = grid.steps();
    let mut r0 = rng.substream(Stream::LocalIncrement, iteration as u64, u64::MAX);
    let mut x = sample_initial(&model.initial, samples, model.d, &mut r0)?;
    let mut stats = ForwardStats {
        mean: Vec::with_capacity(n + 1),
        variance: Vec::with_capacity(n + 1),
        laws: Vec::with_capacity(n + 1),
        initial_y: Vec::new(),
    };
    let blend = |buffer: &mut RingBuffer, i: usize, u: &MeanFieldVector| {
        if write {
            dynamic_update(buffer, i, u, iteration)
        } else {
            buffer.blend(i, u)
        }
    };
    for i in 0..=n {
        stats.mean.push(column_means(&x));
        stats.variance.push(variance_clamped(&x));
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        if i == n {
            let law_x = model.phi[0].apply(&mut tape, xv).map(|v| tape.mean_rows(v));
            let g = model
                .terminal(&mut tape, grid.horizon(), xv, law_x)
                .map_err(|e| e.at(iteration, n))?;
            let u = MeanFieldVector {
                x: law_x.map(|v| tape.value(v).as_slice().to_vec()).unwrap_or_default(),
                y: model.phi[1].mean(tape.value(g)),
                z: model.phi[2].apply_row(&vec![0.0; model.k * model.d]),
            };
            stats.laws.push(blend(buffer, n, &u));
            break;
        }
        let run = |tape: &mut Tape, buffer: &mut RingBuffer, stats: &mut ForwardStats| -> Result<Matrix> {
            let yb = nets.y[i].bind(tape);
            let zb = nets.z[i].bind(tape);
            let y = yb.forward(tape, xv);
            let z = zb.forward(tape, xv);
            if i == 0 {
                stats.initial_y = column_means(tape.value(y));
            }
            let u = batch_moments(tape, model, xv, y, z).values(tape);
            let law = blend(buffer, i, &u);
            let lv = law.to_tape(tape);
            stats.laws.push(law);
            let mut r = rng.substream(Stream::LocalIncrement, iteration as u64, i as u64);
            let delta = tape.leaf(standard_normals(samples, model.d, &mut r));
            let next = euler_forward_step(tape, model, grid.time(i), xv, y, z, &lv, delta, grid.dt())?;
            Ok(tape.value(next).clone())
        };
        x = run(&mut tape, buffer, &mut stats).map_err(|e| e.at(iteration, i))?;
    }
    Ok(stats)
}

/// One gradient step on `(Y^i, Z^i)`; returns the local loss before the update.
#[allow(clippy::too_many_arguments)]
fn local_step(
    model: &ModelDefinition,
    grid: &TimeGrid,
    cfg: &SolverConfig,
    nets: &mut LocalNetworks,
    adam: &mut AdamState,
    stats: &ForwardStats,
    i: usize,
    draw: u64,
    rng: &RngStream,
) -> Result<f64> {
    let (d, k, b, n) = (model.d, model.k, cfg.batch, grid.steps());
    let dt = grid.dt();
    let mut r = rng.substream(Stream::Resample, draw, i as u64);
    let mut x = standard_normals(b, d, &mut r);
    let xi = standard_normals(b, d, &mut r);
    let sd: Vec<f64> = stats.variance[i].iter().map(|v| v.sqrt()).collect();
    for row in 0..b {
        for ((v, mu), s) in x.row_mut(row).iter_mut().zip(&stats.mean[i]).zip(&sd) {
            *v = mu + s * *v;
        }
    }

    let mut tape = Tape::new();
    let yb = nets.y[i].bind(&mut tape);
    let zb = nets.z[i].bind(&mut tape);
    let xv = tape.leaf(x);
    let y = yb.forward(&mut tape, xv);
    let z = zb.forward(&mut tape, xv);
    let lv = stats.laws[i].to_tape(&mut tape);
    let xi = tape.leaf(xi);
    let t = grid.time(i);
    let next_x = euler_forward_step(&mut tape, model, t, xv, y, z, &lv, xi, dt)?;
    let next_y = if i + 1 == n {
        let law_x = stats.laws[n].to_tape(&mut tape).x;
        model.terminal(&mut tape, grid.horizon(), next_x, law_x)?
    } else {
        let frozen = nets.y[i + 1].bind(&mut tape);
        frozen.forward(&mut tape, next_x)
    };
    let f = model.driver(&mut tape, t, xv, y, z, &lv)?;
    let f_dt = tape.scale(f, dt);
    let zdw = tape.row_contract(z, xi, k);
    let zdw = tape.scale(zdw, dt.sqrt());
    let lhs = tape.add(f_dt, next_y);
    let lhs = tape.sub(lhs, y);
    let resid = tape.sub(lhs, zdw);
    let sq = tape.squared_norm(resid);
    let loss = tape.scale(sq, 1.0 / b as f64);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            step: Some(i),
            reason: "non-finite local loss".into(),
        });
    }
    let grads = tape.backward(loss)?;
    let g = [yb.gradients(&grads), zb.gradients(&grads)];
    let mut pair = [nets.y[i].clone(), nets.z[i].clone()];
    adam.step(&mut pair, &g, cfg.learning_rate)?;
    let [ny, nz] = pair;
    nets.y[i] = ny;
    nets.z[i] = nz;
    Ok(value)
}

pub fn solve_local(model: &ModelDefinition, grid: &TimeGrid, cfg: &SolverConfig) -> Result<RunReport> {
    train_local(model, grid, cfg).map(|(report, _)| report)
}

/// Trains the local scheme; divergence yields a report with status `diverged`.
pub fn train_local(model: &ModelDefinition, grid: &TimeGrid, cfg: &SolverConfig) -> Result<(RunReport, LocalNetworks)> {
    check_scheme(cfg, Scheme::Local)?;
    let start = Instant::now();
    let n = grid.steps();
    let rng = RngStream::new(cfg.seed);
    let mut nets = LocalNetworks::init(model, grid, cfg)?;
    let mut adams = (0..n)
        .map(|i| AdamState::new(&[nets.y[i].clone(), nets.z[i].clone()], cfg.adam))
        .collect::<Result<Vec<_>>>()?;
    let init = initial_law_estimate(model, initial_law_x(model, cfg, &rng)?);
    let mut buffer = RingBuffer::new(n + 1, cfg.memory, &init)?;

    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut status = Status::MaxIter;
    let mut failure = None;
    let mut gradient_steps = 0;

    'outer: for m in 0..cfg.iterations {
        let outcome = (|| -> Result<f64> {
            let stats = forward_stats(model, grid, &nets, &mut buffer, m, true, cfg.law_samples, &rng)?;
            let mut total = 0.0;
            for i in (0..n).rev() {
                if cfg.warm_start_from_next && i + 1 < n {
                    nets.y[i] = nets.y[i + 1].clone();
                    nets.z[i] = nets.z[i + 1].clone();
                }
                let mut last = 0.0;
                for h in 0..cfg.inner_steps {
                    let draw = (m * cfg.inner_steps + h) as u64;
                    last = local_step(model, grid, cfg, &mut nets, &mut adams[i], &stats, i, draw, &rng)
                        .map_err(|e| e.at(m, i))?;
                    gradient_steps += 1;
                }
                total += last;
            }
            Ok(total)
        })();
        match outcome {
            Ok(total) => {
                losses.push(total);
                if cfg.loss_tolerance.is_some_and(|tol| total < tol) {
                    status = Status::Converged;
                    break 'outer;
                }
            }
            Err(e) if e.is_divergence() => {
                status = Status::Diverged;
                failure = Some(e.to_string());
                break 'outer;
            }
            Err(e) => return Err(e),
        }
    }

    let mut terminal_mean = None;
    let mut initial_value = None;
    let mut law_trajectory = None;
    if status != Status::Diverged {
        let samples = cfg.eval_batch.max(cfg.law_samples);
        match forward_stats(model, grid, &nets, &mut buffer, cfg.iterations, false, samples, &rng) {
            Ok(stats) => {
                terminal_mean = Some(CoordinateSummary::new(stats.mean[n].clone()));
                initial_value = Some(CoordinateSummary::new(stats.initial_y.clone()));
                if cfg.record_law {
                    law_trajectory = Some(
                        stats
                            .laws
                            .iter()
                            .take(n)
                            .enumerate()
                            .map(|(i, law)| LawPoint {
                                step: i,
                                t: grid.time(i),
                                law: law.clone(),
                            })
                            .collect(),
                    );
                }
            }
            Err(e) if e.is_divergence() => {
                status = Status::Diverged;
                failure = Some(format!("evaluation: {e}"));
            }
            Err(e) => return Err(e),
        }
    }

    let report = RunReport {
        model: model.name.clone(),
        params: model.params.clone(),
        horizon: grid.horizon(),
        steps: n,
        config: cfg.clone(),
        status,
        failure,
        losses,
        gradient_steps,
        terminal_mean,
        initial_value,
        law_trajectory,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, nets))
}
