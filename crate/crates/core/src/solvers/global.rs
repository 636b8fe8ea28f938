use std::time::Instant;

use super::config::{Scheme, SolverConfig};
use super::report::{CoordinateSummary, LawPoint, RunReport, Status};
use super::sweep::{forward_sweep, BoundPair, simulate, LawSource, NetworkPair, Phase, Simulation};
use crate::autodiff::{AdamState, Matrix, NetworkParams, Tape};
use crate::error::{Error, Result};
use crate::meanfield::{initial_law_estimate, law_network_eval, penalty_loss, MeanFieldVector, RingBuffer};
use crate::models::ModelDefinition;
use crate::sde::{derive_seed, sample_initial, InitialLaw, RngStream, Stream, TimeGrid};

const SEED_Y: u64 = 1;
const SEED_Z: u64 = 2;
const SEED_PSI: u64 = 3;

pub(crate) fn layer_sizes(input: usize, cfg: &SolverConfig, d: usize, output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(std::iter::repeat(cfg.hidden_width_for(d)).take(cfg.hidden_layers));
    sizes.push(output);
    sizes
}

/// `E[phi1(xi)]`: exact for a constant initial law, Monte Carlo otherwise.
pub(crate) fn initial_law_x(model: &ModelDefinition, cfg: &SolverConfig, rng: &RngStream) -> Result<Vec<f64>> {
    match &model.initial {
        InitialLaw::Constant { value } => Ok(model.phi[0].apply_row(value)),
        law => {
            let mut r = rng.substream(Stream::LawEstimate, 0, 0);
            let xi = sample_initial(law, cfg.law_samples, model.d, &mut r)?;
            Ok(model.phi[0].mean(&xi))
        }
    }
}

pub(crate) fn column_means(m: &Matrix) -> Vec<f64> {
    m.mean_rows()
}

pub(crate) fn check_scheme(cfg: &SolverConfig, expected: Scheme) -> Result<()> {
    if cfg.scheme != expected {
        return Err(Error::config(format!(
            "configuration is for the {} scheme, called the {} solver",
            cfg.scheme.name(),
            expected.name()
        )));
    }
    cfg.validate()
}

/// Runs whichever scheme `cfg` names.
pub fn solve(model: &ModelDefinition, grid: &TimeGrid, cfg: &SolverConfig) -> Result<RunReport> {
    match cfg.scheme {
        Scheme::Local => super::local::solve_local(model, grid, cfg),
        _ => solve_global(model, grid, cfg),
    }
}

pub fn solve_direct(model: &ModelDefinition, grid: &TimeGrid, cfg: &SolverConfig) -> Result<RunReport> {
    check_scheme(cfg, Scheme::Direct)?;
    solve_global(model, grid, cfg)
}

pub fn solve_dynamic(model: &ModelDefinition, grid: &TimeGrid, cfg: &SolverConfig) -> Result<RunReport> {
    check_scheme(cfg, Scheme::Dynamic)?;
    solve_global(model, grid, cfg)
}

pub fn solve_expectation(model: &ModelDefinition, grid: &TimeGrid, cfg: &SolverConfig) -> Result<RunReport> {
    check_scheme(cfg, Scheme::Expectation)?;
    solve_global(model, grid, cfg)
}

/// Trained state of a global run, for callers that want the networks.
#[derive(Debug, Clone)]
pub struct GlobalOutcome {
    pub report: RunReport,
    pub networks: NetworkPair,
    pub law_network: Option<NetworkParams>,
}

fn solve_global(model: &ModelDefinition, grid: &TimeGrid, cfg: &SolverConfig) -> Result<RunReport> {
    train_global(model, grid, cfg).map(|o| o.report)
}

/// Trains one of the global schemes and evaluates the result.
///
/// Divergence is not an error: the returned report carries status
/// `diverged` and the losses recorded so far.
pub fn train_global(model: &ModelDefinition, grid: &TimeGrid, cfg: &SolverConfig) -> Result<GlobalOutcome> {
    cfg.validate()?;
    if cfg.scheme == Scheme::Local {
        return Err(Error::config("train_global does not run the local scheme"));
    }
    let start = Instant::now();
    let (d, k) = (model.d, model.k);
    let layout = model.layout();
    let rng = RngStream::new(cfg.seed);

    let mut nets = vec![
        NetworkParams::init(&layer_sizes(d, cfg, d, k), derive_seed(cfg.seed, SEED_Y))?,
        NetworkParams::init(&layer_sizes(d + 1, cfg, d, k * d), derive_seed(cfg.seed, SEED_Z))?,
    ];
    let use_psi = cfg.scheme == Scheme::Expectation && layout.total() > 0;
    if use_psi {
        nets.push(NetworkParams::init(
            &layer_sizes(1, cfg, d, layout.total()),
            derive_seed(cfg.seed, SEED_PSI),
        )?);
    }
    let mut buffer = match cfg.scheme {
        Scheme::Dynamic => {
            let init = initial_law_estimate(model, initial_law_x(model, cfg, &rng)?);
            Some(RingBuffer::new(grid.steps(), cfg.memory, &init)?)
        }
        _ => None,
    };
    let mut adam = AdamState::new(&nets, cfg.adam)?;

    let mut losses = Vec::with_capacity(cfg.iterations.max(1));
    let mut status = Status::MaxIter;
    let mut failure = None;
    let mut gradient_steps = 0;

    for m in 0..cfg.iterations.max(1) {
        let mut tape = Tape::new();
        let pair = BoundPair {
            y: nets[0].bind(&mut tape),
            z: nets[1].bind(&mut tape),
        };
        let psi = use_psi.then(|| nets[2].bind(&mut tape));
        let mut law = match (cfg.scheme, &mut buffer, &psi) {
            (Scheme::Dynamic, Some(buffer), _) => LawSource::Dynamic {
                buffer,
                iteration: m,
                write: true,
            },
            (Scheme::Expectation, _, Some(psi)) => LawSource::Network(psi),
            _ => LawSource::Batch,
        };
        let step = (|| -> Result<f64> {
            let sweep = forward_sweep(&mut tape, model, grid, &pair, &mut law, cfg.batch, &rng, Phase::Train(m))?;
            let mut total = sweep.loss;
            if let Some(psi) = &psi {
                let pen = penalty_loss(&mut tape, psi, grid, &sweep.moments, layout, cfg.penalty)?;
                total = tape.add(total, pen);
            }
            let value = tape.value(total).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    iteration: m,
                    step: None,
                    reason: "non-finite loss".into(),
                });
            }
            losses.push(value);
            if cfg.iterations == 0 {
                return Ok(value);
            }
            let grads = tape.backward(total)?;
            let mut g = vec![pair.y.gradients(&grads), pair.z.gradients(&grads)];
            if let Some(psi) = &psi {
                g.push(psi.gradients(&grads));
            }
            adam.step(&mut nets, &g, cfg.learning_rate).map_err(|e| match e {
                Error::Divergence { reason, .. } => Error::Divergence {
                    iteration: m,
                    step: None,
                    reason,
                },
                other => other,
            })?;
            gradient_steps += 1;
            Ok(value)
        })();
        match step {
            Ok(value) => {
                if cfg.loss_tolerance.is_some_and(|tol| value < tol) {
                    status = Status::Converged;
                    break;
                }
            }
            Err(e) if e.is_divergence() => {
                status = Status::Diverged;
                failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let networks = NetworkPair {
        y: nets[0].clone(),
        z: nets[1].clone(),
    };
    let law_network = use_psi.then(|| nets[2].clone());

    let mut terminal_mean = None;
    let mut initial_value = None;
    let mut law_trajectory = None;
    if status != Status::Diverged {
        let psi_eval = |t: f64| -> Result<MeanFieldVector> {
            match &law_network {
                Some(psi) => law_network_eval(psi, t, layout),
                None => Ok(MeanFieldVector::zeros(layout)),
            }
        };
        let mut law = match (&mut buffer, use_psi) {
            (Some(buffer), _) => LawSource::Dynamic {
                buffer,
                iteration: cfg.iterations,
                write: false,
            },
            (None, true) => LawSource::Fixed(&psi_eval),
            (None, false) => LawSource::Batch,
        };
        match simulate(model, grid, &networks, &mut law, cfg.eval_batch, &rng, Phase::Evaluate) {
            Ok(sim) => {
                let Simulation {
                    initial_y,
                    terminal_x,
                    laws,
                    ..
                } = sim;
                terminal_mean = Some(CoordinateSummary::new(column_means(&terminal_x)));
                initial_value = Some(CoordinateSummary::new(column_means(&initial_y)));
                if cfg.record_law {
                    law_trajectory = Some(
                        laws.into_iter()
                            .enumerate()
                            .map(|(i, law)| LawPoint {
                                step: i,
                                t: grid.time(i),
                                law,
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
        steps: grid.steps(),
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
    Ok(GlobalOutcome {
        report,
        networks,
        law_network,
    })
}
