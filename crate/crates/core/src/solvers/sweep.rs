//! Forward simulation of the discretized system under a feedback `(Y_0, Z)`.

use crate::autodiff::{BoundNetwork, Matrix, NetworkParams, Tape, Var};
use crate::error::{Error, Result};
use crate::meanfield::{batch_moments, law_network_row, LawVars, MeanFieldVector, RingBuffer};
use crate::models::ModelDefinition;
use crate::sde::{
    euler_backward_step, euler_forward_step, gaussian_increments, sample_initial, PathBatch, RngStream, Stream,
    TimeGrid,
};

/// The decoupling field being trained: `Y_0 = Y(X_0)` and `Z_i = Z(t_i, X_i)`.
pub trait Feedback {
    /// `B x k`.
    fn initial(&self, tape: &mut Tape, x0: Var) -> Result<Var>;
    /// `B x (k*d)`.
    fn control(&self, tape: &mut Tape, t: f64, x: Var) -> Result<Var>;
}

/// Something that can place a [`Feedback`] on a fresh tape.
pub trait FeedbackSource {
    fn bind<'a>(&'a self, tape: &mut Tape) -> Box<dyn Feedback + 'a>;
}

/// Networks `Y: R^d -> R^k` and `Z: R^{1+d} -> R^{k*d}` with input `(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPair {
    pub y: NetworkParams,
    pub z: NetworkParams,
}

pub struct BoundPair {
    pub y: BoundNetwork,
    pub z: BoundNetwork,
}

impl NetworkPair {
    pub fn bind_pair(&self, tape: &mut Tape) -> BoundPair {
        BoundPair {
            y: self.y.bind(tape),
            z: self.z.bind(tape),
        }
    }
}

impl Feedback for BoundPair {
    fn initial(&self, tape: &mut Tape, x0: Var) -> Result<Var> {
        check_width(self.y.input_width(), tape.shape(x0).1, "Y network")?;
        Ok(self.y.forward(tape, x0))
    }

    fn control(&self, tape: &mut Tape, t: f64, x: Var) -> Result<Var> {
        let (rows, cols) = tape.shape(x);
        check_width(self.z.input_width(), cols + 1, "Z network")?;
        let time = tape.constant(rows, 1, t);
        let input = tape.concat_cols(&[time, x]);
        Ok(self.z.forward(tape, input))
    }
}

impl FeedbackSource for NetworkPair {
    fn bind<'a>(&'a self, tape: &mut Tape) -> Box<dyn Feedback + 'a> {
        Box::new(self.bind_pair(tape))
    }
}

fn check_width(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::config(format!("{what} expects input width {expected}, got {got}")));
    }
    Ok(())
}

/// Feedback given by plain functions of the state, recorded as constants.
pub struct FnFeedback<Y, Z> {
    pub y: Y,
    pub z: Z,
}

impl<Y, Z> Feedback for FnFeedback<Y, Z>
where
    Y: Fn(&Matrix) -> Matrix,
    Z: Fn(f64, &Matrix) -> Matrix,
{
    fn initial(&self, tape: &mut Tape, x0: Var) -> Result<Var> {
        let v = (self.y)(tape.value(x0));
        Ok(tape.leaf(v))
    }

    fn control(&self, tape: &mut Tape, t: f64, x: Var) -> Result<Var> {
        let v = (self.z)(t, tape.value(x));
        Ok(tape.leaf(v))
    }
}

impl<Y, Z> FeedbackSource for FnFeedback<Y, Z>
where
    Y: Fn(&Matrix) -> Matrix,
    Z: Fn(f64, &Matrix) -> Matrix,
{
    fn bind<'a>(&'a self, _tape: &mut Tape) -> Box<dyn Feedback + 'a> {
        Box::new(FnFeedback {
            y: &self.y,
            z: &self.z,
        })
    }
}

/// Where the law estimate `u_i` comes from during a sweep.
pub enum LawSource<'a> {
    /// Taped batch means of the current sweep.
    Batch,
    /// Ring-buffer blend of the current batch mean, entering as a constant.
    /// With `write` false the buffer is only read.
    Dynamic {
        buffer: &'a mut RingBuffer,
        iteration: usize,
        write: bool,
    },
    /// A law network bound on the sweep's tape.
    Network(&'a BoundNetwork),
    /// A known function of time.
    Fixed(&'a dyn Fn(f64) -> Result<MeanFieldVector>),
}

/// Which random substreams a sweep draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Training iteration `m`.
    Train(usize),
    /// Evaluation after training.
    Evaluate,
}

const EVAL_INITIAL_STEP: u64 = u64::MAX;

fn initial_states(model: &ModelDefinition, batch: usize, rng: &RngStream, phase: Phase) -> Result<Matrix> {
    let mut r = match phase {
        Phase::Train(m) => rng.substream(Stream::Initial, m as u64, 0),
        Phase::Evaluate => rng.substream(Stream::Evaluation, 0, EVAL_INITIAL_STEP),
    };
    sample_initial(&model.initial, batch, model.d, &mut r)
}

fn increments(model: &ModelDefinition, batch: usize, rng: &RngStream, phase: Phase, i: usize) -> Result<Matrix> {
    let mut r = match phase {
        Phase::Train(m) => rng.substream(Stream::Increment, m as u64, i as u64),
        Phase::Evaluate => rng.substream(Stream::Evaluation, 0, i as u64),
    };
    gaussian_increments(batch, model.d, &mut r)
}

fn iteration_of(phase: Phase) -> usize {
    match phase {
        Phase::Train(m) => m,
        Phase::Evaluate => 0,
    }
}

/// Law used at node `i`, plus the taped batch moment row when a penalty needs it.
#[allow(clippy::too_many_arguments)]
fn law_at(
    tape: &mut Tape,
    model: &ModelDefinition,
    law: &mut LawSource,
    i: usize,
    t: f64,
    x: Var,
    y: Var,
    z: Var,
) -> Result<(LawVars, Option<Var>)> {
    let layout = model.layout();
    match law {
        LawSource::Batch => Ok((batch_moments(tape, model, x, y, z), None)),
        LawSource::Dynamic {
            buffer,
            iteration,
            write,
        } => {
            let current = batch_moments(tape, model, x, y, z).values(tape);
            let blended = buffer.blend(i, &current);
            if *write {
                buffer.write(i, *iteration, current);
            }
            Ok((blended.to_tape(tape), None))
        }
        LawSource::Network(psi) => {
            if layout.total() == 0 {
                return Ok((LawVars::default(), None));
            }
            let row = law_network_row(tape, psi, t, layout)?;
            let moments = batch_moments(tape, model, x, y, z).concat(tape);
            Ok((LawVars::split(tape, row, layout), moments))
        }
        LawSource::Fixed(f) => Ok((f(t)?.to_tape(tape), None)),
    }
}

fn terminal_law(tape: &mut Tape, model: &ModelDefinition, grid: &TimeGrid, law: &LawSource, x: Var) -> Result<Option<Var>> {
    match law {
        LawSource::Fixed(f) => Ok(f(grid.horizon())?.to_tape(tape).x),
        _ => Ok(model.phi[0].apply(tape, x).map(|v| tape.mean_rows(v))),
    }
}

struct Step {
    z: Var,
    law: LawVars,
    moment: Option<Var>,
    x: Var,
    y: Var,
}

#[allow(clippy::too_many_arguments)]
fn advance(
    tape: &mut Tape,
    model: &ModelDefinition,
    grid: &TimeGrid,
    feedback: &dyn Feedback,
    law: &mut LawSource,
    rng: &RngStream,
    phase: Phase,
    i: usize,
    x: Var,
    y: Var,
) -> Result<Step> {
    let iteration = iteration_of(phase);
    let t = grid.time(i);
    let batch = tape.shape(x).0;
    let run = |tape: &mut Tape, law: &mut LawSource| -> Result<Step> {
        let z = feedback.control(tape, t, x)?;
        let (lv, moment) = law_at(tape, model, law, i, t, x, y, z)?;
        let delta = tape.leaf(increments(model, batch, rng, phase, i)?);
        let next_x = euler_forward_step(tape, model, t, x, y, z, &lv, delta, grid.dt())?;
        let next_y = euler_backward_step(tape, model, t, x, y, z, &lv, delta, grid.dt())?;
        Ok(Step {
            z,
            law: lv,
            moment,
            x: next_x,
            y: next_y,
        })
    };
    run(tape, law).map_err(|e| e.at(iteration, i))
}

fn terminal_loss(
    tape: &mut Tape,
    model: &ModelDefinition,
    grid: &TimeGrid,
    law: &LawSource,
    x: Var,
    y: Var,
    phase: Phase,
) -> Result<Var> {
    let n = grid.steps();
    let run = |tape: &mut Tape| -> Result<Var> {
        let law_x = terminal_law(tape, model, grid, law, x)?;
        let g = model.terminal(tape, grid.horizon(), x, law_x)?;
        let gap = tape.sub(y, g);
        let sq = tape.squared_norm(gap);
        Ok(tape.scale(sq, 1.0 / tape.shape(x).0 as f64))
    };
    let loss = run(tape).map_err(|e| e.at(iteration_of(phase), n))?;
    if !tape.value(loss).is_finite() {
        return Err(Error::Divergence {
            iteration: iteration_of(phase),
            step: Some(n),
            reason: "non-finite terminal loss".into(),
        });
    }
    Ok(loss)
}

/// A taped forward pass.
#[derive(Debug, Clone)]
pub struct Sweep {
    /// `(1/B) sum_b |Y_N - g(X_N, u^X_N)|^2`.
    pub loss: Var,
    /// `X_0 .. X_N`.
    pub x: Vec<Var>,
    /// `Y_0 .. Y_N`.
    pub y: Vec<Var>,
    /// `Z_0 .. Z_{N-1}`.
    pub z: Vec<Var>,
    /// Law estimate used at `t_0 .. t_{N-1}`.
    pub laws: Vec<LawVars>,
    /// Taped batch moment rows, recorded only for [`LawSource::Network`].
    pub moments: Vec<Var>,
}

impl Sweep {
    /// Path values at every node. `Z` at the final node is reported as zero.
    pub fn trajectory(&self, tape: &Tape) -> Vec<PathBatch> {
        (0..self.x.len())
            .map(|i| {
                let x = tape.value(self.x[i]).clone();
                let y = tape.value(self.y[i]).clone();
                let z = match self.z.get(i) {
                    Some(&z) => tape.value(z).clone(),
                    None => {
                        let (rows, cols) = tape.shape(self.z[0]);
                        Matrix::zeros(rows, cols)
                    }
                };
                PathBatch { step: i, x, y, z }
            })
            .collect()
    }
}

/// Records one full forward pass of `batch` paths on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn forward_sweep(
    tape: &mut Tape,
    model: &ModelDefinition,
    grid: &TimeGrid,
    feedback: &dyn Feedback,
    law: &mut LawSource,
    batch: usize,
    rng: &RngStream,
    phase: Phase,
) -> Result<Sweep> {
    let x0 = tape.leaf(initial_states(model, batch, rng, phase)?);
    let y0 = feedback.initial(tape, x0).map_err(|e| e.at(iteration_of(phase), 0))?;
    let n = grid.steps();
    let mut sweep = Sweep {
        loss: x0,
        x: vec![x0],
        y: vec![y0],
        z: Vec::with_capacity(n),
        laws: Vec::with_capacity(n),
        moments: Vec::new(),
    };
    let (mut x, mut y) = (x0, y0);
    for i in 0..n {
        let step = advance(tape, model, grid, feedback, law, rng, phase, i, x, y)?;
        sweep.z.push(step.z);
        sweep.laws.push(step.law);
        sweep.moments.extend(step.moment);
        sweep.x.push(step.x);
        sweep.y.push(step.y);
        (x, y) = (step.x, step.y);
    }
    sweep.loss = terminal_loss(tape, model, grid, law, x, y, phase)?;
    Ok(sweep)
}

/// Result of an untaped forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub initial_y: Matrix,
    pub terminal_x: Matrix,
    pub terminal_y: Matrix,
    pub loss: f64,
    /// Law estimate used at `t_0 .. t_{N-1}`.
    pub laws: Vec<MeanFieldVector>,
}

/// Forward pass that keeps only the current node in memory, one tape per step.
///
/// Suited to large evaluation batches. [`LawSource::Network`] is refused since
/// its network lives on another tape; wrap the parameters in
/// [`LawSource::Fixed`] instead.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    model: &ModelDefinition,
    grid: &TimeGrid,
    source: &dyn FeedbackSource,
    law: &mut LawSource,
    batch: usize,
    rng: &RngStream,
    phase: Phase,
) -> Result<Simulation> {
    if matches!(law, LawSource::Network(_)) {
        return Err(Error::Usage("simulate needs an untaped law source".into()));
    }
    let mut x = initial_states(model, batch, rng, phase)?;
    let mut y = {
        let mut tape = Tape::new();
        let fb = source.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y0 = fb.initial(&mut tape, xv).map_err(|e| e.at(iteration_of(phase), 0))?;
        tape.value(y0).clone()
    };
    let initial_y = y.clone();
    let mut laws = Vec::with_capacity(grid.steps());
    for i in 0..grid.steps() {
        let mut tape = Tape::new();
        let fb = source.bind(&mut tape);
        let xv = tape.leaf(x);
        let yv = tape.leaf(y);
        let step = advance(&mut tape, model, grid, fb.as_ref(), law, rng, phase, i, xv, yv)?;
        laws.push(step.law.values(&tape));
        x = tape.value(step.x).clone();
        y = tape.value(step.y).clone();
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let yv = tape.leaf(y.clone());
    let loss = terminal_loss(&mut tape, model, grid, law, xv, yv, phase)?;
    Ok(Simulation {
        initial_y,
        terminal_x: x,
        terminal_y: y,
        loss: tape.value(loss).item(),
        laws,
    })
}
