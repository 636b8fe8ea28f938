//! Time grid, random streams, and the Euler–Maruyama steps of the coupled
//! forward/backward system.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::meanfield::LawVars;
use crate::models::ModelDefinition;

/// Uniform grid `t_i = i T / N`, `i = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::config("the grid needs at least one step"));
        }
        Ok(TimeGrid { horizon, steps })
    }

    /// Grid from a step size that must divide the horizon.
    pub fn from_step(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config(format!("dt must be positive, got {dt}")));
        }
        let ratio = horizon / dt;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::config(format!(
                "dt = {dt} does not divide T = {horizon} into a whole number of steps"
            )));
        }
        TimeGrid::new(horizon, steps as usize)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.horizon / self.steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitialLaw {
    Constant { value: Vec<f64> },
    Gaussian { mean: Vec<f64>, variance: Vec<f64> },
}

impl InitialLaw {
    pub fn constant(d: usize, x0: f64) -> Self {
        InitialLaw::Constant { value: vec![x0; d] }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Constant { value } => value.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InitialLaw::Constant { value } if value.iter().all(|v| v.is_finite()) => Ok(()),
            InitialLaw::Gaussian { mean, variance }
                if mean.len() == variance.len()
                    && mean.iter().all(|v| v.is_finite())
                    && variance.iter().all(|v| *v >= 0.0 && v.is_finite()) =>
            {
                Ok(())
            }
            other => Err(Error::config(format!("invalid initial law {other:?}"))),
        }
    }
}

/// Purpose tag separating the logical substreams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Initial = 1,
    Increment = 2,
    Resample = 3,
    LocalIncrement = 4,
    Evaluation = 5,
    LawEstimate = 6,
}

/// Seeded source of independent, addressable substreams.
///
/// A substream is a ChaCha8 stream selected by hashing `(purpose, iteration,
/// step)`. Draws within a substream are consumed in row order, so the values
/// depend only on the address and never on how work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for a named consumer (network initialization, ...).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(tag.wrapping_add(0x5EED)))
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, purpose: Stream, iteration: u64, step: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut s = self.seed;
        for chunk in key.chunks_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let stream = splitmix64(splitmix64(splitmix64(purpose as u64) ^ iteration) ^ step);
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        rng
    }
}

pub fn standard_normals(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// `batch` i.i.d. draws of the initial condition.
pub fn sample_initial(law: &InitialLaw, batch: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    if batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if law.dim() != d {
        return Err(Error::config(format!(
            "initial law has dimension {}, model has {d}",
            law.dim()
        )));
    }
    Ok(match law {
        InitialLaw::Constant { value } => Matrix::tile_row(value, batch),
        InitialLaw::Gaussian { mean, variance } => {
            let mut m = standard_normals(batch, d, rng);
            let sd: Vec<f64> = variance.iter().map(|v| v.sqrt()).collect();
            for r in 0..batch {
                for ((x, mu), s) in m.row_mut(r).iter_mut().zip(mean).zip(&sd) {
                    *x = mu + s * *x;
                }
            }
            m
        }
    })
}

/// Standard normal `delta`; the Brownian increment is `sqrt(dt) * delta`.
pub fn gaussian_increments(batch: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    if batch == 0 || d == 0 {
        return Err(Error::config("increments need positive batch and dimension"));
    }
    Ok(standard_normals(batch, d, rng))
}

/// Values of the discretized processes at one grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub step: usize,
    /// `B x d`
    pub x: Matrix,
    /// `B x k`
    pub y: Matrix,
    /// `B x (k*d)`, each row a row-major `k x d` matrix.
    pub z: Matrix,
}

impl PathBatch {
    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

fn ensure_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            iteration: 0,
            step: None,
            reason: format!("non-finite {what}"),
        })
    }
}

/// `X_{i+1} = X_i + b(t_i, X_i, Y_i, Z_i, u_i) dt + sigma(t_i, X_i, u_i^X) sqrt(dt) delta_i`.
#[allow(clippy::too_many_arguments)]
pub fn euler_forward_step(
    tape: &mut Tape,
    model: &ModelDefinition,
    t: f64,
    x: Var,
    y: Var,
    z: Var,
    law: &LawVars,
    delta: Var,
    dt: f64,
) -> Result<Var> {
    let drift = model.drift(tape, t, x, y, z, law)?;
    let sigma = model.diffusion(tape, t, x, law)?;
    let drift_dt = tape.scale(drift, dt);
    let noise = tape.mul(sigma, delta);
    let noise = tape.scale(noise, dt.sqrt());
    let moved = tape.add(x, drift_dt);
    let next = tape.add(moved, noise);
    ensure_finite(tape, next, "forward state")?;
    Ok(next)
}

/// `Y_{i+1} = Y_i - f(t_i, X_i, Y_i, Z_i, u_i) dt + Z_i sqrt(dt) delta_i`.
#[allow(clippy::too_many_arguments)]
pub fn euler_backward_step(
    tape: &mut Tape,
    model: &ModelDefinition,
    t: f64,
    x: Var,
    y: Var,
    z: Var,
    law: &LawVars,
    delta: Var,
    dt: f64,
) -> Result<Var> {
    let f = model.driver(tape, t, x, y, z, law)?;
    let f_dt = tape.scale(f, dt);
    let zdw = tape.row_contract(z, delta, model.k);
    let zdw = tape.scale(zdw, dt.sqrt());
    let moved = tape.sub(y, f_dt);
    let next = tape.add(moved, zdw);
    ensure_finite(tape, next, "backward state")?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(0.25, 25).unwrap();
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.time(25), 0.25);
        assert!((g.dt() - 0.01).abs() < 1e-15);
        assert!((g.time(10) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn grid_from_step() {
        assert_eq!(TimeGrid::from_step(1.0, 0.01).unwrap().steps(), 100);
        assert_eq!(TimeGrid::from_step(0.75, 0.01).unwrap().steps(), 75);
        assert!(TimeGrid::from_step(1.0, 0.3).is_err());
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn constant_law_replicates() {
        let rng = RngStream::new(1);
        let m = sample_initial(&InitialLaw::constant(2, 1.0), 3, 2, &mut rng.substream(Stream::Initial, 0, 0))
            .unwrap();
        assert_eq!(m, Matrix::filled(3, 2, 1.0));
    }

    #[test]
    fn nonpositive_batch_rejected() {
        let rng = RngStream::new(1);
        let r = sample_initial(&InitialLaw::constant(1, 0.0), 0, 1, &mut rng.substream(Stream::Initial, 0, 0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn gaussian_initial_mean_within_clt_bound() {
        let rng = RngStream::new(99);
        let law = InitialLaw::Gaussian {
            mean: vec![0.0, 0.0],
            variance: vec![1.0, 1.0],
        };
        let b = 100_000;
        let m = sample_initial(&law, b, 2, &mut rng.substream(Stream::Initial, 0, 0)).unwrap();
        for mean in m.mean_rows() {
            assert!(mean.abs() < 4.0 / (b as f64).sqrt());
        }
    }

    #[test]
    fn increments_have_unit_variance() {
        let rng = RngStream::new(5);
        let m = gaussian_increments(100_000, 1, &mut rng.substream(Stream::Increment, 0, 0)).unwrap();
        let var = m.variance_rows()[0];
        assert!((0.98..=1.02).contains(&var), "variance {var}");
    }

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let rng = RngStream::new(5);
        let a = gaussian_increments(1000, 3, &mut rng.substream(Stream::Increment, 4, 7)).unwrap();
        let b = gaussian_increments(1000, 3, &mut rng.substream(Stream::Increment, 4, 7)).unwrap();
        let c = gaussian_increments(1000, 3, &mut rng.substream(Stream::Increment, 4, 8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn distinct_substreams_uncorrelated() {
        let rng = RngStream::new(11);
        let n = 100_000;
        let a = gaussian_increments(n, 1, &mut rng.substream(Stream::Increment, 0, 0)).unwrap();
        let b = gaussian_increments(n, 1, &mut rng.substream(Stream::Increment, 0, 1)).unwrap();
        let (ma, mb) = (a.mean_rows()[0], b.mean_rows()[0]);
        let (va, vb) = (a.variance_rows()[0], b.variance_rows()[0]);
        let cov: f64 = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n as f64;
        let rho = cov / (va * vb).sqrt();
        assert!(rho.abs() < 0.02, "correlation {rho}");
    }
}
