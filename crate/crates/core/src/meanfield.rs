//! Estimators of the mean-field term `u_t = (E[phi1(X_t)], E[phi2(Y_t)], E[phi3(Z_t)])`.
//!
//! Three estimators are provided:
//! - the current batch's empirical mean ([`batch_moments`]), taped so the
//!   law can be differentiated through;
//! - a convex update against a ring buffer of the last `M` batch means
//!   ([`dynamic_update`]), which yields a frozen statistic;
//! - a network of time alone ([`law_network_eval`]), tied to the batch means
//!   by [`penalty_loss`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundNetwork, Matrix, NetworkParams, Tape, Var};
use crate::error::{Error, Result};
use crate::models::ModelDefinition;
use crate::sde::TimeGrid;

/// Test function applied componentwise before taking expectations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phi {
    /// The component does not enter the coefficients.
    None,
    Identity,
    /// `v -> (v, v^2)`, concatenated.
    WithSquares,
}

impl Phi {
    pub fn width(self, n: usize) -> usize {
        match self {
            Phi::None => 0,
            Phi::Identity => n,
            Phi::WithSquares => 2 * n,
        }
    }

    pub fn apply(self, tape: &mut Tape, v: Var) -> Option<Var> {
        match self {
            Phi::None => None,
            Phi::Identity => Some(v),
            Phi::WithSquares => {
                let sq = tape.square(v);
                Some(tape.concat_cols(&[v, sq]))
            }
        }
    }

    pub fn apply_row(self, v: &[f64]) -> Vec<f64> {
        match self {
            Phi::None => Vec::new(),
            Phi::Identity => v.to_vec(),
            Phi::WithSquares => v.iter().copied().chain(v.iter().map(|x| x * x)).collect(),
        }
    }

    /// Column means of `phi` applied to every row, accumulated in row order.
    pub fn mean(self, m: &Matrix) -> Vec<f64> {
        let n = m.cols();
        let mut acc = vec![0.0; self.width(n)];
        if acc.is_empty() {
            return acc;
        }
        for r in 0..m.rows() {
            let row = m.row(r);
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
            if self == Phi::WithSquares {
                for (a, v) in acc[n..].iter_mut().zip(row) {
                    *a += v * v;
                }
            }
        }
        let b = m.rows() as f64;
        acc.iter_mut().for_each(|a| *a /= b);
        acc
    }
}

/// Codomain widths of `(phi1, phi2, phi3)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LawLayout {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl LawLayout {
    pub fn total(&self) -> usize {
        self.x + self.y + self.z
    }
}

/// One estimate of `u_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldVector {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl MeanFieldVector {
    pub fn zeros(layout: LawLayout) -> Self {
        MeanFieldVector {
            x: vec![0.0; layout.x],
            y: vec![0.0; layout.y],
            z: vec![0.0; layout.z],
        }
    }

    pub fn layout(&self) -> LawLayout {
        LawLayout {
            x: self.x.len(),
            y: self.y.len(),
            z: self.z.len(),
        }
    }

    /// Components concatenated in the order (X, Y, Z).
    pub fn to_vec(&self) -> Vec<f64> {
        self.x.iter().chain(&self.y).chain(&self.z).copied().collect()
    }

    pub fn from_slice(values: &[f64], layout: LawLayout) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::config(format!(
                "law vector has {} entries, layout needs {}",
                values.len(),
                layout.total()
            )));
        }
        let (x, rest) = values.split_at(layout.x);
        let (y, z) = rest.split_at(layout.y);
        Ok(MeanFieldVector {
            x: x.to_vec(),
            y: y.to_vec(),
            z: z.to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    /// Records the vector as constant tape leaves.
    pub fn to_tape(&self, tape: &mut Tape) -> LawVars {
        let mut leaf = |v: &Vec<f64>| (!v.is_empty()).then(|| tape.leaf(Matrix::row_vector(v.clone())));
        LawVars {
            x: leaf(&self.x),
            y: leaf(&self.y),
            z: leaf(&self.z),
        }
    }
}

/// Tape handles (`1 x width`) of the law components that a model uses.
#[derive(Debug, Clone, Copy, Default)]
pub struct LawVars {
    pub x: Option<Var>,
    pub y: Option<Var>,
    pub z: Option<Var>,
}

impl LawVars {
    /// Splits a `1 x total` row into its components.
    pub fn split(tape: &mut Tape, row: Var, layout: LawLayout) -> Self {
        let mut start = 0;
        let mut take = |w: usize| {
            let part = (w > 0).then(|| tape.slice_cols(row, start, start + w));
            start += w;
            part
        };
        LawVars {
            x: take(layout.x),
            y: take(layout.y),
            z: take(layout.z),
        }
    }

    /// Concatenation `1 x total` of the present components.
    pub fn concat(&self, tape: &mut Tape) -> Option<Var> {
        let parts: Vec<Var> = [self.x, self.y, self.z].into_iter().flatten().collect();
        (!parts.is_empty()).then(|| tape.concat_cols(&parts))
    }

    pub fn values(&self, tape: &Tape) -> MeanFieldVector {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).as_slice().to_vec()).unwrap_or_default();
        MeanFieldVector {
            x: get(self.x),
            y: get(self.y),
            z: get(self.z),
        }
    }
}

/// Taped empirical means of `phi` over the batch.
pub fn batch_moments(tape: &mut Tape, model: &ModelDefinition, x: Var, y: Var, z: Var) -> LawVars {
    let [p1, p2, p3] = model.phi;
    let mut moment = |phi: Phi, v: Var| {
        phi.apply(tape, v).map(|mapped| tape.mean_rows(mapped))
    };
    LawVars {
        x: moment(p1, x),
        y: moment(p2, y),
        z: moment(p3, z),
    }
}

/// Untaped empirical means of `phi` over the batch.
pub fn batch_moment_values(model: &ModelDefinition, x: &Matrix, y: &Matrix, z: &Matrix) -> MeanFieldVector {
    let [p1, p2, p3] = model.phi;
    MeanFieldVector {
        x: p1.mean(x),
        y: p2.mean(y),
        z: p3.mean(z),
    }
}

/// Memory `zeta[i][r]` of the last `M` batch means at each time index.
#[derive(Debug, Clone, PartialEq)]
pub struct RingBuffer {
    depth: usize,
    slots: Vec<Vec<MeanFieldVector>>,
}

impl RingBuffer {
    /// `nodes` time indices, `depth` (`M`) slots each, all set to `init`.
    pub fn new(nodes: usize, depth: usize, init: &MeanFieldVector) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("ring buffer depth M must be positive"));
        }
        Ok(RingBuffer {
            depth,
            slots: vec![vec![init.clone(); depth]; nodes],
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn nodes(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, i: usize, r: usize) -> &MeanFieldVector {
        &self.slots[i][r]
    }

    /// `nu_i = (1/M) sum_r zeta[i][r]`.
    pub fn mean(&self, i: usize) -> MeanFieldVector {
        let pivot = &self.slots[i][0];
        let mean = Self::pivoted_mean(pivot.to_vec(), &self.slots[i], self.depth as f64);
        MeanFieldVector::from_slice(&mean, pivot.layout()).expect("slots share a layout")
    }

    /// `pivot + sum_r (zeta_r - pivot) / count`, so equal entries average exactly.
    fn pivoted_mean(pivot: Vec<f64>, slots: &[MeanFieldVector], count: f64) -> Vec<f64> {
        let mut acc = vec![0.0; pivot.len()];
        for s in slots {
            for ((a, v), p) in acc.iter_mut().zip(s.to_vec()).zip(&pivot) {
                *a += v - p;
            }
        }
        pivot.iter().zip(acc).map(|(p, a)| p + a / count).collect()
    }

    /// `(sum_r zeta[i][r] + current) / (M + 1)` without touching the buffer.
    pub fn blend(&self, i: usize, current: &MeanFieldVector) -> MeanFieldVector {
        let blended = Self::pivoted_mean(current.to_vec(), &self.slots[i], self.depth as f64 + 1.0);
        MeanFieldVector::from_slice(&blended, current.layout()).expect("slots share a layout")
    }

    pub fn write(&mut self, i: usize, iteration: usize, value: MeanFieldVector) {
        let r = iteration % self.depth;
        self.slots[i][r] = value;
    }
}

/// `u~_i = (sum_r zeta[i][r] + u_i) / (M + 1)`, then `zeta[i][m % M] <- u_i`.
///
/// The returned estimate is a plain value: it enters the dynamics as a
/// constant, so no gradient flows through it.
pub fn dynamic_update(buffer: &mut RingBuffer, i: usize, current: &MeanFieldVector, iteration: usize) -> MeanFieldVector {
    let blended = buffer.blend(i, current);
    buffer.write(i, iteration, current.clone());
    blended
}

fn check_psi(psi_in: usize, psi_out: usize, layout: LawLayout) -> Result<()> {
    if psi_in != 1 || psi_out != layout.total() {
        return Err(Error::config(format!(
            "law network must map 1 input to {} outputs, has {psi_in} -> {psi_out}",
            layout.total()
        )));
    }
    Ok(())
}

/// `Psi(t)`, split into `(X, Y, Z)` components.
pub fn law_network_eval(psi: &NetworkParams, t: f64, layout: LawLayout) -> Result<MeanFieldVector> {
    check_psi(psi.input_width(), psi.output_width(), layout)?;
    let out = psi.forward(&[t])?;
    MeanFieldVector::from_slice(&out, layout)
}

/// Taped `Psi(t)` as a `1 x total` row.
pub fn law_network_row(tape: &mut Tape, psi: &BoundNetwork, t: f64, layout: LawLayout) -> Result<Var> {
    check_psi(psi.input_width(), psi.output_width(), layout)?;
    let input = tape.constant(1, 1, t);
    Ok(psi.forward(tape, input))
}

/// `(lambda / N) sum_{i<N} ||Psi(t_i) - moment_i||^2` over the grid.
///
/// `moments[i]` is the taped `1 x total` batch mean at `t_i`.
pub fn penalty_loss(
    tape: &mut Tape,
    psi: &BoundNetwork,
    grid: &TimeGrid,
    moments: &[Var],
    layout: LawLayout,
    lambda: f64,
) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("penalty weight must be >= 0, got {lambda}")));
    }
    let n = grid.steps();
    if moments.len() < n {
        return Err(Error::config(format!(
            "penalty needs {n} batch moments, got {}",
            moments.len()
        )));
    }
    let mut terms = Vec::with_capacity(n);
    for (i, &moment) in moments.iter().take(n).enumerate() {
        let psi_t = law_network_row(tape, psi, grid.time(i), layout)?;
        let gap = tape.sub(psi_t, moment);
        terms.push(tape.squared_norm(gap));
    }
    let stacked = tape.concat_cols(&terms);
    let total = tape.sum(stacked);
    Ok(tape.scale(total, lambda / n as f64))
}

/// Buffer initialization `(E[phi1(xi)], phi2(0), phi3(0))`.
pub fn initial_law_estimate(model: &ModelDefinition, law_x_mean: Vec<f64>) -> MeanFieldVector {
    let [_, p2, p3] = model.phi;
    MeanFieldVector {
        x: law_x_mean,
        y: p2.apply_row(&vec![0.0; model.k]),
        z: p3.apply_row(&vec![0.0; model.k * model.d]),
    }
}
