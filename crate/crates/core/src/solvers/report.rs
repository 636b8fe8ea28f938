use serde::{Deserialize, Serialize};

use super::config::SolverConfig;
use crate::meanfield::MeanFieldVector;
use crate::models::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    /// The loss fell below the configured tolerance.
    Converged,
    /// The iteration budget ran out.
    MaxIter,
    /// A non-finite value or an out-of-domain state appeared.
    Diverged,
}

/// Summary of a vector of per-coordinate estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over coordinates, 0 when there is one.
    pub sd: f64,
}

impl CoordinateSummary {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        CoordinateSummary { values, mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawPoint {
    pub step: usize,
    pub t: f64,
    pub law: MeanFieldVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub params: ModelParams,
    pub horizon: f64,
    pub steps: usize,
    pub config: SolverConfig,
    pub status: Status,
    /// Divergence message when `status` is `diverged`.
    pub failure: Option<String>,
    /// One training loss per outer iteration.
    pub losses: Vec<f64>,
    pub gradient_steps: usize,
    /// `E[X_T]` per coordinate, from the evaluation pass.
    pub terminal_mean: Option<CoordinateSummary>,
    /// `E[Y_0]` per component.
    pub initial_value: Option<CoordinateSummary>,
    pub law_trajectory: Option<Vec<LawPoint>>,
    pub elapsed_seconds: f64,
}

impl RunReport {
    pub fn diverged(&self) -> bool {
        self.status == Status::Diverged
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_coordinates() {
        let s = CoordinateSummary::new(vec![1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.sd - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(CoordinateSummary::new(vec![0.5]).sd, 0.0);
    }
}
