use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{law_rows, Coefficients, ModelDefinition, ModelParams};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::meanfield::{LawVars, Phi};
use crate::sde::InitialLaw;

/// One-dimensional mixed model: `dX = -rho Y dt + sigma dW`,
/// `dY = arctan(E[X]) dt + Z dW`, `Y_T = arctan(X_T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationParams {
    pub rho: f64,
    pub x0: f64,
    pub sigma: f64,
}

impl Default for PopulationParams {
    fn default() -> Self {
        PopulationParams {
            rho: 1.0,
            x0: 1.0,
            sigma: 1.0,
        }
    }
}

#[derive(Debug)]
struct Population(PopulationParams);

impl Coefficients for Population {
    fn drift(&self, tape: &mut Tape, _t: f64, _x: Var, y: Var, _z: Var, _law: &LawVars) -> Result<Var> {
        Ok(tape.scale(y, -self.0.rho))
    }

    fn diffusion(&self, tape: &mut Tape, _t: f64, x: Var, _law: &LawVars) -> Result<Var> {
        let (rows, cols) = tape.shape(x);
        Ok(tape.constant(rows, cols, self.0.sigma))
    }

    fn driver(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, _z: Var, law: &LawVars) -> Result<Var> {
        let rows = tape.shape(x).0;
        let mean_x = law_rows(tape, law.x, rows, "X")?;
        let a = tape.atan(mean_x);
        Ok(tape.neg(a))
    }

    fn terminal(&self, tape: &mut Tape, _t: f64, x: Var, _law_x: Option<Var>) -> Result<Var> {
        Ok(tape.atan(x))
    }
}

pub fn population_model(p: PopulationParams) -> Result<ModelDefinition> {
    ModelDefinition::new(
        "population",
        1,
        1,
        [Phi::Identity, Phi::None, Phi::None],
        InitialLaw::constant(1, p.x0),
        ModelParams::Population(p),
        Arc::new(Population(p)),
    )
}
