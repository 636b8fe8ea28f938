//! Benchmark McKean–Vlasov FBSDEs and their reference values.
//!
//! A model is a set of coefficient functions evaluated on whole batches:
//! `x` is `B x d`, `y` is `B x k`, `z` is `B x (k*d)` (each row a row-major
//! `k x d` matrix), and law components are `1 x width` rows that the model
//! broadcasts itself.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::meanfield::{LawLayout, LawVars, Phi};
use crate::sde::InitialLaw;

mod lognormal;
mod population;
mod price_impact;

pub use lognormal::{
    lognormal_linear, lognormal_moments, lognormal_quadratic, phi_source, LognormalMoments, LognormalParams,
};
pub use population::{population_model, PopulationParams};
pub use price_impact::{
    price_impact_mean_path, price_impact_pontryagin, price_impact_reference, price_impact_weak, PriceImpactParams,
};

/// Coefficients `b`, `sigma`, `f`, `g` of one model.
pub trait Coefficients: Debug + Send + Sync {
    /// `b(t, x, y, z, u)`, `B x d`.
    fn drift(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var, law: &LawVars) -> Result<Var>;

    /// Diagonal of `sigma(t, x, u^X)`, `B x d`.
    fn diffusion(&self, tape: &mut Tape, t: f64, x: Var, law: &LawVars) -> Result<Var>;

    /// `f(t, x, y, z, u)`, `B x k`.
    fn driver(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var, law: &LawVars) -> Result<Var>;

    /// `g(x_T, u^X_T)`, `B x k`. `t` is the horizon.
    fn terminal(&self, tape: &mut Tape, t: f64, x: Var, law_x: Option<Var>) -> Result<Var>;
}

/// Parameters echoed into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ModelParams {
    PriceImpactPontryagin(PriceImpactParams),
    PriceImpactWeak(PriceImpactParams),
    Population(PopulationParams),
    LognormalLinear(LognormalParams),
    LognormalQuadratic(LognormalParams),
}

#[derive(Debug, Clone)]
pub struct ModelDefinition {
    pub name: String,
    pub d: usize,
    pub k: usize,
    /// `(phi1, phi2, phi3)`.
    pub phi: [Phi; 3],
    pub initial: InitialLaw,
    pub params: ModelParams,
    coefficients: Arc<dyn Coefficients>,
}

impl ModelDefinition {
    pub fn new(
        name: impl Into<String>,
        d: usize,
        k: usize,
        phi: [Phi; 3],
        initial: InitialLaw,
        params: ModelParams,
        coefficients: Arc<dyn Coefficients>,
    ) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if initial.dim() != d {
            return Err(Error::config("initial law dimension differs from d"));
        }
        initial.validate()?;
        Ok(ModelDefinition {
            name: name.into(),
            d,
            k,
            phi,
            initial,
            params,
            coefficients,
        })
    }

    pub fn layout(&self) -> LawLayout {
        LawLayout {
            x: self.phi[0].width(self.d),
            y: self.phi[1].width(self.k),
            z: self.phi[2].width(self.k * self.d),
        }
    }

    /// Whether any coefficient reads the law.
    pub fn has_law(&self) -> bool {
        self.layout().total() > 0
    }

    pub fn drift(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var, law: &LawVars) -> Result<Var> {
        self.coefficients.drift(tape, t, x, y, z, law)
    }

    pub fn diffusion(&self, tape: &mut Tape, t: f64, x: Var, law: &LawVars) -> Result<Var> {
        self.coefficients.diffusion(tape, t, x, law)
    }

    pub fn driver(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var, law: &LawVars) -> Result<Var> {
        self.coefficients.driver(tape, t, x, y, z, law)
    }

    pub fn terminal(&self, tape: &mut Tape, t: f64, x: Var, law_x: Option<Var>) -> Result<Var> {
        self.coefficients.terminal(tape, t, x, law_x)
    }
}

/// Broadcasts a required law component to `rows` rows.
pub(crate) fn law_rows(tape: &mut Tape, part: Option<Var>, rows: usize, what: &str) -> Result<Var> {
    let part = part.ok_or_else(|| Error::Usage(format!("model needs the {what} law component")))?;
    Ok(tape.broadcast_rows(part, rows))
}

/// `sum_i log x^i` per row, refusing non-positive coordinates.
pub(crate) fn log_sum(tape: &mut Tape, x: Var) -> Result<Var> {
    if let Some(bad) = tape.value(x).as_slice().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!(
            "log-normal state left the positive orthant (coordinate {bad})"
        )));
    }
    let logs = tape.log(x);
    Ok(tape.sum_cols(logs))
}
