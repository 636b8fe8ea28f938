//! Linear price impact mean-field game of controls, in its two FBSDE forms.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{law_rows, Coefficients, ModelDefinition, ModelParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::meanfield::{LawVars, Phi};
use crate::sde::InitialLaw;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceImpactParams {
    pub c_alpha: f64,
    pub c_x: f64,
    pub c_g: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub x0: f64,
    pub d: usize,
}

impl Default for PriceImpactParams {
    fn default() -> Self {
        PriceImpactParams {
            c_alpha: 2.0 / 3.0,
            c_x: 2.0,
            c_g: 0.3,
            gamma: 2.0,
            sigma: 0.7,
            x0: 1.0,
            d: 10,
        }
    }
}

impl PriceImpactParams {
    fn validate(&self) -> Result<()> {
        if !(self.c_alpha > 0.0) {
            return Err(Error::config("price impact: c_alpha must be positive"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("price impact: sigma must be positive"));
        }
        if self.d == 0 {
            return Err(Error::config("price impact: d must be positive"));
        }
        Ok(())
    }
}

/// Pontryagin system: `Y` is the adjoint, `k = d`.
#[derive(Debug)]
struct Pontryagin(PriceImpactParams);

impl Coefficients for Pontryagin {
    fn drift(&self, tape: &mut Tape, _t: f64, _x: Var, y: Var, _z: Var, _law: &LawVars) -> Result<Var> {
        Ok(tape.scale(y, -1.0 / self.0.c_alpha))
    }

    fn diffusion(&self, tape: &mut Tape, _t: f64, x: Var, _law: &LawVars) -> Result<Var> {
        let (rows, cols) = tape.shape(x);
        Ok(tape.constant(rows, cols, self.0.sigma))
    }

    fn driver(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, _z: Var, law: &LawVars) -> Result<Var> {
        let p = &self.0;
        let rows = tape.shape(x).0;
        let mean_y = law_rows(tape, law.y, rows, "Y")?;
        let own = tape.scale(x, p.c_x);
        let crowd = tape.scale(mean_y, p.gamma / p.c_alpha);
        Ok(tape.add(own, crowd))
    }

    fn terminal(&self, tape: &mut Tape, _t: f64, x: Var, _law_x: Option<Var>) -> Result<Var> {
        Ok(tape.scale(x, self.0.c_g))
    }
}

/// Weak system: `Y` is the value function, `k = 1`, `Z` a `1 x d` row.
#[derive(Debug)]
struct Weak(PriceImpactParams);

impl Coefficients for Weak {
    fn drift(&self, tape: &mut Tape, _t: f64, _x: Var, _y: Var, z: Var, _law: &LawVars) -> Result<Var> {
        let p = &self.0;
        Ok(tape.scale(z, -1.0 / (p.c_alpha * p.sigma)))
    }

    fn diffusion(&self, tape: &mut Tape, _t: f64, x: Var, _law: &LawVars) -> Result<Var> {
        let (rows, cols) = tape.shape(x);
        Ok(tape.constant(rows, cols, self.0.sigma))
    }

    fn driver(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, z: Var, law: &LawVars) -> Result<Var> {
        let p = &self.0;
        let rows = tape.shape(x).0;
        let mean_z = law_rows(tape, law.z, rows, "Z")?;

        let x2 = tape.square(x);
        let x2 = tape.sum_cols(x2);
        let running = tape.scale(x2, p.c_x / 2.0);

        let xz = tape.mul(x, mean_z);
        let xz = tape.sum_cols(xz);
        let crowd = tape.scale(xz, p.gamma / (p.c_alpha * p.sigma));

        let z2 = tape.square(z);
        let z2 = tape.sum_cols(z2);
        let control = tape.scale(z2, 1.0 / (2.0 * p.c_alpha * p.sigma * p.sigma));

        let partial = tape.add(running, crowd);
        Ok(tape.add(partial, control))
    }

    fn terminal(&self, tape: &mut Tape, _t: f64, x: Var, _law_x: Option<Var>) -> Result<Var> {
        let x2 = tape.square(x);
        let x2 = tape.sum_cols(x2);
        Ok(tape.scale(x2, self.0.c_g / 2.0))
    }
}

pub fn price_impact_pontryagin(p: PriceImpactParams) -> Result<ModelDefinition> {
    p.validate()?;
    ModelDefinition::new(
        "price-impact-pontryagin",
        p.d,
        p.d,
        [Phi::Identity, Phi::Identity, Phi::None],
        InitialLaw::constant(p.d, p.x0),
        ModelParams::PriceImpactPontryagin(p),
        Arc::new(Pontryagin(p)),
    )
}

pub fn price_impact_weak(p: PriceImpactParams) -> Result<ModelDefinition> {
    p.validate()?;
    ModelDefinition::new(
        "price-impact-weak",
        p.d,
        1,
        [Phi::Identity, Phi::None, Phi::Identity],
        InitialLaw::constant(p.d, p.x0),
        ModelParams::PriceImpactWeak(p),
        Arc::new(Weak(p)),
    )
}

type Mat2 = [[f64; 2]; 2];

fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// `exp(a)` by scaling and squaring with a truncated Taylor series.
fn expm2(a: &Mat2) -> Mat2 {
    let norm = a.iter().flatten().map(|v| v.abs()).sum::<f64>();
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled = [[a[0][0] * scale, a[0][1] * scale], [a[1][0] * scale, a[1][1] * scale]];
    let mut result = [[1.0, 0.0], [0.0, 1.0]];
    let mut term = result;
    for n in 1..=20 {
        term = mat_mul(&term, &scaled);
        for i in 0..2 {
            for j in 0..2 {
                term[i][j] /= n as f64;
                result[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..squarings {
        result = mat_mul(&result, &result);
    }
    result
}

fn mean_system(p: &PriceImpactParams) -> Mat2 {
    [[0.0, -1.0 / p.c_alpha], [-p.c_x, -p.gamma / p.c_alpha]]
}

/// Solves the mean equations `x' = -y / c_alpha`, `y' = -(c_X x + gamma y / c_alpha)`,
/// `x(0) = x0`, `y(T) = c_g x(T)` by shooting on `y(0)`. Returns `(x(t), y(t))`.
pub fn price_impact_mean_path(p: &PriceImpactParams, horizon: f64, t: f64) -> Result<(f64, f64)> {
    p.validate()?;
    if !(horizon >= 0.0) || !(0.0..=horizon).contains(&t) {
        return Err(Error::config(format!("need 0 <= t <= T, got t = {t}, T = {horizon}")));
    }
    let a = mean_system(p);
    let at = |s: f64| [[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]];
    let phi = expm2(&at(horizon));
    let denom = phi[1][1] - p.c_g * phi[0][1];
    if denom.abs() < 1e-12 {
        return Err(Error::Numeric(format!(
            "shooting system is singular at T = {horizon}"
        )));
    }
    let y0 = (p.c_g * phi[0][0] - phi[1][0]) * p.x0 / denom;
    let phi_t = expm2(&at(t));
    Ok((
        phi_t[0][0] * p.x0 + phi_t[0][1] * y0,
        phi_t[1][0] * p.x0 + phi_t[1][1] * y0,
    ))
}

/// `E[X_T]` per coordinate of the price impact equilibrium.
pub fn price_impact_reference(p: &PriceImpactParams, horizon: f64) -> Result<f64> {
    Ok(price_impact_mean_path(p, horizon, horizon)?.0)
}
