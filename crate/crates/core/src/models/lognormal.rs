//! Fully coupled McKean–Vlasov FBSDEs built around a known log-normal solution.
//!
//! The forward process is a geometric Brownian motion per coordinate and
//! `Y_t = e^{alpha t} log prod_i X^i_t`, `Z^i_t = sigma e^{alpha t}`. Coupling
//! terms in `Y`, `Z` and their moments are added to the drift and driver
//! together with the same terms evaluated at the known solution, so the
//! known solution still solves the coupled system.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{log_sum, Coefficients, ModelDefinition, ModelParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::meanfield::{LawVars, MeanFieldVector, Phi};
use crate::sde::InitialLaw;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LognormalParams {
    /// Drift rate of every coordinate.
    pub a: f64,
    pub sigma: f64,
    /// Growth rate of `Y`.
    pub alpha: f64,
    /// Initial value of every coordinate.
    pub xi: f64,
    /// Weight of the linear coupling.
    pub b_coef: f64,
    /// Weight of the quadratic coupling.
    pub c_coef: f64,
    pub d: usize,
}

impl Default for LognormalParams {
    fn default() -> Self {
        LognormalParams {
            a: 0.1,
            sigma: 0.4,
            alpha: 0.5,
            xi: 1.0,
            b_coef: 0.1,
            c_coef: 0.1,
            d: 10,
        }
    }
}

impl LognormalParams {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::config("log-normal: sigma must be positive"));
        }
        if !(self.xi > 0.0) {
            return Err(Error::config("log-normal: xi must be positive"));
        }
        if self.d == 0 {
            return Err(Error::config("log-normal: d must be positive"));
        }
        Ok(())
    }

    /// The exact law vector at `t` in the layout of the linear
    /// (`quadratic = false`) or quadratic model.
    pub fn exact_law(&self, t: f64, quadratic: bool) -> MeanFieldVector {
        let m = lognormal_moments(self, t);
        let d = self.d;
        if quadratic {
            MeanFieldVector {
                x: [vec![m.mean_x; d], vec![m.second_x; d]].concat(),
                y: vec![m.mean_y, m.second_y],
                z: [vec![m.mean_z; d], vec![m.second_z; d]].concat(),
            }
        } else {
            MeanFieldVector {
                x: vec![m.mean_x; d],
                y: vec![m.mean_y],
                z: vec![m.mean_z; d],
            }
        }
    }
}

/// Moments of the known solution at one time (identical across coordinates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LognormalMoments {
    /// `E[X^i]`
    pub mean_x: f64,
    /// `E[(X^i)^2]`
    pub second_x: f64,
    /// `E[Y]`
    pub mean_y: f64,
    /// `E[Y^2]`
    pub second_y: f64,
    /// `E[Z^i]`
    pub mean_z: f64,
    /// `E[(Z^i)^2]`
    pub second_z: f64,
}

pub fn lognormal_moments(p: &LognormalParams, t: f64) -> LognormalMoments {
    let d = p.d as f64;
    let ea = (p.alpha * t).exp();
    let log_drift = p.xi.ln() + (p.a - p.sigma * p.sigma / 2.0) * t;
    let mean_y = ea * d * log_drift;
    LognormalMoments {
        mean_x: p.xi * (p.a * t).exp(),
        second_x: p.xi * p.xi * ((2.0 * p.a + p.sigma * p.sigma) * t).exp(),
        mean_y,
        second_y: ea * ea * ((d * log_drift).powi(2) + d * p.sigma * p.sigma * t),
        mean_z: p.sigma * ea,
        second_z: p.sigma * p.sigma * ea * ea,
    }
}

/// `e^{alpha t} (alpha log prod_i x^i + sum_i (a - sigma^2/2))`.
pub fn phi_source(p: &LognormalParams, t: f64, x: &[f64]) -> Result<f64> {
    if x.len() != p.d {
        return Err(Error::config(format!("phi_source expects {} coordinates", p.d)));
    }
    if let Some(bad) = x.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!("phi_source needs positive coordinates, got {bad}")));
    }
    let log_sum: f64 = x.iter().map(|v| v.ln()).sum();
    Ok((p.alpha * t).exp() * (p.alpha * log_sum + p.d as f64 * (p.a - p.sigma * p.sigma / 2.0)))
}

#[derive(Debug)]
struct Lognormal {
    p: LognormalParams,
    quadratic: bool,
}

/// First (`which = 0`) or squared (`which = 1`) half of a law component.
fn law_part(tape: &mut Tape, part: Option<Var>, width: usize, which: usize, what: &str) -> Result<Var> {
    let v = part.ok_or_else(|| Error::Usage(format!("log-normal model needs the {what} law component")))?;
    let total = tape.shape(v).1;
    if total == width {
        debug_assert_eq!(which, 0);
        Ok(v)
    } else {
        Ok(tape.slice_cols(v, which * width, (which + 1) * width))
    }
}

/// Averages a `1 x n` row into a `B x 1` column.
fn row_average(tape: &mut Tape, v: Var, rows: usize) -> Var {
    let n = tape.shape(v).1;
    let s = tape.sum_cols(v);
    let s = tape.scale(s, 1.0 / n as f64);
    tape.broadcast_rows(s, rows)
}

struct Exact {
    /// `e^{alpha t} sum_i log x^i`, `B x 1`.
    y: Var,
    /// `sum_i log x^i`, `B x 1`.
    log_sum: Var,
    moments: LognormalMoments,
    z: f64,
}

impl Lognormal {
    fn exact(&self, tape: &mut Tape, t: f64, x: Var) -> Result<Exact> {
        let ls = log_sum(tape, x)?;
        let y = tape.scale(ls, (self.p.alpha * t).exp());
        Ok(Exact {
            y,
            log_sum: ls,
            moments: lognormal_moments(&self.p, t),
            z: self.p.sigma * (self.p.alpha * t).exp(),
        })
    }

    /// Coupling minus compensator, per coordinate (`B x d`) when
    /// `averaged = false`, or averaged over coordinates (`B x 1`).
    fn coupling(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var, law: &LawVars, averaged: bool) -> Result<(Var, Exact)> {
        let (rows, d) = tape.shape(x);
        let ex = self.exact(tape, t, x)?;
        let m = ex.moments;
        let ux = law_part(tape, law.x, d, 0, "X")?;
        let uy = law_part(tape, law.y, 1, 0, "Y")?;
        let uz = law_part(tape, law.z, d, 0, "Z")?;

        let spread = |tape: &mut Tape, col: Var| if averaged { col } else { tape.broadcast_cols(col, d) };
        let row_term = |tape: &mut Tape, row: Var| {
            if averaged {
                row_average(tape, row, rows)
            } else {
                tape.broadcast_rows(row, rows)
            }
        };
        let z_term = |tape: &mut Tape, zv: Var| {
            if averaged {
                let s = tape.sum_cols(zv);
                tape.scale(s, 1.0 / d as f64)
            } else {
                zv
            }
        };

        let y_s = spread(tape, y);
        let z_s = z_term(tape, z);
        let ux_s = row_term(tape, ux);
        let uy_col = tape.broadcast_rows(uy, rows);
        let uy_s = spread(tape, uy_col);
        let uz_s = row_term(tape, uz);
        let mut lin = tape.add(y_s, z_s);
        for part in [ux_s, uy_s, uz_s] {
            lin = tape.add(lin, part);
        }
        let y_ex = spread(tape, ex.y);
        let comp = tape.offset(y_ex, ex.z + m.mean_x + m.mean_y + m.mean_z);
        let lin = tape.sub(lin, comp);
        let mut total = tape.scale(lin, self.p.b_coef);

        if self.quadratic {
            let ux2 = law_part(tape, law.x, d, 1, "X")?;
            let uy2 = law_part(tape, law.y, 1, 1, "Y")?;
            let uz2 = law_part(tape, law.z, d, 1, "Z")?;
            let y2 = tape.square(y);
            let y2_s = spread(tape, y2);
            let z2 = tape.square(z);
            let z2_s = z_term(tape, z2);
            let ux2_s = row_term(tape, ux2);
            let uy2_col = tape.broadcast_rows(uy2, rows);
            let uy2_s = spread(tape, uy2_col);
            let uz2_s = row_term(tape, uz2);
            let mut quad = tape.add(y2_s, z2_s);
            for part in [ux2_s, uy2_s, uz2_s] {
                quad = tape.add(quad, part);
            }
            let yex2 = tape.square(ex.y);
            let yex2_s = spread(tape, yex2);
            let comp2 = tape.offset(yex2_s, ex.z * ex.z + m.second_x + m.second_y + m.second_z);
            let quad = tape.sub(quad, comp2);
            let quad = tape.scale(quad, self.p.c_coef);
            total = tape.add(total, quad);
        }
        Ok((total, ex))
    }
}

impl Coefficients for Lognormal {
    fn drift(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var, law: &LawVars) -> Result<Var> {
        let (coupling, _) = self.coupling(tape, t, x, y, z, law, false)?;
        let own = tape.scale(x, self.p.a);
        Ok(tape.add(own, coupling))
    }

    fn diffusion(&self, tape: &mut Tape, _t: f64, x: Var, _law: &LawVars) -> Result<Var> {
        Ok(tape.scale(x, self.p.sigma))
    }

    fn driver(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var, law: &LawVars) -> Result<Var> {
        let (coupling, ex) = self.coupling(tape, t, x, y, z, law, true)?;
        let p = &self.p;
        let source = tape.scale(ex.log_sum, p.alpha);
        let source = tape.offset(source, p.d as f64 * (p.a - p.sigma * p.sigma / 2.0));
        let source = tape.scale(source, (p.alpha * t).exp());
        let dy = tape.add(source, coupling);
        Ok(tape.neg(dy))
    }

    fn terminal(&self, tape: &mut Tape, t: f64, x: Var, _law_x: Option<Var>) -> Result<Var> {
        let ls = log_sum(tape, x)?;
        Ok(tape.scale(ls, (self.p.alpha * t).exp()))
    }
}

fn build(p: LognormalParams, quadratic: bool) -> Result<ModelDefinition> {
    p.validate()?;
    let (name, phi, params) = if quadratic {
        ("lognormal-quadratic", Phi::WithSquares, ModelParams::LognormalQuadratic(p))
    } else {
        ("lognormal-linear", Phi::Identity, ModelParams::LognormalLinear(p))
    };
    ModelDefinition::new(
        name,
        p.d,
        1,
        [phi; 3],
        InitialLaw::constant(p.d, p.xi),
        params,
        Arc::new(Lognormal { p, quadratic }),
    )
}

pub fn lognormal_linear(p: LognormalParams) -> Result<ModelDefinition> {
    build(p, false)
}

pub fn lognormal_quadratic(p: LognormalParams) -> Result<ModelDefinition> {
    build(p, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_at_time_zero() {
        let p = LognormalParams::default();
        let m = lognormal_moments(&p, 0.0);
        assert_eq!(m.mean_x, 1.0);
        assert_eq!(m.second_x, 1.0);
        assert_eq!(m.mean_y, 0.0);
        assert_eq!(m.second_y, 0.0);
        assert_eq!(m.mean_z, p.sigma);
        assert!((m.second_z - p.sigma * p.sigma).abs() < 1e-16);
    }

    #[test]
    fn moments_at_time_one() {
        let p = LognormalParams::default();
        let m = lognormal_moments(&p, 1.0);
        assert!((m.mean_x - 1.105_170_918_075_647_7).abs() < 1e-14);
        assert!((m.second_x - 1.433_329_414_560_340_1).abs() < 1e-14);
    }

    #[test]
    fn phi_source_plug_in() {
        let p = LognormalParams::default();
        let ones = vec![1.0; 10];
        assert!((phi_source(&p, 0.0, &ones).unwrap() - 0.2).abs() < 1e-14);
        let t: f64 = 0.7;
        let want = (0.5 * t).exp() * 0.2;
        assert!((phi_source(&p, t, &ones).unwrap() - want).abs() < 1e-14);
        let flat = LognormalParams { alpha: 0.0, ..p };
        assert!((phi_source(&flat, 3.0, &ones).unwrap() - 0.2).abs() < 1e-14);
        let mut neg = ones.clone();
        neg[3] = -0.1;
        assert!(matches!(phi_source(&p, 0.0, &neg), Err(Error::Domain(_))));
    }

    #[test]
    fn nonpositive_state_is_domain_error() {
        let m = lognormal_linear(LognormalParams::default()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(1, 10, -1.0);
        assert!(matches!(m.terminal(&mut tape, 1.0, x, None), Err(Error::Domain(_))));
    }
}
