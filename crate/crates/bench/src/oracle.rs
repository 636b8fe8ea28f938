use std::fmt::Write as _;

use mkv_core::models::{lognormal_moments, price_impact_reference, LognormalParams, PriceImpactParams};

use crate::config::ConfigError;

pub const ORACLE_MODELS: [&str; 2] = ["price-impact", "lognormal"];

/// Tab-separated reference values at each requested time, with a header line.
pub fn oracle_table(model: &str, times: &[f64]) -> Result<String, ConfigError> {
    if times.is_empty() {
        return Err(ConfigError("oracle needs at least one time".into()));
    }
    if let Some(bad) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(ConfigError(format!("times must be finite and >= 0, got {bad}")));
    }
    let mut out = String::new();
    match model {
        "price-impact" | "price-impact-pontryagin" | "price-impact-weak" => {
            let p = PriceImpactParams::default();
            out.push_str("T\tE[X_T]\n");
            for &t in times {
                let v = price_impact_reference(&p, t).map_err(|e| ConfigError(e.to_string()))?;
                let _ = writeln!(out, "{t}\t{v:.6}");
            }
        }
        "lognormal" | "lognormal-linear" | "lognormal-quadratic" => {
            let p = LognormalParams::default();
            out.push_str("t\tE[X]\tE[X^2]\tE[Y]\tE[Y^2]\tE[Z]\tE[Z^2]\n");
            for &t in times {
                let m = lognormal_moments(&p, t);
                let _ = writeln!(
                    out,
                    "{t}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                    m.mean_x, m.second_x, m.mean_y, m.second_y, m.mean_z, m.second_z
                );
            }
        }
        other => {
            return Err(ConfigError(format!(
                "no reference oracle for `{other}`; available: {}",
                ORACLE_MODELS.join(", ")
            )))
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(text: &str, row: usize, col: usize) -> f64 {
        text.lines().nth(row + 1).unwrap().split('\t').nth(col).unwrap().parse().unwrap()
    }

    #[test]
    fn price_impact_values() {
        let t = oracle_table("price-impact", &[0.25, 0.0]).unwrap();
        assert!((column(&t, 0, 1) - 0.7709).abs() < 5e-4);
        assert_eq!(column(&t, 1, 1), 1.0);
    }

    #[test]
    fn lognormal_mean_at_one() {
        let t = oracle_table("lognormal", &[1.0]).unwrap();
        assert!((column(&t, 0, 1) - 1.10517).abs() < 1e-5);
    }

    #[test]
    fn model_without_oracle_is_rejected() {
        assert!(oracle_table("population", &[1.0]).is_err());
        assert!(oracle_table("lognormal", &[]).is_err());
    }
}
