//! Experiment configuration files.
//!
//! A config is a TOML document with four sections:
//!
//! ```toml
//! repeats = 1              # optional, independent runs with seeds seed, seed+1, ...
//!
//! [model]
//! name = "price-impact-pontryagin"
//! [model.params]           # optional overrides of the model's defaults
//! d = 10
//!
//! [grid]
//! horizon = 0.25
//! steps = 25               # or: dt = 0.01 (exactly one of the two)
//!
//! [solver]
//! scheme = "dynamic"       # direct | dynamic | expectation | local
//! iterations = 2000        # unset keys take the scheme's defaults
//!
//! [output]
//! dir = "out/run1"         # optional, see `default_out_dir`
//! ```

use std::path::PathBuf;

use mkv_core::models::{
    lognormal_linear, lognormal_quadratic, population_model, price_impact_pontryagin, price_impact_weak,
    LognormalParams, ModelDefinition, PopulationParams, PriceImpactParams,
};
use mkv_core::sde::TimeGrid;
use mkv_core::solvers::SolverConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const MODEL_NAMES: [&str; 5] = [
    "price-impact-pontryagin",
    "price-impact-weak",
    "population",
    "lognormal-linear",
    "lognormal-quadratic",
];

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "MKV_OUT_DIR";

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("mkv-out"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub steps: Option<usize>,
    pub dt: Option<f64>,
}

impl GridSection {
    pub fn build(&self) -> mkv_core::Result<TimeGrid> {
        match (self.steps, self.dt) {
            (Some(n), None) => TimeGrid::new(self.horizon, n),
            (None, Some(dt)) => TimeGrid::from_step(self.horizon, dt),
            _ => Err(mkv_core::Error::config("grid needs exactly one of `steps` or `dt`")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// Resolved model choice with every parameter filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "kebab-case")]
pub enum ModelChoice {
    PriceImpactPontryagin(PriceImpactParams),
    PriceImpactWeak(PriceImpactParams),
    Population(PopulationParams),
    LognormalLinear(LognormalParams),
    LognormalQuadratic(LognormalParams),
}

impl ModelChoice {
    pub fn build(&self) -> mkv_core::Result<ModelDefinition> {
        match *self {
            ModelChoice::PriceImpactPontryagin(p) => price_impact_pontryagin(p),
            ModelChoice::PriceImpactWeak(p) => price_impact_weak(p),
            ModelChoice::Population(p) => population_model(p),
            ModelChoice::LognormalLinear(p) => lognormal_linear(p),
            ModelChoice::LognormalQuadratic(p) => lognormal_quadratic(p),
        }
    }
}

/// A fully resolved experiment; serializes back to an equivalent config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub repeats: usize,
    pub model: ModelChoice,
    pub grid: GridSection,
    pub solver: SolverConfig,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    #[serde(default = "one")]
    repeats: usize,
    model: RawModel,
    grid: GridSection,
    #[serde(default)]
    solver: SolverConfig,
    #[serde(default)]
    output: OutputSection,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: String,
    #[serde(default)]
    #[allow(dead_code)]
    params: toml::Table,
}

#[derive(Deserialize)]
#[serde(bound = "P: DeserializeOwned + Default")]
struct TypedDoc<P> {
    model: TypedModel<P>,
}

#[derive(Deserialize)]
#[serde(bound = "P: DeserializeOwned + Default")]
struct TypedModel<P> {
    #[serde(default)]
    params: P,
}

fn parse_params<P: DeserializeOwned + Default>(text: &str) -> Result<P, ConfigError> {
    toml::from_str::<TypedDoc<P>>(text)
        .map(|d| d.model.params)
        .map_err(|e| ConfigError(e.to_string()))
}

/// 1-based line of `key` inside `[section]`, for diagnostics without spans.
fn line_of(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (n, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        let lhs = trimmed.split('=').next().unwrap_or("").trim();
        if current == section && lhs == key {
            return Some(n + 1);
        }
    }
    None
}

fn at_line(text: &str, section: &str, key: &str, msg: impl std::fmt::Display) -> ConfigError {
    match line_of(text, section, key) {
        Some(line) => ConfigError(format!("line {line}: {msg}")),
        None => ConfigError(format!("[{section}] {msg}")),
    }
}

/// Solver settings: the scheme's defaults overlaid with the keys actually given.
fn resolve_solver(text: &str, parsed: &SolverConfig) -> Result<SolverConfig, ConfigError> {
    let doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
    let given = match doc.get("solver") {
        Some(toml::Value::Table(t)) => t.clone(),
        _ => toml::Table::new(),
    };
    let base = SolverConfig::for_scheme(parsed.scheme);
    let mut merged = toml::Table::try_from(&base).map_err(|e| ConfigError(e.to_string()))?;
    for (k, v) in given {
        merged.insert(k, v);
    }
    let cfg: SolverConfig = merged.try_into().map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let raw: RawDoc = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
    let model = match raw.model.name.as_str() {
        "price-impact-pontryagin" => ModelChoice::PriceImpactPontryagin(parse_params(text)?),
        "price-impact-weak" => ModelChoice::PriceImpactWeak(parse_params(text)?),
        "population" => ModelChoice::Population(parse_params(text)?),
        "lognormal-linear" => ModelChoice::LognormalLinear(parse_params(text)?),
        "lognormal-quadratic" => ModelChoice::LognormalQuadratic(parse_params(text)?),
        other => {
            return Err(at_line(
                text,
                "model",
                "name",
                format!("unknown model `{other}`; expected one of {}", MODEL_NAMES.join(", ")),
            ))
        }
    };
    model
        .build()
        .map_err(|e| at_line(text, "model", "name", e))?;
    raw.grid.build().map_err(|e| at_line(text, "grid", "horizon", e))?;
    if raw.repeats == 0 {
        return Err(at_line(text, "", "repeats", "repeats must be positive"));
    }
    let solver = resolve_solver(text, &raw.solver).map_err(|e| ConfigError(format!("[solver] {e}")))?;
    Ok(ExperimentConfig {
        repeats: raw.repeats,
        model,
        grid: raw.grid,
        solver,
        output: raw.output,
    })
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mkv_core::solvers::Scheme;

    const BASIC: &str = r#"
[model]
name = "price-impact-pontryagin"

[grid]
horizon = 0.25
steps = 25

[solver]
scheme = "dynamic"
iterations = 10
"#;

    #[test]
    fn scheme_defaults_fill_unset_keys() {
        let cfg = parse_config(BASIC).unwrap();
        assert_eq!(cfg.solver.scheme, Scheme::Dynamic);
        assert_eq!(cfg.solver.iterations, 10);
        assert_eq!(cfg.solver.batch, 200);
        assert_eq!(cfg.solver.memory, 100);
        assert_eq!(cfg.repeats, 1);
        assert_eq!(cfg.model, ModelChoice::PriceImpactPontryagin(PriceImpactParams::default()));

        let direct = parse_config(&BASIC.replace("dynamic", "direct")).unwrap();
        assert_eq!(direct.solver.batch, 10_000);
    }

    #[test]
    fn param_overrides_apply() {
        let text = BASIC.replace(
            "[grid]",
            "[model.params]\nd = 3\nsigma = 0.5\n\n[grid]",
        );
        let cfg = parse_config(&text).unwrap();
        let ModelChoice::PriceImpactPontryagin(p) = cfg.model else {
            panic!("wrong family")
        };
        assert_eq!((p.d, p.sigma, p.c_x), (3, 0.5, 2.0));
    }

    #[test]
    fn missing_model_name_is_rejected() {
        let err = parse_config(&BASIC.replace("name = \"price-impact-pontryagin\"", "")).unwrap_err();
        assert!(err.0.contains("name"), "{err}");
    }

    #[test]
    fn unknown_model_reports_its_line() {
        let err = parse_config(&BASIC.replace("price-impact-pontryagin", "nope")).unwrap_err();
        assert!(err.0.starts_with("line 3:"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = parse_config(&BASIC.replace("iterations = 10", "iterashuns = 10")).unwrap_err();
        assert!(err.0.contains("iterashuns"), "{err}");
        assert!(err.0.contains("line 11"), "{err}");
        let text = BASIC.replace("[grid]", "[model.params]\nrho = 2.0\n[grid]");
        assert!(parse_config(&text).unwrap_err().0.contains("rho"));
    }

    #[test]
    fn grid_needs_exactly_one_resolution() {
        assert!(parse_config(&BASIC.replace("steps = 25", "")).is_err());
        assert!(parse_config(&BASIC.replace("steps = 25", "steps = 25\ndt = 0.01")).is_err());
        let cfg = parse_config(&BASIC.replace("steps = 25", "dt = 0.01")).unwrap();
        assert_eq!(cfg.grid.build().unwrap().steps(), 25);
        assert!(parse_config(&BASIC.replace("steps = 25", "dt = 0.3")).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        for name in MODEL_NAMES {
            let cfg = parse_config(&BASIC.replace("price-impact-pontryagin", name)).unwrap();
            let json = serde_json::to_string(&cfg).unwrap();
            let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }
}
