use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Law from the current batch, differentiated through.
    Direct,
    /// Law from a ring buffer of recent batch means, frozen.
    Dynamic,
    /// Law from a network of time, tied to the batch by a penalty.
    Expectation,
    /// Backward sequence of one-step regressions with per-step networks.
    Local,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Direct => "direct",
            Scheme::Dynamic => "dynamic",
            Scheme::Expectation => "expectation",
            Scheme::Local => "local",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub scheme: Scheme,
    /// `B`: training batch size.
    pub batch: usize,
    /// `K`: outer iterations.
    pub iterations: usize,
    /// `M`: ring-buffer depth (dynamic and local).
    pub memory: usize,
    /// `R`: samples for law estimation (local forward pass, Gaussian initial laws).
    pub law_samples: usize,
    /// `H`: gradient steps per time step and outer iteration (local).
    pub inner_steps: usize,
    /// `lambda`: penalty weight (expectation).
    pub penalty: f64,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub hidden_layers: usize,
    /// Defaults to `d + 10`.
    pub hidden_width: Option<usize>,
    /// Samples used to estimate the reported statistics after training.
    pub eval_batch: usize,
    /// Stop early, with status `converged`, once the loss falls below this.
    pub loss_tolerance: Option<f64>,
    /// Local solver: start each backward problem from the freshly trained
    /// next-step network instead of the same step's previous parameters.
    pub warm_start_from_next: bool,
    /// Record the law estimate used at each time step of the final evaluation.
    pub record_law: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            scheme: Scheme::Dynamic,
            batch: 200,
            iterations: 2000,
            memory: 100,
            law_samples: 50_000,
            inner_steps: 1,
            penalty: 10.0,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            seed: 0,
            hidden_layers: 3,
            hidden_width: None,
            eval_batch: 10_000,
            loss_tolerance: None,
            warm_start_from_next: false,
            record_law: false,
        }
    }
}

impl SolverConfig {
    /// Defaults for one scheme, sized as in the reference experiments.
    pub fn for_scheme(scheme: Scheme) -> Self {
        let base = SolverConfig {
            scheme,
            ..SolverConfig::default()
        };
        match scheme {
            Scheme::Direct => SolverConfig { batch: 10_000, ..base },
            Scheme::Dynamic => SolverConfig { batch: 200, memory: 100, ..base },
            Scheme::Expectation => SolverConfig { batch: 2000, ..base },
            Scheme::Local => SolverConfig {
                batch: 100,
                memory: 20,
                law_samples: 50_000,
                // 20000 gradient steps at N = 100
                iterations: 200,
                ..base
            },
        }
    }

    pub fn hidden_width_for(&self, d: usize) -> usize {
        self.hidden_width.unwrap_or(d + 10)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(Error::config(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        positive(self.batch, "batch")?;
        positive(self.eval_batch, "eval_batch")?;
        positive(self.law_samples, "law_samples")?;
        if matches!(self.scheme, Scheme::Dynamic | Scheme::Local) {
            positive(self.memory, "memory")?;
        }
        if self.scheme == Scheme::Local {
            positive(self.inner_steps, "inner_steps")?;
        }
        if !(self.penalty >= 0.0 && self.penalty.is_finite()) {
            return Err(Error::config(format!("penalty must be >= 0, got {}", self.penalty)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.hidden_width == Some(0) {
            return Err(Error::config("hidden_width must be positive"));
        }
        Ok(())
    }
}
