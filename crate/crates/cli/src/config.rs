//! Experiment configuration.

use std::path::Path;

use anyhow::{bail, Context, Result};
use drbsde_core::drbsde::Direction;
use drbsde_core::rbsde::SnellMode;
use drbsde_core::{resolve, Constants, Generator, Lattice, Mode, RegressionBasis, SamplingBox, Scheme, Side};
use serde::{Deserialize, Serialize};

use crate::expr::Expr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Bsde,
    Rbsde,
    Drbsde,
    DynkinVerify,
    Penalization,
    Pasting,
    Axioms,
    Hypotheses,
    McCrosscheck,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Bsde => "bsde",
            Kind::Rbsde => "rbsde",
            Kind::Drbsde => "drbsde",
            Kind::DynkinVerify => "dynkin-verify",
            Kind::Penalization => "penalization",
            Kind::Pasting => "pasting",
            Kind::Axioms => "axioms",
            Kind::Hypotheses => "hypotheses",
            Kind::McCrosscheck => "mc-crosscheck",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub horizon: f64,
    pub steps: usize,
    pub mode: Mode,
}

impl LatticeSpec {
    pub fn build(&self) -> Result<Lattice> {
        Ok(Lattice::new(self.horizon, self.steps, self.mode)?)
    }
}

/// Declared constants overriding the registry defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSpec {
    pub kappa: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_lipschitz: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    /// Registry name, e.g. `zero`, `sine:-1,0.5`, `driver-file:g.json`.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConstantsSpec>,
}

impl GeneratorSpec {
    pub fn build(&self, base_dir: Option<&Path>) -> Result<Generator> {
        let g = resolve(&self.name, base_dir)?;
        match &self.constants {
            None => Ok(g),
            Some(c) => {
                let mut constants = Constants::new(c.kappa, c.lambda, c.alpha, c.h);
                if let Some(l) = c.y_lipschitz {
                    constants = constants.with_y_lipschitz(l);
                }
                Ok(g.with_constants(constants)?)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    pub paths: usize,
    /// Time steps of the simulation; defaults to the lattice steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default)]
    pub basis: RegressionBasis,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
}

fn default_bootstrap() -> usize {
    50
}

/// Every tolerance has a default and can be overridden per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Node-wise identities of the direct solvers.
    pub exact: f64,
    /// Game values, saddle inequalities and route agreement.
    pub game: f64,
    /// g-evaluation axioms.
    pub axiom: f64,
    /// Final penalization gap relative to the data scale.
    pub penalty_relative: f64,
    /// Monte Carlo agreement: `|ΔY_0| <= se_multiple·SE + scale_slack·scale`.
    pub mc_se_multiple: f64,
    pub mc_scale_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            exact: 1e-12,
            game: 1e-10,
            axiom: 1e-10,
            penalty_relative: 1e-2,
            mc_se_multiple: 3.0,
            mc_scale_slack: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub lattice: LatticeSpec,
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub scheme: Scheme,
    /// Expression over `state`, evaluated at `t = T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<String>,
    /// Obstacle side for one-obstacle kinds; inferred when only one is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
    /// Penalty levels for `penalization`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<f64>>,
    /// Scheme direction when `penalization` is given both obstacles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    /// Penalty level of the squeeze and cross-validation checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snell: Option<SnellMode>,
    /// Sampled tuples for `axioms` (default 100) or `hypotheses` (default 10000).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Sampling box for `hypotheses`; defaults to `[0, T] × [-5, 5]^4`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSpec>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

pub const DEFAULT_PENALTY_LEVEL: f64 = 1024.0;
pub const DEFAULT_AXIOM_SAMPLES: usize = 100;
pub const DEFAULT_HYPOTHESIS_SAMPLES: usize = 10_000;
pub const DEFAULT_SAMPLING_RADIUS: f64 = 5.0;

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Parses every expression and checks the fields each kind requires.
    pub fn validate(&self) -> Result<()> {
        for (field, src) in [("terminal", &self.terminal), ("lower", &self.lower), ("upper", &self.upper)] {
            if let Some(src) = src {
                src.parse::<Expr>().with_context(|| format!("field '{field}': '{src}'"))?;
            }
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("exact", t.exact),
            ("game", t.game),
            ("axiom", t.axiom),
            ("penalty_relative", t.penalty_relative),
            ("mc_se_multiple", t.mc_se_multiple),
            ("mc_scale_slack", t.mc_scale_slack),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                bail!("tolerance '{name}' must be finite and nonnegative");
            }
        }
        let needs_terminal = !matches!(self.kind, Kind::Axioms | Kind::Hypotheses);
        if needs_terminal && self.terminal.is_none() {
            bail!("kind '{}' needs a 'terminal' expression", self.kind.name());
        }
        let both = self.lower.is_some() && self.upper.is_some();
        let one = self.lower.is_some() || self.upper.is_some();
        match self.kind {
            Kind::Rbsde => {
                self.one_obstacle_side()?;
            }
            Kind::Drbsde | Kind::DynkinVerify | Kind::Pasting if !both => {
                bail!("kind '{}' needs both 'lower' and 'upper'", self.kind.name());
            }
            Kind::Penalization => {
                if !both {
                    self.one_obstacle_side()?;
                }
                match &self.schedule {
                    None => bail!("kind 'penalization' needs a 'schedule'"),
                    Some(s) if s.is_empty() => bail!("'schedule' must not be empty"),
                    _ => {}
                }
            }
            Kind::McCrosscheck if self.mc.is_none() => bail!("kind 'mc-crosscheck' needs an 'mc' section"),
            Kind::Bsde if one => bail!("kind 'bsde' takes no obstacles"),
            _ => {}
        }
        Ok(())
    }

    /// The side of a one-obstacle problem.
    pub fn one_obstacle_side(&self) -> Result<Side> {
        match (&self.lower, &self.upper, self.side) {
            (Some(_), None, None | Some(Side::Lower)) => Ok(Side::Lower),
            (None, Some(_), None | Some(Side::Upper)) => Ok(Side::Upper),
            (Some(_), Some(_), _) => bail!("kind '{}' takes exactly one obstacle", self.kind.name()),
            (None, None, _) => bail!("kind '{}' needs an obstacle ('lower' or 'upper')", self.kind.name()),
            (_, _, Some(side)) => bail!("'side' is {side:?} but the obstacle given is the other one"),
        }
    }
}
