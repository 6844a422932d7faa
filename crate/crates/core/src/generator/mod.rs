//! Drivers `g(t, state, y, z)` together with their declared hypothesis
//! constants, and the algebraic constructions the solvers are built from:
//! penalization toward an obstacle, the sign flip `g_-`, and stopping.
//!
//! A [`Generator`] is split into a smooth part, evaluated by the backward
//! schemes, and a list of [`Penalty`] terms `n (L - y)^+` / `-n (y - U)^+`
//! that the schemes solve for in closed form. [`Generator::eval`] always
//! returns the full pointwise value.

mod hypotheses;
pub mod registry;

use std::fmt;
use std::sync::Arc;

use crate::dynkin::StoppingRule;
use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, Lattice};
use crate::scheme::Scheme;

pub use hypotheses::{
    check_hypotheses, Hypothesis, HypothesisEntry, HypothesisReport, SampleTuple, SamplingBox,
    Verdict,
};

/// Where a driver is evaluated. `node` indexes the lattice node (or the
/// Monte Carlo path); `state` has one coordinate per Brownian dimension.
#[derive(Clone, Copy, Debug)]
pub struct Point<'a> {
    pub t: f64,
    pub step: usize,
    pub node: usize,
    pub state: &'a [f64],
}

pub type DriverFn = dyn Fn(&Point, f64, &[f64]) -> f64 + Send + Sync;

/// Bound `h` in the growth hypotheses.
#[derive(Clone, Debug, PartialEq)]
pub enum HBound {
    Constant(f64),
    Adapted(AdaptedProcess),
}

impl HBound {
    pub fn at(&self, node: usize) -> f64 {
        match self {
            HBound::Constant(c) => *c,
            HBound::Adapted(p) => p.value(node),
        }
    }

    fn plus(&self, other: &HBound) -> HBound {
        match (self, other) {
            (HBound::Constant(a), HBound::Constant(b)) => HBound::Constant(a + b),
            (HBound::Adapted(p), HBound::Constant(c)) | (HBound::Constant(c), HBound::Adapted(p)) => {
                HBound::Adapted(p.map(|v| v + c))
            }
            (HBound::Adapted(p), HBound::Adapted(q)) => HBound::Adapted(
                p.zip_with(q, |a, b| a + b)
                    .unwrap_or_else(|_| p.map(|v| v + q.sup_norm())),
            ),
        }
    }

    fn lattice(&self) -> Option<Lattice> {
        match self {
            HBound::Adapted(p) => Some(*p.lattice()),
            HBound::Constant(_) => None,
        }
    }
}

/// Declared constants of the standing hypotheses.
///
/// `kappa` bounds the z-Lipschitz constant and the growth terms, `lambda`
/// the one-sided monotonicity in `y`, `alpha` the sublinear z-growth
/// exponent and `h` the growth bound. `y_lipschitz`, when known, bounds
/// `|dg/dy|`; the explicit scheme needs it for its monotone-step guard.
#[derive(Clone, Debug, PartialEq)]
pub struct Constants {
    pub kappa: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub h: HBound,
    pub y_lipschitz: Option<f64>,
}

impl Constants {
    pub fn new(kappa: f64, lambda: f64, alpha: f64, h: f64) -> Self {
        Self {
            kappa,
            lambda,
            alpha,
            h: HBound::Constant(h),
            y_lipschitz: None,
        }
    }

    pub fn with_y_lipschitz(mut self, l: f64) -> Self {
        self.y_lipschitz = Some(l);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kappa must be finite and non-negative, got {}",
                self.kappa
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidParameter("lambda must be finite".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if let HBound::Constant(h) = self.h {
            if !(h >= 0.0 && h.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "h must be non-negative, got {h}"
                )));
            }
        }
        if let Some(l) = self.y_lipschitz {
            if !(l >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "y-Lipschitz constant must be non-negative, got {l}"
                )));
            }
        }
        Ok(())
    }
}

/// Structural facts a driver declares about itself. They gate the
/// precondition-dependent evaluation axioms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Traits {
    /// `g` does not depend on `y`.
    pub y_independent: bool,
    /// `g(t, y, 0) = 0` for every `y`.
    pub zero_at_zero_z: bool,
    /// `g(t, 0, 0) = 0`.
    pub zero_at_origin: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Lower,
    Upper,
}

impl Side {
    pub fn flip(self) -> Side {
        match self {
            Side::Lower => Side::Upper,
            Side::Upper => Side::Lower,
        }
    }
}

/// `n (L - y)^+` for a lower obstacle, `-n (y - U)^+` for an upper one.
#[derive(Clone, Debug)]
pub struct Penalty {
    pub side: Side,
    pub obstacle: AdaptedProcess,
    pub intensity: f64,
}

impl Penalty {
    pub fn eval(&self, node: usize, y: f64) -> f64 {
        let level = self.obstacle.value(node);
        match self.side {
            Side::Lower => self.intensity * (level - y).max(0.0),
            Side::Upper => -self.intensity * (y - level).max(0.0),
        }
    }
}

/// Result of the monotone-step check `sqrt(dt)·κ + dt·c <= 1`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Guard {
    pub scheme: Scheme,
    pub value: f64,
    pub holds: bool,
}

#[derive(Clone)]
pub struct Generator {
    name: String,
    smooth: Arc<DriverFn>,
    penalties: Vec<Penalty>,
    stop: Option<Arc<StoppingRule>>,
    constants: Constants,
    traits: Traits,
}

impl fmt::Debug for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Generator")
            .field("name", &self.name)
            .field("penalties", &self.penalties.len())
            .field("stopped", &self.stop.is_some())
            .field("constants", &self.constants)
            .field("traits", &self.traits)
            .finish()
    }
}

impl Generator {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&Point, f64, &[f64]) -> f64 + Send + Sync + 'static,
        constants: Constants,
        traits: Traits,
    ) -> Result<Self> {
        constants.validate()?;
        Ok(Self {
            name: name.into(),
            smooth: Arc::new(f),
            penalties: Vec::new(),
            stop: None,
            constants,
            traits,
        })
    }

    /// `g ≡ 0`.
    pub fn zero() -> Self {
        Self::builtin(
            "zero",
            |_, _, _| 0.0,
            Constants::new(0.0, 0.0, 0.5, 0.0).with_y_lipschitz(0.0),
            Traits {
                y_independent: true,
                zero_at_zero_z: true,
                zero_at_origin: true,
            },
        )
    }

    /// `g ≡ c`.
    pub fn constant(c: f64) -> Self {
        Self::builtin(
            format!("constant:{c}"),
            move |_, _, _| c,
            Constants::new(0.0, 0.0, 0.5, c.abs()).with_y_lipschitz(0.0),
            Traits {
                y_independent: true,
                zero_at_zero_z: c == 0.0,
                zero_at_origin: c == 0.0,
            },
        )
    }

    /// `g = a·y + b·Σ z_i`.
    pub fn linear(a: f64, b: f64) -> Self {
        Self::builtin(
            format!("linear:{a},{b}"),
            move |_, y, z| a * y + b * z.iter().sum::<f64>(),
            Constants::new(a.abs().max(b.abs()), a, 0.5, 0.0).with_y_lipschitz(a.abs()),
            Traits {
                y_independent: a == 0.0,
                zero_at_zero_z: a == 0.0,
                zero_at_origin: true,
            },
        )
    }

    /// `g = a·y + b·Σ sin(z_i)`.
    pub fn sine(a: f64, b: f64) -> Self {
        Self::builtin(
            format!("sine:{a},{b}"),
            move |_, y, z| a * y + b * z.iter().map(|v| v.sin()).sum::<f64>(),
            Constants::new(a.abs().max(b.abs()), a, 0.5, 0.0).with_y_lipschitz(a.abs()),
            Traits {
                y_independent: a == 0.0,
                zero_at_zero_z: a == 0.0,
                zero_at_origin: true,
            },
        )
    }

    /// `g = k·|z|`.
    pub fn abs_z(k: f64) -> Self {
        Self::builtin(
            format!("abs-z:{k}"),
            move |_, _, z| k * z.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Constants::new(k.abs(), 0.0, 0.5, 0.0).with_y_lipschitz(0.0),
            Traits {
                y_independent: true,
                zero_at_zero_z: true,
                zero_at_origin: true,
            },
        )
    }

    fn builtin(
        name: impl Into<String>,
        f: impl Fn(&Point, f64, &[f64]) -> f64 + Send + Sync + 'static,
        constants: Constants,
        traits: Traits,
    ) -> Self {
        Self {
            name: name.into(),
            smooth: Arc::new(f),
            penalties: Vec::new(),
            stop: None,
            constants,
            traits,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Replaces the declared constants.
    pub fn with_constants(mut self, constants: Constants) -> Result<Self> {
        constants.validate()?;
        self.constants = constants;
        Ok(self)
    }

    pub fn with_traits(mut self, traits: Traits) -> Self {
        self.traits = traits;
        self
    }

    /// Constants of the smooth part, the ones the scheme guards use.
    pub fn constants(&self) -> &Constants {
        &self.constants
    }

    /// Constants of the full driver including penalty terms:
    /// each `n (L - y)^+` adds `n` to κ and to the y-Lipschitz bound and
    /// `n·L^+` to `h` (it is non-increasing in `y`, so λ is unchanged).
    pub fn effective_constants(&self) -> Constants {
        let mut c = self.constants.clone();
        if self.stop.is_some() {
            c.lambda = c.lambda.max(0.0);
        }
        for p in &self.penalties {
            let level = match p.side {
                Side::Lower => p.obstacle.map(|v| v.max(0.0)),
                Side::Upper => p.obstacle.map(|v| (-v).max(0.0)),
            };
            c.kappa += p.intensity;
            c.y_lipschitz = c.y_lipschitz.map(|l| l + p.intensity);
            c.h = c.h.plus(&HBound::Adapted(level.map(|v| v * p.intensity)));
        }
        c
    }

    pub fn traits(&self) -> Traits {
        self.traits
    }

    pub fn penalties(&self) -> &[Penalty] {
        &self.penalties
    }

    pub fn stop_rule(&self) -> Option<&StoppingRule> {
        self.stop.as_deref()
    }

    /// The lattice this driver is tied to through obstacles, stopping rules
    /// or an adapted `h`, if any.
    pub fn lattice(&self) -> Option<Lattice> {
        self.penalties
            .first()
            .map(|p| *p.obstacle.lattice())
            .or_else(|| self.stop.as_ref().map(|r| *r.lattice()))
            .or_else(|| self.constants.h.lattice())
    }

    pub fn check_on(&self, lattice: &Lattice) -> Result<()> {
        match self.lattice() {
            Some(l) if &l != lattice => Err(Error::LatticeMismatch),
            _ => Ok(()),
        }
    }

    /// Whether the stopping factor `1{t <= tau}` is one at `node`.
    pub fn is_active(&self, node: usize) -> bool {
        match &self.stop {
            None => true,
            Some(rule) => !rule.is_stopped(node) || rule.is_first_stop(node),
        }
    }

    /// Full pointwise value.
    pub fn eval(&self, at: &Point, y: f64, z: &[f64]) -> f64 {
        if !self.is_active(at.node) {
            return 0.0;
        }
        let mut v = (self.smooth)(at, y, z);
        for p in &self.penalties {
            v += p.eval(at.node, y);
        }
        v
    }

    /// Value without the penalty terms.
    pub fn eval_smooth(&self, at: &Point, y: f64, z: &[f64]) -> f64 {
        if !self.is_active(at.node) {
            return 0.0;
        }
        (self.smooth)(at, y, z)
    }

    /// Convenience for one-dimensional lattices.
    pub fn eval_scalar(&self, t: f64, step: usize, node: usize, state: f64, y: f64, z: f64) -> f64 {
        let s = [state];
        self.eval(
            &Point {
                t,
                step,
                node,
                state: &s,
            },
            y,
            &[z],
        )
    }

    /// Monotone-step guard for one backward step of size `dt`:
    /// `sqrt(dt)·κ + dt·λ⁺` for the implicit scheme and
    /// `sqrt(dt)·κ + dt·L_y` for the explicit one.
    pub fn monotone_guard(&self, dt: f64, scheme: Scheme) -> Guard {
        let c = &self.constants;
        let slope = match scheme {
            Scheme::Implicit => c.lambda.max(0.0),
            Scheme::Explicit => c.y_lipschitz.unwrap_or(f64::INFINITY),
        };
        let value = dt.sqrt() * c.kappa + dt * slope;
        Guard {
            scheme,
            value,
            holds: value <= 1.0,
        }
    }

    /// `g_n = g + n (y - L)^-`.
    pub fn penalize_lower(&self, lower: &AdaptedProcess, n: f64) -> Result<Self> {
        self.penalize(Side::Lower, lower, n)
    }

    /// `g̃_n = g - n (y - U)^+`.
    pub fn penalize_upper(&self, upper: &AdaptedProcess, n: f64) -> Result<Self> {
        self.penalize(Side::Upper, upper, n)
    }

    fn penalize(&self, side: Side, obstacle: &AdaptedProcess, n: f64) -> Result<Self> {
        if !(n >= 0.0 && n.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "penalty intensity must be finite and non-negative, got {n}"
            )));
        }
        self.check_on(obstacle.lattice())?;
        let mut out = self.clone();
        if n > 0.0 {
            out.penalties.push(Penalty {
                side,
                obstacle: obstacle.clone(),
                intensity: n,
            });
            out.traits = Traits::default();
        }
        out.name = format!(
            "{}+pen-{}({n})",
            self.name,
            match side {
                Side::Lower => "lower",
                Side::Upper => "upper",
            }
        );
        Ok(out)
    }

    /// `g_-(t, y, z) = -g(t, -y, -z)`. Lower penalties become upper
    /// penalties on the negated obstacle and vice versa.
    pub fn negate_reflect(&self) -> Self {
        let inner = Arc::clone(&self.smooth);
        let smooth = move |at: &Point, y: f64, z: &[f64]| {
            let nz: Vec<f64> = z.iter().map(|v| -v).collect();
            -inner(at, -y, &nz)
        };
        Self {
            name: format!("neg({})", self.name),
            smooth: Arc::new(smooth),
            penalties: self
                .penalties
                .iter()
                .map(|p| Penalty {
                    side: p.side.flip(),
                    obstacle: p.obstacle.neg(),
                    intensity: p.intensity,
                })
                .collect(),
            stop: self.stop.clone(),
            constants: self.constants.clone(),
            traits: self.traits,
        }
    }

    /// `g_τ = 1{t <= τ} g`: zero at every node strictly after the stopping
    /// node of its path.
    pub fn stop_generator(&self, tau: &StoppingRule) -> Result<Self> {
        self.check_on(tau.lattice())?;
        let rule = match &self.stop {
            Some(prev) => prev.earliest(tau)?,
            None => tau.clone(),
        };
        let mut out = self.clone();
        out.stop = Some(Arc::new(rule));
        out.name = format!("stop({})", self.name);
        Ok(out)
    }
}
