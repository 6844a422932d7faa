//! One backward time step, shared by the lattice and Monte Carlo solvers.
//!
//! Given the conditional expectation `e = E_k[Y_{k+1}]` and `z`, a step
//! produces the unreflected candidate. Penalty terms of the driver are always
//! solved implicitly in closed form; the smooth part is explicit or implicit
//! according to [`Scheme`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, Point, Side};

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    Explicit,
    Implicit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepValue {
    pub value: f64,
    pub iterations: usize,
}

/// Solves `y = a + dt·Σ p_i(y)` over the penalty terms active at `node`.
///
/// The right-hand side is non-increasing and piecewise linear in `y`, so the
/// root is unique; it is found on the linear piece that brackets it.
pub fn solve_penalties(g: &Generator, node: usize, a: f64, dt: f64) -> f64 {
    let pens = g.penalties();
    if pens.is_empty() || !g.is_active(node) {
        return a;
    }
    let solve_with = |probe: f64| {
        let mut num = a;
        let mut den = 1.0;
        for p in pens {
            let level = p.obstacle.value(node);
            let active = match p.side {
                Side::Lower => level > probe,
                Side::Upper => level < probe,
            };
            if active {
                num += dt * p.intensity * level;
                den += dt * p.intensity;
            }
        }
        num / den
    };
    if pens.len() == 1 {
        let p = &pens[0];
        let level = p.obstacle.value(node);
        let inside = match p.side {
            Side::Lower => a >= level,
            Side::Upper => a <= level,
        };
        if inside {
            return a;
        }
        return (a + dt * p.intensity * level) / (1.0 + dt * p.intensity);
    }
    let residual = |y: f64| {
        let mut r = y - a;
        for p in pens {
            r -= dt * p.eval(node, y);
        }
        r
    };
    let mut breaks: Vec<f64> = pens.iter().map(|p| p.obstacle.value(node)).collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    // first breakpoint with non-negative residual bounds the root from above
    let idx = breaks.iter().position(|&b| residual(b) >= 0.0);
    let probe = match idx {
        Some(0) => breaks[0] - 1.0,
        Some(i) => 0.5 * (breaks[i - 1] + breaks[i]),
        None => breaks[breaks.len() - 1] + 1.0,
    };
    solve_with(probe)
}

/// Unreflected candidate `Ỹ_k` at one node.
pub fn step(g: &Generator, at: &Point, e: f64, z: &[f64], dt: f64, scheme: Scheme) -> Result<StepValue> {
    let explicit = |y: f64| solve_penalties(g, at.node, e + dt * g.eval_smooth(at, y, z), dt);
    let y0 = explicit(e);
    let out = match scheme {
        Scheme::Explicit => StepValue {
            value: y0,
            iterations: 0,
        },
        Scheme::Implicit if g.traits().y_independent || !g.is_active(at.node) => StepValue {
            value: y0,
            iterations: 0,
        },
        Scheme::Implicit => {
            // relaxation centred on the declared slope range [-y_lip, λ] of g in y
            let c = g.constants();
            let theta = match c.y_lipschitz {
                Some(l) => 2.0 / (2.0 - dt * (c.lambda.min(l) - l)),
                None => 1.0 / (1.0 + dt * c.lambda.max(0.0)),
            };
            let mut y = y0;
            let mut residual = f64::INFINITY;
            let mut done = None;
            for it in 1..=MAX_ITERATIONS {
                let next = explicit(y);
                residual = (next - y).abs();
                if residual <= TOLERANCE * (1.0 + y.abs()) {
                    done = Some(StepValue {
                        value: next,
                        iterations: it,
                    });
                    break;
                }
                y += theta * (next - y);
            }
            done.ok_or(Error::NoConvergence {
                node: at.node,
                iterations: MAX_ITERATIONS,
                residual,
            })?
        }
    };
    if !out.value.is_finite() {
        return Err(Error::NonFinite {
            node: at.node,
            what: "candidate value".into(),
        });
    }
    Ok(out)
}

/// `max(L, ỹ)` and the pushing increment `(L - ỹ)^+`.
pub fn reflect_lower(candidate: f64, lower: f64) -> (f64, f64) {
    if candidate < lower {
        (lower, lower - candidate)
    } else {
        (candidate, 0.0)
    }
}

/// `min(U, max(L, ỹ))` with the increments `(L - ỹ)^+` and `(ỹ - U)^+`.
pub fn reflect_double(candidate: f64, lower: f64, upper: f64) -> (f64, f64, f64) {
    if candidate < lower {
        (lower, lower - candidate, 0.0)
    } else if candidate > upper {
        (upper, 0.0, candidate - upper)
    } else {
        (candidate, 0.0, 0.0)
    }
}
