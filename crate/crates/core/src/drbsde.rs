//! Doubly reflected BSDEs: the game datum, the direct solver, the two
//! penalization schemes, pasting of one-obstacle solutions and
//! cross-validation of all routes.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{assemble, Backward, Raw, Solution, SolutionKind};
use crate::dynkin::StoppingRule;
use crate::error::{Error, Result};
use crate::generator::{Generator, Point, Side};
use crate::io::fmt_f64;
use crate::lattice::{AdaptedProcess, Lattice, TerminalPayoff};
use crate::rbsde::{check_schedule, check_terminal_order, penalty_envelope, solve_rbsde, PenalizationLevel};
use crate::scheme::{self, Scheme};

/// Relative separation below which a game is rejected.
pub const SEPARATION_MARGIN: f64 = 1e-9;

/// `(ξ, g, L, U)` with `L_T <= ξ <= U_T` and `L < U` everywhere.
#[derive(Clone, Debug)]
pub struct DynkinGame {
    xi: TerminalPayoff,
    g: Generator,
    lower: AdaptedProcess,
    upper: AdaptedProcess,
}

impl DynkinGame {
    pub fn new(xi: TerminalPayoff, g: Generator, lower: AdaptedProcess, upper: AdaptedProcess) -> Result<Self> {
        let lat = *xi.lattice();
        lower.check_on(&lat)?;
        upper.check_on(&lat)?;
        g.check_on(&lat)?;
        check_terminal_order(&lat, &xi, &lower, Side::Lower)?;
        check_terminal_order(&lat, &xi, &upper, Side::Upper)?;
        let game = Self { xi, g, lower, upper };
        let (node, margin) = game.separation();
        if !(margin >= SEPARATION_MARGIN * game.scale()) {
            return Err(Error::Separation {
                node,
                step: lat.step_of(node),
                state: lat.state(node),
                lower: game.lower.value(node),
                upper: game.upper.value(node),
            });
        }
        Ok(game)
    }

    pub fn lattice(&self) -> &Lattice {
        self.xi.lattice()
    }

    pub fn xi(&self) -> &TerminalPayoff {
        &self.xi
    }

    pub fn g(&self) -> &Generator {
        &self.g
    }

    pub fn lower(&self) -> &AdaptedProcess {
        &self.lower
    }

    pub fn upper(&self) -> &AdaptedProcess {
        &self.upper
    }

    /// Node and value of `min (U - L)`.
    pub fn separation(&self) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (n, (l, u)) in self.lower.values().iter().zip(self.upper.values()).enumerate() {
            let m = u - l;
            if !(m >= best.1) {
                best = (n, m);
            }
        }
        best
    }

    pub fn separation_margin(&self) -> f64 {
        self.separation().1
    }

    /// `1 + max(|ξ|∞, |L|∞, |U|∞)`.
    pub fn scale(&self) -> f64 {
        let xi = self.xi.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        1.0 + xi.max(self.lower.sup_norm()).max(self.upper.sup_norm())
    }

    /// The same game with another driver.
    pub fn with_generator(&self, g: Generator) -> Result<Self> {
        g.check_on(self.lattice())?;
        Ok(Self { g, ..self.clone() })
    }
}

/// `Y_k = min(U_k, max(L_k, Ỹ_k))`.
pub fn solve_drbsde(lattice: &Lattice, game: &DynkinGame, scheme: Scheme) -> Result<Solution> {
    game.xi.check_on(lattice)?;
    let raw = Backward {
        lattice,
        g: &game.g,
        scheme,
        lower: Some(&game.lower),
        upper: Some(&game.upper),
        frozen: None,
    }
    .run(game.xi.values())?;
    assemble(
        lattice,
        SolutionKind::DoublyReflected,
        &game.g,
        scheme,
        raw,
        Some(game.lower.clone()),
        Some(game.upper.clone()),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Upper-reflected solves driven by `g + n(y - L)^-`; values increase in `n`.
    Increasing,
    /// Lower-reflected solves driven by `g - n(y - U)^+`; values decrease in `n`.
    Decreasing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoublePenalizationReport {
    pub direction: Direction,
    pub scheme: Scheme,
    pub levels: Vec<PenalizationLevel>,
    /// Nodes where the level lies on the wrong side of the direct solution.
    pub squeeze_violations: usize,
    pub scale: f64,
    pub final_gap: f64,
}

impl DoublePenalizationReport {
    pub fn total_violations(&self) -> usize {
        self.levels.iter().map(|l| l.violations).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "sup_gap", "violations"])?;
        for l in &self.levels {
            w.write_record([fmt_f64(l.n), fmt_f64(l.sup_gap), l.violations.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn penalized_level(lattice: &Lattice, game: &DynkinGame, n: f64, direction: Direction, scheme: Scheme) -> Result<Solution> {
    match direction {
        Direction::Increasing => {
            let g = game.g.penalize_lower(&game.lower, n)?;
            solve_rbsde(lattice, &game.xi, &g, &game.upper, Side::Upper, scheme)
        }
        Direction::Decreasing => {
            let g = game.g.penalize_upper(&game.upper, n)?;
            solve_rbsde(lattice, &game.xi, &g, &game.lower, Side::Lower, scheme)
        }
    }
}

/// The increasing or decreasing penalization scheme over `schedule`.
pub fn double_penalization(
    lattice: &Lattice,
    game: &DynkinGame,
    schedule: &[f64],
    direction: Direction,
    scheme: Scheme,
) -> Result<(Vec<Solution>, DoublePenalizationReport)> {
    check_schedule(schedule)?;
    let direct = solve_drbsde(lattice, game, scheme)?;
    let solutions: Vec<Solution> = schedule
        .par_iter()
        .map(|&n| penalized_level(lattice, game, n, direction, scheme))
        .collect::<Result<_>>()?;
    let (push, env_g) = match direction {
        Direction::Increasing => (direct.dk(), game.g.clone()),
        Direction::Decreasing => (direct.dj(), game.g.negate_reflect()),
    };
    let below = |a: f64, b: f64| match direction {
        Direction::Increasing => a < b,
        Direction::Decreasing => a > b,
    };
    let mut levels = Vec::with_capacity(schedule.len());
    let mut squeeze_violations = 0;
    for (i, (sol, &n)) in solutions.iter().zip(schedule).enumerate() {
        let violations = if i == 0 {
            0
        } else {
            sol.y()
                .values()
                .iter()
                .zip(solutions[i - 1].y().values())
                .filter(|(a, b)| below(**a, **b))
                .count()
        };
        squeeze_violations += sol
            .y()
            .values()
            .iter()
            .zip(direct.y().values())
            .filter(|(a, d)| below(**d, **a))
            .count();
        levels.push(PenalizationLevel {
            n,
            sup_gap: sol.y().max_abs_diff(direct.y()),
            violations,
            envelope: penalty_envelope(lattice, &env_g, scheme, push, n),
            flat_off: 0.0,
        });
    }
    let final_gap = levels.last().map_or(f64::INFINITY, |l| l.sup_gap);
    Ok((
        solutions,
        DoublePenalizationReport {
            direction,
            scheme,
            levels,
            squeeze_violations,
            scale: 1.0 + direct.y().sup_norm(),
            final_gap,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqueezeReport {
    pub n: f64,
    /// Nodes where `Y^n <= Y <= Ỹ^n` fails.
    pub violations: usize,
    pub width: f64,
    pub scale: f64,
}

/// Runs both schemes at level `n` and checks `Y^n <= Y <= Ỹ^n`.
pub fn penalization_squeeze(lattice: &Lattice, game: &DynkinGame, n: f64, scheme: Scheme) -> Result<SqueezeReport> {
    let (direct, (inc, dec)) = rayon::join(
        || solve_drbsde(lattice, game, scheme),
        || {
            rayon::join(
                || penalized_level(lattice, game, n, Direction::Increasing, scheme),
                || penalized_level(lattice, game, n, Direction::Decreasing, scheme),
            )
        },
    );
    let (direct, inc, dec) = (direct?, inc?, dec?);
    let mut violations = 0;
    let mut width = 0.0f64;
    for node in 0..lattice.node_count() {
        let (a, y, b) = (inc.y().value(node), direct.y().value(node), dec.y().value(node));
        if !(a <= y && y <= b) {
            violations += 1;
        }
        width = width.max(b - a);
    }
    Ok(SqueezeReport {
        n,
        violations,
        width,
        scale: 1.0 + direct.y().sup_norm(),
    })
}

#[derive(Clone, Debug)]
pub struct PastingSegment {
    pub index: usize,
    pub side: Side,
    pub start: StoppingRule,
    pub end: StoppingRule,
    pub nodes: usize,
}

/// Alternating segments `[ν_ℓ, ν'_ℓ]` (lower) and `[ν'_ℓ, ν_{ℓ+1}]` (upper).
#[derive(Clone, Debug)]
pub struct PastingLedger {
    pub segments: Vec<PastingSegment>,
    /// Segments traversed by each path, indexed by terminal node.
    pub depth: Vec<usize>,
    pub eps_hit: f64,
}

impl PastingLedger {
    pub fn max_depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    /// Writes `segment,side,start_rule,end_rule,nodes`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["segment", "side", "start_rule", "end_rule", "nodes"])?;
        for s in &self.segments {
            let side = match s.side {
                Side::Lower => "lower",
                Side::Upper => "upper",
            };
            w.write_record([
                s.index.to_string(),
                side.to_string(),
                s.start.digest(),
                s.end.digest(),
                s.nodes.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Builds the solution by pasting one-obstacle solutions.
///
/// A backward pass computes, for every node, the value of the lower-reflected
/// problem (`W_L`) and of the upper-reflected problem (`W_U`) whose terminal
/// data at the next contact is the continuation value of the other side.
/// A contact with `U` while reflecting on `L` hands over to the upper
/// segment and vice versa; contacts at the horizon end the path. A forward
/// pass then reads off the segments, starting at the root on the lower side.
pub fn pasting_construct(lattice: &Lattice, game: &DynkinGame, scheme: Scheme) -> Result<(Solution, PastingLedger)> {
    if !lattice.is_full_tree() {
        return Err(Error::UnsupportedMode("pasting needs the full tree".into()));
    }
    game.xi.check_on(lattice)?;
    let (l, u, g) = (&game.lower, &game.upper, &game.g);
    let n = lattice.steps();
    let count = lattice.node_count();
    let dt = lattice.dt();
    let eps = (1e-9 * game.scale()).min(0.25 * game.separation_margin());

    // continuation values seen from a lower (resp. upper) segment
    let mut next_l = vec![0.0; count];
    let mut next_u = vec![0.0; count];
    let mut switch_l = vec![false; count];
    let mut switch_u = vec![false; count];
    for node in lattice.terminal_nodes() {
        let x = game.xi.value_at_node(node);
        next_l[node] = x;
        next_u[node] = x;
    }
    let mut iterations = (0usize, 0usize);
    let cand = |node: usize, k: usize, nx: &[f64]| -> Result<scheme::StepValue> {
        let (d, up) = lattice.children(node);
        let e = 0.5 * (nx[up] + nx[d]);
        let z = (nx[up] - nx[d]) / (2.0 * lattice.sqrt_dt());
        let s = [lattice.state(node)];
        let at = Point {
            t: lattice.time(k),
            step: k,
            node,
            state: &s,
        };
        scheme::step(g, &at, e, &[z], dt, scheme)
    };
    for k in (0..n).rev() {
        for node in lattice.nodes_at(k) {
            let a = cand(node, k, &next_l)?;
            let b = cand(node, k, &next_u)?;
            iterations.0 += a.iterations + b.iterations;
            iterations.1 = iterations.1.max(a.iterations).max(b.iterations);
            let w_l = a.value.max(l.value(node));
            let w_u = b.value.min(u.value(node));
            switch_l[node] = w_l >= u.value(node) - eps;
            switch_u[node] = w_u <= l.value(node) + eps;
            next_l[node] = if switch_l[node] { w_u } else { w_l };
            next_u[node] = if switch_u[node] { w_l } else { w_u };
        }
    }

    // forward pass: current side and segment index at every node
    let mut side = vec![Side::Lower; count];
    let mut segment = vec![1usize; count];
    let mut y = vec![0.0; count];
    for node in 0..count {
        let (mut s, mut seg) = match lattice.parent(node) {
            Some(p) => (side[p], segment[p]),
            None => (Side::Lower, 1),
        };
        let switched = match s {
            Side::Lower => switch_l[node],
            Side::Upper => switch_u[node],
        };
        y[node] = match s {
            Side::Lower => next_l[node],
            Side::Upper => next_u[node],
        };
        if switched && lattice.step_of(node) < n {
            s = s.flip();
            seg += 1;
        }
        side[node] = s;
        segment[node] = seg;
    }

    let depth: Vec<usize> = lattice.terminal_nodes().map(|t| segment[t]).collect();
    let limit = n + 1;
    if let Some(path) = depth.iter().position(|&d| d > limit) {
        return Err(Error::PastingDepth { path, limit });
    }
    let max_depth = depth.iter().copied().max().unwrap_or(1);
    // segment indices never decrease along a path, so {segment >= ell} is a stop set
    let start_rule = |ell: usize| {
        let flags: Vec<bool> = (0..count).map(|node| segment[node] >= ell).collect();
        StoppingRule::from_flags(*lattice, &flags)
    };
    let mut segments = Vec::with_capacity(max_depth);
    for ell in 1..=max_depth {
        let start = start_rule(ell)?;
        let end = if ell == max_depth {
            StoppingRule::at_horizon(*lattice)
        } else {
            start_rule(ell + 1)?
        };
        segments.push(PastingSegment {
            index: ell,
            side: if ell % 2 == 1 { Side::Lower } else { Side::Upper },
            start,
            end,
            nodes: segment.iter().filter(|&&s| s == ell).count(),
        });
    }

    // assemble the pasted solution with its own pushes
    let mut raw = Raw {
        z: vec![0.0; count],
        dk: vec![0.0; count],
        dj: vec![0.0; count],
        ..Raw::default()
    };
    for k in (0..n).rev() {
        for node in lattice.nodes_at(k) {
            let (d, up) = lattice.children(node);
            raw.z[node] = (y[up] - y[d]) / (2.0 * lattice.sqrt_dt());
            let c = cand(node, k, &y)?.value;
            raw.dk[node] = (y[node] - c).max(0.0);
            raw.dj[node] = (c - y[node]).max(0.0);
        }
    }
    raw.y = y;
    raw.iterations_total = iterations.0;
    raw.iterations_max = iterations.1;
    let sol = assemble(lattice, SolutionKind::DoublyReflected, g, scheme, raw, Some(l.clone()), Some(u.clone()))?;
    Ok((
        sol,
        PastingLedger {
            segments,
            depth,
            eps_hit: eps,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteValue {
    pub route: String,
    pub y0: f64,
    pub gap_to_direct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub routes: Vec<RouteValue>,
    pub max_pairwise_gap: f64,
    pub pasting_gap: Option<f64>,
    pub pasting_depth: Option<usize>,
    pub penalty_level: f64,
    /// Bound `max(ΔK, ΔJ) / (1 + dt·n)` propagated through the steps.
    pub penalty_envelope: Option<f64>,
    pub flat_off_lower: f64,
    pub flat_off_upper: f64,
    pub separation_margin: f64,
    pub scale: f64,
}

/// Compares the direct solver, pasting (full tree only) and both
/// penalization schemes at level `n_cap`.
pub fn cross_validate(lattice: &Lattice, game: &DynkinGame, scheme: Scheme, n_cap: f64) -> Result<CrossValidationReport> {
    let ((direct, pasted), (inc, dec)) = rayon::join(
        || {
            rayon::join(
                || solve_drbsde(lattice, game, scheme),
                || {
                    if lattice.is_full_tree() {
                        pasting_construct(lattice, game, scheme).map(Some)
                    } else {
                        Ok(None)
                    }
                },
            )
        },
        || {
            rayon::join(
                || penalized_level(lattice, game, n_cap, Direction::Increasing, scheme),
                || penalized_level(lattice, game, n_cap, Direction::Decreasing, scheme),
            )
        },
    );
    let (direct, pasted, inc, dec) = (direct?, pasted?, inc?, dec?);
    let mut all: Vec<(&str, &Solution)> = vec![("direct", &direct)];
    if let Some((p, _)) = &pasted {
        all.push(("pasting", p));
    }
    all.push(("increasing-penalty", &inc));
    all.push(("decreasing-penalty", &dec));
    let mut max_pairwise_gap = 0.0f64;
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            max_pairwise_gap = max_pairwise_gap.max(all[i].1.y().max_abs_diff(all[j].1.y()));
        }
    }
    let routes = all
        .iter()
        .map(|(name, s)| RouteValue {
            route: name.to_string(),
            y0: s.y0(),
            gap_to_direct: s.y().max_abs_diff(direct.y()),
        })
        .collect();
    let push = direct.dk().zip_with(direct.dj(), f64::max)?;
    let envelope = penalty_envelope(lattice, &game.g, scheme, &push, n_cap).and_then(|a| {
        penalty_envelope(lattice, &game.g.negate_reflect(), scheme, &push, n_cap).map(|b| a.max(b))
    });
    let (flat_off_lower, flat_off_upper) = direct.flat_off_residuals();
    Ok(CrossValidationReport {
        routes,
        max_pairwise_gap,
        pasting_gap: pasted.as_ref().map(|(p, _)| p.y().max_abs_diff(direct.y())),
        pasting_depth: pasted.as_ref().map(|(_, l)| l.max_depth()),
        penalty_level: n_cap,
        penalty_envelope: envelope,
        flat_off_lower,
        flat_off_upper,
        separation_margin: game.separation_margin(),
        scale: game.scale(),
    })
}
