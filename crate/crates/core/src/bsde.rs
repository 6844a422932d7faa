//! Backward induction for BSDE(ξ, g), the g-evaluation `E^g_{ν,τ}`, the
//! discrete martingale representation and the g-evaluation axioms.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynkin::StoppingRule;
use crate::error::{Error, Result};
use crate::generator::{Generator, Guard, Point};
use crate::io::fmt_f64;
use crate::lattice::{AdaptedProcess, Lattice, Mode, TerminalPayoff};
use crate::scheme::{self, Scheme};

/// Steps at least this wide are processed in parallel.
const PAR_WIDTH: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolutionKind {
    Plain,
    ReflectedLower,
    ReflectedUpper,
    DoublyReflected,
}

/// Sidecar metadata of one solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverMeta {
    pub kind: SolutionKind,
    pub generator: String,
    pub scheme: Scheme,
    pub mode: Mode,
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
    pub guard: Guard,
    pub implicit_iterations_total: usize,
    pub implicit_iterations_max: usize,
}

/// `(Y, Z, K, J)` on a lattice. `K` and `J` are stored as the increments
/// `ΔK_k`, `ΔJ_k` recorded at the step where the reflection acts; `Z` is
/// zero at terminal nodes.
#[derive(Clone, Debug)]
pub struct Solution {
    kind: SolutionKind,
    y: AdaptedProcess,
    z: AdaptedProcess,
    dk: AdaptedProcess,
    dj: AdaptedProcess,
    lower: Option<AdaptedProcess>,
    upper: Option<AdaptedProcess>,
    meta: SolverMeta,
}

impl Solution {
    pub fn kind(&self) -> SolutionKind {
        self.kind
    }

    pub fn lattice(&self) -> &Lattice {
        self.y.lattice()
    }

    pub fn y(&self) -> &AdaptedProcess {
        &self.y
    }

    pub fn z(&self) -> &AdaptedProcess {
        &self.z
    }

    pub fn dk(&self) -> &AdaptedProcess {
        &self.dk
    }

    pub fn dj(&self) -> &AdaptedProcess {
        &self.dj
    }

    pub fn y0(&self) -> f64 {
        self.y.root()
    }

    pub fn lower(&self) -> Option<&AdaptedProcess> {
        self.lower.as_ref()
    }

    pub fn upper(&self) -> Option<&AdaptedProcess> {
        self.upper.as_ref()
    }

    pub fn meta(&self) -> &SolverMeta {
        &self.meta
    }

    pub(crate) fn meta_mut(&mut self) -> &mut SolverMeta {
        &mut self.meta
    }

    /// Node-wise negation, swapping the roles of the two obstacles.
    pub fn negated(&self) -> Solution {
        let kind = match self.kind {
            SolutionKind::ReflectedLower => SolutionKind::ReflectedUpper,
            SolutionKind::ReflectedUpper => SolutionKind::ReflectedLower,
            other => other,
        };
        Solution {
            kind,
            y: self.y.neg(),
            z: self.z.neg(),
            dk: self.dj.clone(),
            dj: self.dk.clone(),
            lower: self.upper.as_ref().map(AdaptedProcess::neg),
            upper: self.lower.as_ref().map(AdaptedProcess::neg),
            meta: SolverMeta {
                kind,
                ..self.meta.clone()
            },
        }
    }

    /// Largest path sums `Σ_k |Y_k - L_k|·ΔK_k` and `Σ_k |U_k - Y_k|·ΔJ_k`.
    pub fn flat_off_residuals(&self) -> (f64, f64) {
        let lat = self.lattice();
        let lower = self.lower.as_ref().map_or(0.0, |l| {
            max_path_sum(lat, |n| (self.y.value(n) - l.value(n)).abs() * self.dk.value(n))
        });
        let upper = self.upper.as_ref().map_or(0.0, |u| {
            max_path_sum(lat, |n| (u.value(n) - self.y.value(n)).abs() * self.dj.value(n))
        });
        (lower, upper)
    }

    /// Writes `k,node,state,Y,Z,dK,dJ`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let lat = self.lattice();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "node", "state", "Y", "Z", "dK", "dJ"])?;
        for node in 0..lat.node_count() {
            let k = lat.step_of(node);
            w.write_record([
                k.to_string(),
                lat.node_label(node),
                fmt_f64(lat.state(node)),
                fmt_f64(self.y.value(node)),
                fmt_f64(self.z.value(node)),
                fmt_f64(self.dk.value(node)),
                fmt_f64(self.dj.value(node)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn meta_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.meta)?)
    }
}

/// Maximum over paths of `Σ_k term(node_k)`.
pub fn max_path_sum(lat: &Lattice, term: impl Fn(usize) -> f64) -> f64 {
    let n = lat.steps();
    let mut best: Vec<f64> = lat.nodes_at(n).map(&term).collect();
    for k in (0..n).rev() {
        best = lat
            .nodes_at(k)
            .enumerate()
            .map(|(i, node)| {
                let (d, u) = lat.local_children(i);
                term(node) + best[d].max(best[u])
            })
            .collect();
    }
    best[0]
}

#[derive(Default)]
pub(crate) struct Raw {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub dk: Vec<f64>,
    pub dj: Vec<f64>,
    pub iterations_total: usize,
    pub iterations_max: usize,
}

/// Backward recursion with optional obstacles and an optional frozen region
/// (nodes where `frozen` is `Some` keep that value).
pub(crate) struct Backward<'a> {
    pub lattice: &'a Lattice,
    pub g: &'a Generator,
    pub scheme: Scheme,
    pub lower: Option<&'a AdaptedProcess>,
    pub upper: Option<&'a AdaptedProcess>,
    pub frozen: Option<&'a [Option<f64>]>,
}

impl Backward<'_> {
    pub fn run(&self, terminal: &[f64]) -> Result<Raw> {
        let lat = self.lattice;
        let n = lat.steps();
        let count = lat.node_count();
        let mut raw = Raw {
            y: vec![0.0; count],
            z: vec![0.0; count],
            dk: vec![0.0; count],
            dj: vec![0.0; count],
            ..Raw::default()
        };
        let term = lat.nodes_at(n);
        if terminal.len() != term.len() {
            return Err(Error::ShapeMismatch {
                expected: term.len(),
                actual: terminal.len(),
            });
        }
        for (node, &v) in term.clone().zip(terminal) {
            raw.y[node] = self.frozen.and_then(|f| f[node]).unwrap_or(v);
        }
        let dt = lat.dt();
        let denom = 2.0 * lat.sqrt_dt();
        for k in (0..n).rev() {
            let t = lat.time(k);
            let next_off = lat.offset(k + 1);
            let off = lat.offset(k);
            let (done, rest) = raw.y.split_at_mut(next_off);
            let next = &rest[..lat.width(k + 1)];
            let cell = |i: usize| -> Result<(f64, f64, f64, f64, usize)> {
                let node = off + i;
                let (d, u) = lat.local_children(i);
                let e = 0.5 * (next[u] + next[d]);
                let z = (next[u] - next[d]) / denom;
                if let Some(v) = self.frozen.and_then(|f| f[node]) {
                    return Ok((v, z, 0.0, 0.0, 0));
                }
                let s = [lat.state(node)];
                let at = Point {
                    t,
                    step: k,
                    node,
                    state: &s,
                };
                let cand = scheme::step(self.g, &at, e, &[z], dt, self.scheme)?;
                let (y, dk, dj) = match (self.lower, self.upper) {
                    (None, None) => (cand.value, 0.0, 0.0),
                    (Some(l), None) => {
                        let (y, dk) = scheme::reflect_lower(cand.value, l.value(node));
                        (y, dk, 0.0)
                    }
                    (None, Some(u)) => {
                        let (y, dj) = scheme::reflect_lower(-cand.value, -u.value(node));
                        (-y, 0.0, dj)
                    }
                    (Some(l), Some(u)) => scheme::reflect_double(cand.value, l.value(node), u.value(node)),
                };
                Ok((y, z, dk, dj, cand.iterations))
            };
            let width = lat.width(k);
            let cells: Vec<(f64, f64, f64, f64, usize)> = if width >= PAR_WIDTH {
                (0..width).into_par_iter().map(cell).collect::<Result<_>>()?
            } else {
                (0..width).map(cell).collect::<Result<_>>()?
            };
            for (i, (y, z, dk, dj, it)) in cells.into_iter().enumerate() {
                let node = off + i;
                done[node] = y;
                raw.z[node] = z;
                raw.dk[node] = dk;
                raw.dj[node] = dj;
                raw.iterations_total += it;
                raw.iterations_max = raw.iterations_max.max(it);
            }
        }
        Ok(raw)
    }
}

pub(crate) fn assemble(
    lattice: &Lattice,
    kind: SolutionKind,
    g: &Generator,
    scheme: Scheme,
    raw: Raw,
    lower: Option<AdaptedProcess>,
    upper: Option<AdaptedProcess>,
) -> Result<Solution> {
    for (node, v) in raw.y.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                node,
                what: "Y".into(),
            });
        }
    }
    let meta = SolverMeta {
        kind,
        generator: g.name().to_string(),
        scheme,
        mode: lattice.mode(),
        horizon: lattice.horizon(),
        steps: lattice.steps(),
        dt: lattice.dt(),
        guard: g.monotone_guard(lattice.dt(), scheme),
        implicit_iterations_total: raw.iterations_total,
        implicit_iterations_max: raw.iterations_max,
    };
    Ok(Solution {
        kind,
        y: AdaptedProcess::from_vec_unchecked(*lattice, raw.y),
        z: AdaptedProcess::from_vec_unchecked(*lattice, raw.z),
        dk: AdaptedProcess::from_vec_unchecked(*lattice, raw.dk),
        dj: AdaptedProcess::from_vec_unchecked(*lattice, raw.dj),
        lower,
        upper,
        meta,
    })
}

/// Solves BSDE(ξ, g): `Y_N = ξ`, `Z_k = (Y_up - Y_down) / (2 sqrt(dt))`,
/// and `Y_k = E_k[Y_{k+1}] + dt·g(t_k, x, ·, Z_k)` with `·` the conditional
/// expectation (explicit) or `Y_k` itself (implicit).
pub fn solve_bsde(lattice: &Lattice, xi: &TerminalPayoff, g: &Generator, scheme: Scheme) -> Result<Solution> {
    xi.check_on(lattice)?;
    g.check_on(lattice)?;
    let raw = Backward {
        lattice,
        g,
        scheme,
        lower: None,
        upper: None,
        frozen: None,
    }
    .run(xi.values())?;
    assemble(lattice, SolutionKind::Plain, g, scheme, raw, None, None)
}

/// Payoff values frozen on the stopped region of `tau`. On the full tree the
/// value at a stopped node is the payoff at the path's stop node.
pub(crate) fn frozen_values(tau: &StoppingRule, payoff: &AdaptedProcess) -> Result<Vec<Option<f64>>> {
    let lat = tau.lattice();
    if lat.is_full_tree() {
        Ok(tau
            .anchors()?
            .into_iter()
            .map(|a| a.map(|n| payoff.value(n)))
            .collect())
    } else {
        Ok((0..lat.node_count())
            .map(|n| tau.is_stopped(n).then(|| payoff.value(n)))
            .collect())
    }
}

/// `E^g_{ν,τ}[payoff_τ]`: solves the BSDE driven by `g` on `{t <= τ}` and
/// frozen at the payoff from `τ` on. The returned process is `Y^{τ}`;
/// its values at the first-stop nodes of `nu` are the evaluation.
pub fn g_evaluate(
    lattice: &Lattice,
    nu: &StoppingRule,
    tau: &StoppingRule,
    payoff: &AdaptedProcess,
    g: &Generator,
    scheme: Scheme,
) -> Result<AdaptedProcess> {
    nu.check_on(lattice)?;
    tau.check_on(lattice)?;
    payoff.check_on(lattice)?;
    if !nu.precedes(tau) {
        return Err(Error::RuleOrder(
            "nu must stop no later than tau on every path".into(),
        ));
    }
    let g = g.stop_generator(tau)?;
    let frozen = frozen_values(tau, payoff)?;
    let terminal: Vec<f64> = lattice.terminal_nodes().map(|n| payoff.value(n)).collect();
    let raw = Backward {
        lattice,
        g: &g,
        scheme,
        lower: None,
        upper: None,
        frozen: Some(&frozen),
    }
    .run(&terminal)?;
    Ok(AdaptedProcess::from_vec_unchecked(*lattice, raw.y))
}

/// Values of `process` at the first-stop nodes of `nu`, as `(node, value)`.
pub fn read_at(nu: &StoppingRule, process: &AdaptedProcess) -> Vec<(usize, f64)> {
    nu.first_stop_nodes()
        .into_iter()
        .map(|n| (n, process.value(n)))
        .collect()
}

/// `ξ = E[ξ] + Σ Z_k ΔB_k`: returns the mean and `Z`.
pub fn martingale_represent(lattice: &Lattice, xi: &TerminalPayoff) -> Result<(f64, AdaptedProcess)> {
    let sol = solve_bsde(lattice, xi, &Generator::zero(), Scheme::Explicit)?;
    Ok((sol.y0(), sol.z))
}

/// Forward reconstruction `mean + Σ_{j<k} Z_j ΔB_j` along the first parent
/// of each node.
pub fn reconstruct(lattice: &Lattice, mean: f64, z: &AdaptedProcess) -> Result<AdaptedProcess> {
    z.check_on(lattice)?;
    let mut v = vec![0.0; lattice.node_count()];
    v[0] = mean;
    for node in 1..lattice.node_count() {
        let p = lattice.parents(node)[0];
        let db = lattice.state(node) - lattice.state(p);
        let sign = if db > 0.0 { 1.0 } else { -1.0 };
        v[node] = v[p] + z.value(p) * sign * lattice.sqrt_dt();
    }
    Ok(AdaptedProcess::from_vec_unchecked(*lattice, v))
}

mod axioms;

pub use axioms::{sample_axiom_cases, verify_evaluation_axioms, Axiom, AxiomCase, AxiomReport, AxiomResult};
