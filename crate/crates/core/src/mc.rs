//! Monte Carlo backend: Euler paths of a d-dimensional Brownian motion and
//! least-squares regression in place of the lattice conditional expectation.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, Point};
use crate::io::fmt_f64;
use crate::scheme::{self, Scheme};

pub const MIN_PATHS: usize = 100;
/// Upper bound on `M·(N+1)·d` stored doubles per array.
pub const MAX_CELLS: usize = 20_000_000;
pub const CONDITION_WARNING: f64 = 1e8;
const CONDITION_FATAL: f64 = 1e12;
/// Paths per partial sum; fixed so reductions do not depend on worker count.
const CHUNK: usize = 2048;
const BOOTSTRAP_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    /// Largest `|mean(ΔB)| / sqrt(dt)` over coordinates.
    pub mean_deviation: f64,
    pub mean_bound: f64,
    /// Largest `|var(ΔB)/dt - 1|` over coordinates.
    pub variance_deviation: f64,
    /// Largest `|cov(ΔB_i, ΔB_j)| / dt` over distinct coordinates.
    pub cross_covariance: f64,
    pub pass: bool,
}

/// `M` paths of `N` Brownian increments in `d` dimensions, path-major.
#[derive(Clone, Debug)]
pub struct PathBundle {
    dim: usize,
    horizon: f64,
    steps: usize,
    paths: usize,
    seed: u64,
    increments: Vec<f64>,
    states: Vec<f64>,
    sanity: SanityReport,
}

/// Simulates `paths` Brownian paths; path `m` draws from its own ChaCha
/// stream so the bundle does not depend on scheduling.
pub fn simulate_paths(dim: usize, horizon: f64, steps: usize, paths: usize, seed: u64) -> Result<PathBundle> {
    if dim == 0 || steps == 0 {
        return Err(Error::InvalidParameter("dimension and step count must be positive".into()));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
    }
    if paths < MIN_PATHS {
        return Err(Error::InvalidParameter(format!("need at least {MIN_PATHS} paths, got {paths}")));
    }
    let cells = paths
        .checked_mul(steps + 1)
        .and_then(|c| c.checked_mul(dim))
        .filter(|&c| c <= MAX_CELLS)
        .ok_or_else(|| Error::SizeGuard(format!("{paths} paths x {steps} steps x {dim} dims exceeds {MAX_CELLS} cells")))?;
    let sqrt_dt = (horizon / steps as f64).sqrt();
    let stride = steps * dim;
    let mut increments = vec![0.0; paths * stride];
    increments
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(m, row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64);
            for v in row.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v = e * sqrt_dt;
            }
        });
    let mut states = vec![0.0; cells];
    states
        .par_chunks_mut((steps + 1) * dim)
        .zip(increments.par_chunks(stride))
        .for_each(|(s, inc)| {
            for k in 0..steps {
                for c in 0..dim {
                    s[(k + 1) * dim + c] = s[k * dim + c] + inc[k * dim + c];
                }
            }
        });
    let sanity = sanity_check(&increments, dim, paths, steps, horizon / steps as f64);
    Ok(PathBundle {
        dim,
        horizon,
        steps,
        paths,
        seed,
        increments,
        states,
        sanity,
    })
}

fn sanity_check(inc: &[f64], dim: usize, paths: usize, steps: usize, dt: f64) -> SanityReport {
    let count = (paths * steps) as f64;
    let sums: Vec<(Vec<f64>, Vec<f64>)> = inc
        .par_chunks(CHUNK * dim)
        .map(|chunk| {
            let mut s = vec![0.0; dim];
            let mut q = vec![0.0; dim * dim];
            for x in chunk.chunks(dim) {
                for i in 0..dim {
                    s[i] += x[i];
                    for j in 0..dim {
                        q[i * dim + j] += x[i] * x[j];
                    }
                }
            }
            (s, q)
        })
        .collect();
    let mut s = vec![0.0; dim];
    let mut q = vec![0.0; dim * dim];
    for (a, b) in &sums {
        s.iter_mut().zip(a).for_each(|(x, y)| *x += y);
        q.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
    let mean: Vec<f64> = s.iter().map(|v| v / count).collect();
    let cov = |i: usize, j: usize| q[i * dim + j] / count - mean[i] * mean[j];
    let mean_deviation = mean.iter().map(|m| m.abs() / dt.sqrt()).fold(0.0, f64::max);
    let variance_deviation = (0..dim).map(|i| (cov(i, i) / dt - 1.0).abs()).fold(0.0, f64::max);
    let mut cross_covariance = 0.0f64;
    for i in 0..dim {
        for j in i + 1..dim {
            cross_covariance = cross_covariance.max(cov(i, j).abs() / dt);
        }
    }
    let mean_bound = 3.0 / (paths as f64).sqrt();
    SanityReport {
        mean_deviation,
        mean_bound,
        variance_deviation,
        cross_covariance,
        pass: mean_deviation <= mean_bound && variance_deviation <= 0.1 && cross_covariance <= mean_bound,
    }
}

impl PathBundle {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    pub fn sanity(&self) -> &SanityReport {
        &self.sanity
    }

    /// `B_{t_k}` on path `m`.
    pub fn state(&self, m: usize, k: usize) -> &[f64] {
        let at = (m * (self.steps + 1) + k) * self.dim;
        &self.states[at..at + self.dim]
    }

    /// `B_{t_{k+1}} - B_{t_k}` on path `m`.
    pub fn increment(&self, m: usize, k: usize) -> &[f64] {
        let at = (m * self.steps + k) * self.dim;
        &self.increments[at..at + self.dim]
    }

    /// Writes `path,k,t,x0..x{d-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string(), "k".into(), "t".into()];
        header.extend((0..self.dim).map(|c| format!("x{c}")));
        w.write_record(&header)?;
        for m in 0..self.paths {
            for k in 0..=self.steps {
                let mut rec = vec![m.to_string(), k.to_string(), fmt_f64(self.time(k))];
                rec.extend(self.state(m, k).iter().map(|&x| fmt_f64(x)));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum RegressionBasis {
    /// Monomials of total degree `<= degree` in `B_t / sqrt(t)`.
    Polynomial { degree: usize },
    /// One-hot bins of `B_t / sqrt(t)` on `[-3, 3]`, outer bins open (d = 1).
    IndicatorBins { bins: usize },
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis::Polynomial { degree: 3 }
    }
}

impl RegressionBasis {
    fn validate(&self, dim: usize) -> Result<()> {
        match *self {
            RegressionBasis::Polynomial { degree } if degree > 8 => {
                Err(Error::InvalidParameter(format!("polynomial degree {degree} above 8")))
            }
            RegressionBasis::IndicatorBins { bins: 0 } => {
                Err(Error::InvalidParameter("indicator basis needs at least one bin".into()))
            }
            RegressionBasis::IndicatorBins { .. } if dim != 1 => {
                Err(Error::UnsupportedMode("indicator bins are one-dimensional".into()))
            }
            _ => Ok(()),
        }
    }

    /// Exponent vectors of the polynomial family, graded by total degree.
    fn exponents(degree: usize, dim: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![0; dim]];
        for total in 1..=degree {
            let mut current = vec![0; dim];
            fill(&mut out, &mut current, 0, total);
        }
        fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, i: usize, left: usize) {
            if i + 1 == cur.len() {
                cur[i] = left;
                out.push(cur.clone());
                return;
            }
            for e in (0..=left).rev() {
                cur[i] = e;
                fill(out, cur, i + 1, left - e);
            }
            cur[i] = 0;
        }
        out
    }

    pub fn len(&self, dim: usize) -> usize {
        match *self {
            RegressionBasis::Polynomial { degree } => Self::exponents(degree, dim).len(),
            RegressionBasis::IndicatorBins { bins } => bins,
        }
    }

    pub fn is_empty(&self, dim: usize) -> bool {
        self.len(dim) == 0
    }
}

struct Features {
    basis: RegressionBasis,
    dim: usize,
    degree: usize,
    /// Flattened exponent vectors, `dim` entries per basis function.
    exponents: Vec<usize>,
}

impl Features {
    fn new(basis: RegressionBasis, dim: usize) -> Self {
        let (degree, exponents) = match basis {
            RegressionBasis::Polynomial { degree } => (degree, RegressionBasis::exponents(degree, dim).concat()),
            RegressionBasis::IndicatorBins { .. } => (0, Vec::new()),
        };
        Self {
            basis,
            dim,
            degree,
            exponents,
        }
    }

    fn len(&self) -> usize {
        match self.basis {
            RegressionBasis::Polynomial { .. } => self.exponents.len() / self.dim,
            RegressionBasis::IndicatorBins { bins } => bins,
        }
    }

    /// Basis values at `u`; `powers` is scratch of length `dim·(degree+1)`.
    fn eval(&self, u: &[f64], powers: &mut [f64], out: &mut [f64]) {
        match self.basis {
            RegressionBasis::Polynomial { .. } => {
                let stride = self.degree + 1;
                for (c, &x) in u.iter().enumerate() {
                    let row = &mut powers[c * stride..(c + 1) * stride];
                    row[0] = 1.0;
                    for e in 1..stride {
                        row[e] = row[e - 1] * x;
                    }
                }
                for (o, e) in out.iter_mut().zip(self.exponents.chunks(self.dim)) {
                    *o = e.iter().enumerate().map(|(c, &p)| powers[c * stride + p]).product();
                }
            }
            RegressionBasis::IndicatorBins { bins } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let pos = ((u[0] + 3.0) / 6.0 * bins as f64).floor();
                let b = if pos.is_nan() { 0 } else { pos.clamp(0.0, (bins - 1) as f64) as usize };
                out[b] = 1.0;
            }
        }
    }

    fn scratch(&self) -> Vec<f64> {
        vec![0.0; self.dim * (self.degree + 1)]
    }
}

/// Function of `(t, state)`.
pub type StateFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Terminal value and optional obstacles as functions of `(t, B_t)`.
#[derive(Clone)]
pub struct McProblem {
    pub terminal: StateFn,
    pub lower: Option<StateFn>,
    pub upper: Option<StateFn>,
}

impl McProblem {
    pub fn plain(terminal: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            terminal: Arc::new(terminal),
            lower: None,
            upper: None,
        }
    }

    pub fn with_lower(mut self, f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.lower = Some(Arc::new(f));
        self
    }

    pub fn with_upper(mut self, f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.upper = Some(Arc::new(f));
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub basis: RegressionBasis,
    pub scheme: Scheme,
    /// Penalty intensity applied before the clamp; `None` clamps only.
    pub penalty: Option<f64>,
    pub bootstrap: usize,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            basis: RegressionBasis::default(),
            scheme: Scheme::Explicit,
            penalty: None,
            bootstrap: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McStep {
    pub k: usize,
    pub t: f64,
    pub mean_y: f64,
    pub sd_y: f64,
    pub condition: f64,
    pub mean_dk: f64,
    pub mean_dj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSolution {
    pub y0: f64,
    pub standard_error: f64,
    pub z0: Vec<f64>,
    pub paths: usize,
    pub steps: usize,
    pub dim: usize,
    pub seed: u64,
    pub generator: String,
    pub options: McOptions,
    pub max_condition: f64,
    pub warnings: Vec<String>,
    /// Largest per-path `Σ (Y - L) ΔK` and `Σ (U - Y) ΔJ`.
    pub flat_off_lower: f64,
    pub flat_off_upper: f64,
    /// Path-nodes with `Y` outside `[L, U]` after the clamp.
    pub obstacle_violations: usize,
    pub sanity: SanityReport,
    pub per_step: Vec<McStep>,
}

impl McSolution {
    /// Writes `k,t,mean_Y,sd_Y,condition,mean_dK,mean_dJ`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "t", "mean_Y", "sd_Y", "condition", "mean_dK", "mean_dJ"])?;
        for s in &self.per_step {
            w.write_record([
                s.k.to_string(),
                fmt_f64(s.t),
                fmt_f64(s.mean_y),
                fmt_f64(s.sd_y),
                fmt_f64(s.condition),
                fmt_f64(s.mean_dk),
                fmt_f64(s.mean_dj),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Fit {
    /// Fitted `E[Y_{k+1}]` and `E[Y_{k+1} ΔB / dt]` per path, `1 + d` columns.
    values: Vec<f64>,
    condition: f64,
}

/// Least-squares projection of `y` and `y·ΔB/dt` onto the basis at step `k`.
fn regress(bundle: &PathBundle, feats: &Features, k: usize, y: &[f64]) -> Result<Fit> {
    let d = bundle.dim;
    let cols = 1 + d;
    let inv_dt = 1.0 / bundle.dt();
    let p = if k == 0 { 1 } else { feats.len() };
    let scale = if k == 0 { 1.0 } else { 1.0 / bundle.time(k).sqrt() };

    let mut phi = vec![1.0; bundle.paths * p];
    if k > 0 {
        phi.par_chunks_mut(CHUNK * p).enumerate().for_each(|(chunk, block)| {
            let mut u = vec![0.0; d];
            let mut pw = feats.scratch();
            for (i, row) in block.chunks_mut(p).enumerate() {
                let x = bundle.state(chunk * CHUNK + i, k);
                if d == 1 && matches!(feats.basis, RegressionBasis::Polynomial { .. }) {
                    let v = x[0] * scale;
                    for e in 1..p {
                        row[e] = row[e - 1] * v;
                    }
                } else {
                    for (ui, xi) in u.iter_mut().zip(x) {
                        *ui = xi * scale;
                    }
                    feats.eval(&u, &mut pw, row);
                }
            }
        });
    }

    let partial: Vec<(Vec<f64>, Vec<f64>)> = phi
        .par_chunks(CHUNK * p)
        .enumerate()
        .map(|(chunk, block)| {
            let mut gram = vec![0.0; p * p];
            let mut rhs = vec![0.0; p * cols];
            let mut tv = vec![0.0; cols];
            for (i, f) in block.chunks_exact(p).enumerate() {
                let m = chunk * CHUNK + i;
                tv[0] = y[m];
                for (t, db) in tv[1..].iter_mut().zip(bundle.increment(m, k)) {
                    *t = y[m] * db * inv_dt;
                }
                for ((a, &fa), (grow, rrow)) in f
                    .iter()
                    .enumerate()
                    .zip(gram.chunks_exact_mut(p).zip(rhs.chunks_exact_mut(cols)))
                {
                    for (gv, fb) in grow[a..].iter_mut().zip(&f[a..]) {
                        *gv += fa * fb;
                    }
                    for (r, t) in rrow.iter_mut().zip(&tv) {
                        *r += fa * t;
                    }
                }
            }
            (gram, rhs)
        })
        .collect();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, cols);
    for (g, r) in &partial {
        for a in 0..p {
            for b in a..p {
                gram[(a, b)] += g[a * p + b];
            }
            for c in 0..cols {
                rhs[(a, c)] += r[a * cols + c];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if lo > 0.0 { (hi / lo).sqrt() } else { f64::INFINITY };
    if !(condition.is_finite() && condition <= CONDITION_FATAL) {
        return Err(Error::SingularRegression {
            step: k,
            detail: format!("{p} basis functions, Gram eigenvalues in [{lo:.3e}, {hi:.3e}], condition {condition:.3e}"),
        });
    }
    let beta = gram
        .cholesky()
        .ok_or_else(|| Error::SingularRegression {
            step: k,
            detail: "Gram matrix is not positive definite".into(),
        })?
        .solve(&rhs);
    let beta: Vec<f64> = (0..p).flat_map(|a| (0..cols).map(move |c| (a, c))).map(|ac| beta[ac]).collect();
    let mut values = vec![0.0; bundle.paths * cols];
    values
        .par_chunks_mut(CHUNK * cols)
        .zip(phi.par_chunks(CHUNK * p))
        .for_each(|(out, rows)| {
            for (o, f) in out.chunks_exact_mut(cols).zip(rows.chunks_exact(p)) {
                for (fa, brow) in f.iter().zip(beta.chunks_exact(cols)) {
                    for (oc, bc) in o.iter_mut().zip(brow) {
                        *oc += fa * bc;
                    }
                }
            }
        });
    Ok(Fit { values, condition })
}

/// `y = a + dt·n·(L - y)⁺ - dt·n·(y - U)⁺` in closed form (`L < U`).
fn penalize(a: f64, l: Option<f64>, u: Option<f64>, n: f64, dt: f64) -> f64 {
    let w = dt * n;
    match (l, u) {
        (Some(l), _) if a < l => (a + w * l) / (1.0 + w),
        (_, Some(u)) if a > u => (a + w * u) / (1.0 + w),
        _ => a,
    }
}

struct Node {
    y: f64,
    dk: f64,
    dj: f64,
    /// `(Y - L)·ΔK` and `(U - Y)·ΔJ`.
    flat_lo: f64,
    flat_up: f64,
    outside: bool,
}

#[allow(clippy::too_many_arguments)]
fn update(
    g: &Generator,
    opts: &McOptions,
    problem: &McProblem,
    t: f64,
    k: usize,
    m: usize,
    state: &[f64],
    e: f64,
    z: &[f64],
    dt: f64,
) -> Result<Node> {
    let at = Point { t, step: k, node: m, state };
    let raw = scheme::step(g, &at, e, z, dt, opts.scheme)?.value;
    let l = problem.lower.as_ref().map(|f| f(t, state));
    let u = problem.upper.as_ref().map(|f| f(t, state));
    if let (Some(l), Some(u)) = (l, u) {
        if !(l < u) {
            return Err(Error::Separation {
                node: m,
                step: k,
                state: state[0],
                lower: l,
                upper: u,
            });
        }
    }
    let pen = opts.penalty.map_or(raw, |n| penalize(raw, l, u, n, dt));
    let mut y = pen;
    let (mut dk, mut dj) = (0.0, 0.0);
    if let Some(l) = l {
        if y < l {
            dk = l - y;
            y = l;
        }
    }
    if let Some(u) = u {
        if y > u {
            dj = y - u;
            y = u;
        }
    }
    if !y.is_finite() {
        return Err(Error::NonFinite {
            node: m,
            what: format!("Y at step {k}"),
        });
    }
    Ok(Node {
        y,
        dk,
        dj,
        flat_lo: l.map_or(0.0, |l| (y - l) * dk),
        flat_up: u.map_or(0.0, |u| (u - y) * dj),
        outside: l.is_some_and(|l| y < l) || u.is_some_and(|u| y > u),
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let sums: Vec<(f64, f64)> = v
        .par_chunks(CHUNK)
        .map(|c| (c.iter().sum::<f64>(), c.iter().map(|x| x * x).sum::<f64>()))
        .collect();
    let (s, q) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = v.len() as f64;
    let mean = s / n;
    (mean, (q / n - mean * mean).max(0.0).sqrt())
}

/// Backward regression scheme: project, step with `g`, penalize, clamp.
/// The standard error is a path bootstrap of the whole backward pass.
pub fn solve_mc(bundle: &PathBundle, problem: &McProblem, g: &Generator, options: McOptions) -> Result<McSolution> {
    options.basis.validate(bundle.dim)?;
    if g.lattice().is_some() {
        return Err(Error::UnsupportedMode(
            "lattice-bound generator terms cannot be evaluated on simulated paths".into(),
        ));
    }
    if let Some(n) = options.penalty {
        if !(n.is_finite() && n >= 0.0) {
            return Err(Error::InvalidParameter(format!("penalty must be non-negative, got {n}")));
        }
    }
    if options.bootstrap < 2 {
        return Err(Error::InvalidParameter("bootstrap needs at least 2 replicates".into()));
    }
    let mut out = backward(bundle, problem, g, &options)?;
    out.standard_error = bootstrap(bundle, problem, g, &options)?;
    Ok(out)
}

fn backward(bundle: &PathBundle, problem: &McProblem, g: &Generator, options: &McOptions) -> Result<McSolution> {
    let options = *options;
    let feats = Features::new(options.basis, bundle.dim);
    let d = bundle.dim;
    let n = bundle.steps;
    let dt = bundle.dt();
    let big_t = bundle.horizon;
    let mut y: Vec<f64> = (0..bundle.paths)
        .into_par_iter()
        .map(|m| (problem.terminal)(big_t, bundle.state(m, n)))
        .collect();
    if let Some(m) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            node: m,
            what: "terminal value".into(),
        });
    }
    let mut flat_lo = vec![0.0; bundle.paths];
    let mut flat_up = vec![0.0; bundle.paths];
    let mut per_step = Vec::with_capacity(n + 1);
    let (mean_t, sd_t) = mean_sd(&y);
    per_step.push(McStep {
        k: n,
        t: big_t,
        mean_y: mean_t,
        sd_y: sd_t,
        condition: 1.0,
        mean_dk: 0.0,
        mean_dj: 0.0,
    });
    let mut warnings = Vec::new();
    let mut max_condition = 1.0f64;
    let mut violations = 0;
    let mut z0 = vec![0.0; d];

    for k in (0..n).rev() {
        let fit = regress(bundle, &feats, k, &y)?;
        max_condition = max_condition.max(fit.condition);
        if fit.condition > CONDITION_WARNING {
            warnings.push(format!("step {k}: regression condition number {:.3e} above {CONDITION_WARNING:e}", fit.condition));
        }
        let t = bundle.time(k);
        let nodes: Vec<Node> = if k == 0 {
            // every path starts at the origin: one scalar update
            let e = fit.values[0];
            let z = &fit.values[1..1 + d];
            z0.copy_from_slice(z);
            let root = update(g, &options, problem, t, 0, 0, bundle.state(0, 0), e, z, dt)?;
            (0..bundle.paths).map(|_| Node { ..root }).collect()
        } else {
            (0..bundle.paths)
                .into_par_iter()
                .map(|m| {
                    let v = &fit.values[m * (1 + d)..(m + 1) * (1 + d)];
                    update(g, &options, problem, t, k, m, bundle.state(m, k), v[0], &v[1..], dt)
                })
                .collect::<Result<_>>()?
        };
        for (m, node) in nodes.iter().enumerate() {
            flat_lo[m] += node.flat_lo;
            flat_up[m] += node.flat_up;
            violations += usize::from(node.outside);
        }
        let y_new: Vec<f64> = nodes.iter().map(|nd| nd.y).collect();
        let (mean_y, sd_y) = mean_sd(&y_new);
        let count = bundle.paths as f64;
        per_step.push(McStep {
            k,
            t,
            mean_y,
            sd_y,
            condition: fit.condition,
            mean_dk: nodes.iter().map(|nd| nd.dk).sum::<f64>() / count,
            mean_dj: nodes.iter().map(|nd| nd.dj).sum::<f64>() / count,
        });
        if k == 0 {
            let y0 = y_new[0];
            per_step.reverse();
            return Ok(McSolution {
                y0,
                standard_error: f64::NAN,
                z0,
                paths: bundle.paths,
                steps: n,
                dim: d,
                seed: bundle.seed,
                generator: g.name().to_string(),
                options,
                max_condition,
                warnings,
                flat_off_lower: flat_lo.iter().fold(0.0, |a, v| a.max(v.abs())),
                flat_off_upper: flat_up.iter().fold(0.0, |a, v| a.max(v.abs())),
                obstacle_violations: violations,
                sanity: bundle.sanity.clone(),
                per_step,
            });
        }
        y = y_new;
    }
    unreachable!("the loop returns at k = 0")
}

impl PathBundle {
    /// Bundle made of paths `rows` of `self`, in that order.
    fn resample(&self, rows: &[usize]) -> PathBundle {
        let (n, d) = (self.steps, self.dim);
        let mut increments = Vec::with_capacity(rows.len() * n * d);
        let mut states = Vec::with_capacity(rows.len() * (n + 1) * d);
        for &m in rows {
            increments.extend_from_slice(&self.increments[m * n * d..(m + 1) * n * d]);
            states.extend_from_slice(&self.states[m * (n + 1) * d..(m + 1) * (n + 1) * d]);
        }
        PathBundle {
            paths: rows.len(),
            increments,
            states,
            sanity: self.sanity.clone(),
            ..*self
        }
    }
}

/// Standard deviation of `Y_0` over full backward passes on path resamples.
fn bootstrap(bundle: &PathBundle, problem: &McProblem, g: &Generator, opts: &McOptions) -> Result<f64> {
    let m_paths = bundle.paths;
    let reps: Vec<f64> = (0..opts.bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(bundle.seed ^ 0x9e37_79b9_7f4a_7c15);
            rng.set_stream(BOOTSTRAP_STREAM - b as u64);
            let rows: Vec<usize> = (0..m_paths).map(|_| rng.random_range(0..m_paths)).collect();
            backward(&bundle.resample(&rows), problem, g, opts).map(|s| s.y0)
        })
        .collect::<Result<_>>()?;
    let (_, sd) = mean_sd(&reps);
    let n = reps.len() as f64;
    Ok(sd * (n / (n - 1.0)).sqrt())
}
