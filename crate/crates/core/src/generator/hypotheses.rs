//! Sampled falsification of the standing hypotheses (H1)–(H5).
//!
//! A `Pass` verdict only means no counterexample was found among the
//! sampled tuples. (H3), continuity in `y`, is replaced by a bounded
//! finite-difference surrogate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Generator, Point};
use crate::error::{Error, Result};

/// Relative floating-point slack applied to every inequality.
const SLACK: f64 = 1e-12;
/// Relative step of the (H3) finite difference.
const H3_STEP: f64 = 1e-9;
/// Allowed jump of `g` over one (H3) step, relative to `1 + |g|`.
const H3_JUMP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingBox {
    pub t: (f64, f64),
    pub state: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl SamplingBox {
    /// `[0, t_max] × [-r, r]^4`.
    pub fn symmetric(t_max: f64, r: f64) -> Self {
        Self {
            t: (0.0, t_max),
            state: (-r, r),
            y: (-r, r),
            z: (-r, r),
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("t", self.t), ("state", self.state), ("y", self.y), ("z", self.z)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidParameter(format!(
                    "sampling range for {name} must be a finite interval, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hypothesis {
    H1,
    H2,
    H3,
    H4,
    H5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    CounterexampleFound,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTuple {
    pub t: f64,
    pub node: Option<usize>,
    pub state: f64,
    pub y: f64,
    pub y2: f64,
    pub z: f64,
    pub z2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisEntry {
    pub hypothesis: Hypothesis,
    pub verdict: Verdict,
    /// Largest `lhs / rhs` over samples with `rhs > 0`.
    pub worst_ratio: Option<f64>,
    /// Largest `lhs - rhs`.
    pub worst_excess: f64,
    pub violations: usize,
    pub counterexample: Option<SampleTuple>,
}

impl HypothesisEntry {
    fn new(hypothesis: Hypothesis) -> Self {
        Self {
            hypothesis,
            verdict: Verdict::Pass,
            worst_ratio: None,
            worst_excess: f64::NEG_INFINITY,
            violations: 0,
            counterexample: None,
        }
    }

    fn record(&mut self, lhs: f64, rhs: f64, sample: &SampleTuple) {
        let excess = lhs - rhs;
        if rhs > 0.0 {
            let r = lhs / rhs;
            self.worst_ratio = Some(self.worst_ratio.map_or(r, |w| w.max(r)));
        }
        if excess > self.worst_excess || excess.is_nan() {
            self.worst_excess = excess;
        }
        let ok = lhs.is_finite() && lhs <= rhs + SLACK * (1.0 + lhs.abs() + rhs.abs());
        if !ok {
            self.violations += 1;
            if self.counterexample.is_none() {
                self.counterexample = Some(*sample);
            }
            self.verdict = Verdict::CounterexampleFound;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub generator: String,
    pub samples: usize,
    pub seed: u64,
    pub entries: Vec<HypothesisEntry>,
}

impl HypothesisReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.verdict == Verdict::Pass)
    }

    pub fn entry(&self, h: Hypothesis) -> &HypothesisEntry {
        self.entries
            .iter()
            .find(|e| e.hypothesis == h)
            .expect("every hypothesis has an entry")
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Samples `sample_count` tuples from `sampling` and tests the declared
/// constants of `g` (penalty terms included) against (H1)–(H5).
///
/// Drivers tied to a lattice are sampled at lattice nodes: `t` and `state`
/// then come from a uniformly drawn node instead of the box.
pub fn check_hypotheses(
    g: &Generator,
    sample_count: usize,
    sampling: &SamplingBox,
    seed: u64,
) -> Result<HypothesisReport> {
    if sample_count == 0 {
        return Err(Error::InvalidParameter("sample_count must be at least 1".into()));
    }
    sampling.validate()?;
    let c = g.effective_constants();
    let lattice = g.lattice();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries: Vec<HypothesisEntry> = [
        Hypothesis::H1,
        Hypothesis::H2,
        Hypothesis::H3,
        Hypothesis::H4,
        Hypothesis::H5,
    ]
    .into_iter()
    .map(HypothesisEntry::new)
    .collect();

    for _ in 0..sample_count {
        let (t, step, node, state) = match &lattice {
            Some(lat) => {
                let node = rng.random_range(0..lat.node_count());
                let k = lat.step_of(node);
                (lat.time(k), k, Some(node), lat.state(node))
            }
            None => (uniform(&mut rng, sampling.t), 0, None, uniform(&mut rng, sampling.state)),
        };
        let sample = SampleTuple {
            t,
            node,
            state,
            y: uniform(&mut rng, sampling.y),
            y2: uniform(&mut rng, sampling.y),
            z: uniform(&mut rng, sampling.z),
            z2: uniform(&mut rng, sampling.z),
        };
        let s = [state];
        let at = Point {
            t,
            step,
            node: node.unwrap_or(0),
            state: &s,
        };
        let ev = |y: f64, z: f64| g.eval(&at, y, &[z]);
        let h = c.h.at(at.node);
        let SampleTuple { y, y2, z, z2, .. } = sample;

        let g_yz = ev(y, z);
        entries[0].record((g_yz - ev(y, z2)).abs(), c.kappa * (z - z2).abs(), &sample);

        let sgn = if y > y2 { 1.0 } else if y < y2 { -1.0 } else { 0.0 };
        entries[1].record(sgn * (g_yz - ev(y2, z)), c.lambda * (y - y2).abs(), &sample);

        let delta = H3_STEP * (1.0 + y.abs());
        entries[2].record((ev(y + delta, z) - g_yz).abs(), H3_JUMP * (1.0 + g_yz.abs()), &sample);

        let g_y0 = ev(y, 0.0);
        entries[3].record(g_y0.abs(), h + c.kappa * y.abs(), &sample);

        entries[4].record(
            (g_yz - g_y0).abs(),
            c.kappa * (h + y.abs() + z.abs()).powf(c.alpha),
            &sample,
        );
    }

    Ok(HypothesisReport {
        generator: g.name().to_string(),
        samples: sample_count,
        seed,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Constants, Traits};

    #[test]
    fn damped_sine_passes_everything() {
        let mut c = Constants::new(1.0, -1.0, 0.5, 1.0);
        c.y_lipschitz = Some(1.0);
        let g = Generator::new("-y+sin z", |_, y, z| -y + z[0].sin(), c, Traits::default()).unwrap();
        let r = check_hypotheses(&g, 5000, &SamplingBox::symmetric(1.0, 3.0), 7).unwrap();
        assert!(r.all_pass(), "{r:?}");
    }

    #[test]
    fn linear_z_breaks_sublinear_growth() {
        let g = Generator::new(
            "z",
            |_, _, z| z[0],
            Constants::new(1.0, 0.0, 0.5, 1.0),
            Traits::default(),
        )
        .unwrap();
        let r = check_hypotheses(&g, 2000, &SamplingBox::symmetric(1.0, 3.0), 1).unwrap();
        let h5 = r.entry(Hypothesis::H5);
        assert_eq!(h5.verdict, Verdict::CounterexampleFound);
        let ce = h5.counterexample.unwrap();
        assert!(ce.z.abs() > (1.0 + ce.y.abs() + ce.z.abs()).sqrt());
        assert_eq!(r.entry(Hypothesis::H1).verdict, Verdict::Pass);
    }

    #[test]
    fn zero_driver_passes_any_constants() {
        for (k, l, a, h) in [(0.0, 0.0, 0.5, 0.0), (3.0, 2.0, 0.1, 5.0), (0.1, 1.0, 0.9, 0.0)] {
            let g = Generator::zero().with_constants(Constants::new(k, l, a, h)).unwrap();
            let r = check_hypotheses(&g, 500, &SamplingBox::symmetric(1.0, 10.0), 3).unwrap();
            assert!(r.all_pass());
        }
    }

    #[test]
    fn understated_lambda_is_caught() {
        let g = Generator::linear(2.0, 0.0)
            .with_constants(Constants::new(2.0, 1.0, 0.5, 0.0))
            .unwrap();
        let r = check_hypotheses(&g, 200, &SamplingBox::symmetric(1.0, 3.0), 5).unwrap();
        assert_eq!(r.entry(Hypothesis::H2).verdict, Verdict::CounterexampleFound);
    }

    #[test]
    fn discontinuity_trips_the_surrogate() {
        let g = Generator::new(
            "step",
            |_, y, _| if y.fract().abs() < 0.5 { 0.0 } else { 1.0 },
            Constants::new(1.0, 100.0, 0.5, 1.0),
            Traits::default(),
        )
        .unwrap();
        let r = check_hypotheses(&g, 1, &SamplingBox { t: (0.0, 0.0), state: (0.0, 0.0), y: (0.5 - 1e-10, 0.5 - 1e-10), z: (0.0, 0.0) }, 0).unwrap();
        assert_eq!(r.entry(Hypothesis::H3).verdict, Verdict::CounterexampleFound);
    }

    #[test]
    fn reports_are_seed_deterministic() {
        let g = Generator::sine(-1.0, 0.5);
        let b = SamplingBox::symmetric(1.0, 2.0);
        assert_eq!(check_hypotheses(&g, 100, &b, 9).unwrap(), check_hypotheses(&g, 100, &b, 9).unwrap());
        assert!(check_hypotheses(&g, 0, &b, 9).is_err());
    }
}
