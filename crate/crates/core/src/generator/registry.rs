//! Named built-in drivers and tabulated drivers read from disk.
//!
//! Names: `zero`, `constant:c`, `linear:a,b` (`a·y + b·z`), `sine:a,b`
//! (`a·y + b·sin z`), `abs-z:k` (`k·|z|`) and `driver-file:<path>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Constants, Generator, Traits};
use crate::error::{Error, Result};

fn numbers(name: &str, args: &str, count: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = args
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("generator '{name}': cannot parse '{s}' as a number")))
        })
        .collect::<Result<_>>()?;
    if v.len() != count || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Parse(format!(
            "generator '{name}' expects {count} finite parameter(s), got '{args}'"
        )));
    }
    Ok(v)
}

/// Resolves a registry name. Relative `driver-file` paths are taken
/// relative to `base_dir` when given.
pub fn resolve(name: &str, base_dir: Option<&Path>) -> Result<Generator> {
    let (head, args) = match name.split_once(':') {
        Some((h, a)) => (h.trim(), Some(a)),
        None => (name.trim(), None),
    };
    match (head, args) {
        ("zero", None) => Ok(Generator::zero()),
        ("constant", Some(a)) => Ok(Generator::constant(numbers(name, a, 1)?[0])),
        ("linear", Some(a)) => {
            let v = numbers(name, a, 2)?;
            Ok(Generator::linear(v[0], v[1]))
        }
        ("sine", Some(a)) => {
            let v = numbers(name, a, 2)?;
            Ok(Generator::sine(v[0], v[1]))
        }
        ("abs-z", Some(a)) => Ok(Generator::abs_z(numbers(name, a, 1)?[0])),
        ("driver-file", Some(p)) => {
            let p = Path::new(p.trim());
            let path = match base_dir {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p.to_path_buf(),
            };
            TabulatedDriver::load(&path)?.into_generator(name)
        }
        _ => Err(Error::Parse(format!("unknown generator '{name}'"))),
    }
}

/// `g` sampled on a rectangular `(t, state, y, z)` grid, interpolated
/// multilinearly and held constant outside the grid. `values` is row-major
/// with `z` varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabulatedDriver {
    pub t: Vec<f64>,
    pub state: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub values: Vec<f64>,
}

fn locate(axis: &[f64], x: f64) -> (usize, f64) {
    if axis.len() == 1 || x <= axis[0] {
        return (0, 0.0);
    }
    let last = axis.len() - 1;
    if x >= axis[last] {
        return (last - 1, 1.0);
    }
    let i = axis.partition_point(|&a| a <= x) - 1;
    (i, (x - axis[i]) / (axis[i + 1] - axis[i]))
}

impl TabulatedDriver {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let table: TabulatedDriver = serde_json::from_str(&text)?;
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [("t", &self.t), ("state", &self.state), ("y", &self.y), ("z", &self.z)] {
            if axis.is_empty() {
                return Err(Error::InvalidParameter(format!("driver table axis '{name}' is empty")));
            }
            if axis.windows(2).any(|w| !(w[0] < w[1])) || axis.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "driver table axis '{name}' must be finite and strictly increasing"
                )));
            }
        }
        let expected = self.t.len() * self.state.len() * self.y.len() * self.z.len();
        if self.values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.values.len(),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("driver table contains non-finite values".into()));
        }
        Ok(())
    }

    fn at(&self, i: [usize; 4]) -> f64 {
        let idx = ((i[0] * self.state.len() + i[1]) * self.y.len() + i[2]) * self.z.len() + i[3];
        self.values[idx]
    }

    pub fn interpolate(&self, t: f64, state: f64, y: f64, z: f64) -> f64 {
        let loc = [
            locate(&self.t, t),
            locate(&self.state, state),
            locate(&self.y, y),
            locate(&self.z, z),
        ];
        let lens = [self.t.len(), self.state.len(), self.y.len(), self.z.len()];
        let mut acc = 0.0;
        for corner in 0..16usize {
            let mut w = 1.0;
            let mut idx = [0usize; 4];
            for a in 0..4 {
                let upper = corner >> a & 1 == 1;
                let (i, f) = loc[a];
                if lens[a] == 1 {
                    if upper {
                        w = 0.0;
                    }
                    idx[a] = 0;
                    continue;
                }
                idx[a] = i + upper as usize;
                w *= if upper { f } else { 1.0 - f };
            }
            if w != 0.0 {
                acc += w * self.at(idx);
            }
        }
        acc
    }

    /// Constants read off the grid: κ is the largest z- or y-slope between
    /// neighbouring grid points, λ the largest signed y-slope, `h` the
    /// largest `|g|` at the `z` grid point nearest zero.
    pub fn derived_constants(&self) -> Constants {
        let mut kz: f64 = 0.0;
        let mut ky_abs: f64 = 0.0;
        let mut ky_max = f64::NEG_INFINITY;
        let mut h: f64 = 0.0;
        let z0 = (0..self.z.len())
            .min_by(|&a, &b| self.z[a].abs().total_cmp(&self.z[b].abs()))
            .unwrap_or(0);
        for a in 0..self.t.len() {
            for b in 0..self.state.len() {
                for c in 0..self.y.len() {
                    h = h.max(self.at([a, b, c, z0]).abs());
                    for d in 0..self.z.len() {
                        let v = self.at([a, b, c, d]);
                        if d + 1 < self.z.len() {
                            let s = (self.at([a, b, c, d + 1]) - v) / (self.z[d + 1] - self.z[d]);
                            kz = kz.max(s.abs());
                        }
                        if c + 1 < self.y.len() {
                            let s = (self.at([a, b, c + 1, d]) - v) / (self.y[c + 1] - self.y[c]);
                            ky_abs = ky_abs.max(s.abs());
                            ky_max = ky_max.max(s);
                        }
                    }
                }
            }
        }
        let lambda = if ky_max.is_finite() { ky_max } else { 0.0 };
        Constants::new(kz.max(ky_abs), lambda, 0.5, h).with_y_lipschitz(ky_abs)
    }

    pub fn into_generator(self, name: &str) -> Result<Generator> {
        self.validate()?;
        let constants = self.derived_constants();
        let traits = Traits {
            y_independent: self.y.len() == 1,
            zero_at_zero_z: false,
            zero_at_origin: false,
        };
        Generator::new(
            name,
            move |at, y, z| self.interpolate(at.t, at.state[0], y, z[0]),
            constants,
            traits,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(g: &Generator, y: f64, z: f64) -> f64 {
        g.eval_scalar(0.0, 0, 0, 0.0, y, z)
    }

    #[test]
    fn builtins_resolve() {
        assert_eq!(ev(&resolve("zero", None).unwrap(), 3.0, 4.0), 0.0);
        assert_eq!(ev(&resolve("constant:2.5", None).unwrap(), 3.0, 4.0), 2.5);
        assert_eq!(ev(&resolve("linear:2,-1", None).unwrap(), 3.0, 4.0), 2.0);
        assert_eq!(ev(&resolve("abs-z:0.5", None).unwrap(), 3.0, -4.0), 2.0);
        let s = resolve("sine:-1,0.5", None).unwrap();
        assert_eq!(ev(&s, 1.0, 0.0), -1.0);
        assert_eq!(s.constants().kappa, 1.0);
    }

    #[test]
    fn bad_names_are_parse_errors() {
        for bad in ["", "linear:1", "constant:x", "cubic:1", "zero:1", "linear:1,2,3", "constant:inf"] {
            assert!(matches!(resolve(bad, None), Err(Error::Parse(_))), "{bad}");
        }
    }

    #[test]
    fn tabulated_linear_driver_is_reproduced_inside_the_grid() {
        // g = 2y - z + t on a coarse grid is reproduced exactly by multilinear interpolation
        let t = vec![0.0, 1.0];
        let state = vec![0.0];
        let y = vec![-2.0, 0.0, 2.0];
        let z = vec![-1.0, 1.0];
        let mut values = Vec::new();
        for &ti in &t {
            for _ in &state {
                for &yi in &y {
                    for &zi in &z {
                        values.push(2.0 * yi - zi + ti);
                    }
                }
            }
        }
        let table = TabulatedDriver { t, state, y, z, values };
        table.validate().unwrap();
        for (tt, yy, zz) in [(0.3, 0.7, -0.2), (1.0, -2.0, 1.0), (0.5, 1.9, 0.0)] {
            let v = table.interpolate(tt, 5.0, yy, zz);
            assert!((v - (2.0 * yy - zz + tt)).abs() < 1e-14);
        }
        // clamped outside
        assert_eq!(table.interpolate(0.0, 0.0, 10.0, 0.0), table.interpolate(0.0, 0.0, 2.0, 0.0));
        let c = table.derived_constants();
        assert!((c.kappa - 2.0).abs() < 1e-14);
        assert!((c.lambda - 2.0).abs() < 1e-14);
    }

    #[test]
    fn driver_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("drbsde-registry-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let table = TabulatedDriver {
            t: vec![0.0],
            state: vec![0.0],
            y: vec![0.0],
            z: vec![-1.0, 1.0],
            values: vec![-0.5, 0.5],
        };
        std::fs::write(dir.join("g.json"), serde_json::to_string(&table).unwrap()).unwrap();
        let g = resolve("driver-file:g.json", Some(&dir)).unwrap();
        assert_eq!(ev(&g, 9.0, 0.5), 0.25);
        assert!(g.traits().y_independent);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn malformed_tables_are_rejected() {
        let t = TabulatedDriver {
            t: vec![0.0, 0.0],
            state: vec![0.0],
            y: vec![0.0],
            z: vec![0.0],
            values: vec![0.0, 0.0],
        };
        assert!(t.validate().is_err());
        let t = TabulatedDriver {
            t: vec![0.0],
            state: vec![0.0],
            y: vec![0.0],
            z: vec![0.0],
            values: vec![],
        };
        assert!(matches!(t.validate(), Err(Error::ShapeMismatch { .. })));
    }
}
