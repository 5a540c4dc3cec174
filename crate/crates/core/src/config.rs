//! Study configuration from `key = value` text.

use std::path::PathBuf;

use crate::correctors::Strategy;
use crate::error::{Error, Result};
use crate::linalg::SolverKind;
use crate::msfem::{Formulation, RhsVariant};
use crate::patches::LayerSpec;
use crate::problem::QuadratureRule;

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub problem: String,
    /// Coefficient level for the `constant` problem.
    pub gamma: f64,
    /// Coarse subdivisions; a list for sweeps.
    pub coarse: Vec<usize>,
    pub fine: usize,
    pub strategy: Strategy,
    /// `None` picks Petrov-Galerkin for strategies 1 and 2, symmetric for 3.
    pub formulation: Option<Formulation>,
    pub rhs: RhsVariant,
    /// One entry per coarse size, or a single entry used for all of them.
    pub layers: Vec<LayerSpec>,
    pub tol: f64,
    pub solver: SolverKind,
    pub quadrature: QuadratureRule,
    pub output: Option<PathBuf>,
    /// Worker threads; `None` uses every core.
    pub parallel: Option<usize>,
    pub dump_field: Option<PathBuf>,
    pub dump_correctors: Option<PathBuf>,
    /// Coarse elements probed by the decay study; empty picks interior ones.
    pub owners: Vec<usize>,
    pub k_max: usize,
    pub truncation: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            problem: "section5".into(),
            gamma: 1.0,
            coarse: vec![8],
            fine: 64,
            strategy: Strategy::Constrained,
            formulation: None,
            rhs: RhsVariant::Corrected,
            layers: vec![LayerSpec::Fine(16)],
            tol: 1e-12,
            solver: SolverKind::Direct,
            quadrature: QuadratureRule::Centroid,
            output: None,
            parallel: None,
            dump_field: None,
            dump_correctors: None,
            owners: Vec::new(),
            k_max: 4,
            truncation: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "problem",
    "gamma",
    "coarse",
    "fine",
    "strategy",
    "formulation",
    "rhs",
    "layers",
    "layers-fine",
    "layers-coarse",
    "tol",
    "solver",
    "quadrature",
    "output",
    "parallel",
    "dump-field",
    "dump-correctors",
    "owners",
    "k-max",
    "truncation",
];

fn list<T>(value: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let out: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::invalid("empty list"));
    }
    Ok(out)
}

fn number<T: std::str::FromStr>(value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("'{value}' is not a valid number")))
}

fn positive(value: &str) -> Result<usize> {
    let n: usize = number(value)?;
    if n == 0 {
        return Err(Error::invalid("value must be positive"));
    }
    Ok(n)
}

fn flag(value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(Error::invalid(format!("'{other}' is not a boolean"))),
    }
}

impl StudyConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "problem" => {
                if value.is_empty() {
                    return Err(Error::invalid("empty problem name"));
                }
                self.problem = value.to_string();
            }
            "gamma" => {
                let g: f64 = number(value)?;
                if !(g > 0.0 && g.is_finite()) {
                    return Err(Error::invalid("gamma must be positive"));
                }
                self.gamma = g;
            }
            "coarse" => self.coarse = list(value, positive)?,
            "fine" => self.fine = positive(value)?,
            "strategy" => self.strategy = value.parse()?,
            "formulation" => self.formulation = Some(value.parse()?),
            "rhs" => self.rhs = value.parse()?,
            "layers" => self.layers = list(value, str::parse)?,
            "layers-fine" => self.layers = list(value, |v| number(v).map(LayerSpec::Fine))?,
            "layers-coarse" => self.layers = list(value, |v| number(v).map(LayerSpec::Coarse))?,
            "tol" => {
                let t: f64 = number(value)?;
                if !(t > 0.0 && t < 1.0) {
                    return Err(Error::invalid("tol must lie in (0, 1)"));
                }
                self.tol = t;
            }
            "solver" => self.solver = value.parse()?,
            "quadrature" => self.quadrature = value.parse()?,
            "output" => self.output = Some(PathBuf::from(value)),
            "parallel" => self.parallel = Some(positive(value)?),
            "dump-field" => self.dump_field = Some(PathBuf::from(value)),
            "dump-correctors" => self.dump_correctors = Some(PathBuf::from(value)),
            "owners" => self.owners = list(value, number)?,
            "k-max" => self.k_max = number(value)?,
            "truncation" => self.truncation = flag(value)?,
            other => return Err(Error::invalid(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies every setting of a `key = value` file on top of `self`.
    ///
    /// `#` starts a comment. Keys may use `_` in place of `-`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(n + 1, "expected 'key = value'"));
            };
            let key = key.trim().replace('_', "-");
            self.set(&key, value).map_err(|e| Error::parse(n + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for &n in &self.coarse {
            if n == 0 || self.fine % n != 0 {
                return Err(Error::invalid(format!(
                    "fine subdivisions {} must be a multiple of coarse subdivisions {n}",
                    self.fine
                )));
            }
        }
        if self.layers.len() != 1 && self.layers.len() != self.coarse.len() {
            return Err(Error::invalid(format!(
                "{} layer entries for {} coarse sizes",
                self.layers.len(),
                self.coarse.len()
            )));
        }
        Ok(())
    }

    /// `(coarse n, layers)` pairs of a sweep.
    pub fn sweep(&self) -> Vec<(usize, LayerSpec)> {
        self.coarse
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, if self.layers.len() == 1 { self.layers[0] } else { self.layers[i] }))
            .collect()
    }

    pub fn formulation_for(&self, strategy: Strategy) -> Formulation {
        self.formulation.unwrap_or(match strategy {
            Strategy::Constrained => Formulation::Symmetric,
            _ => Formulation::PetrovGalerkin,
        })
    }
}
