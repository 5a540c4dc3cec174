//! Elliptic model problems `-div(A grad u) = f` with homogeneous Dirichlet data.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix2, Point2};

use crate::error::{Error, Result};

type MatrixFn = dyn Fn(&Point2<f64>) -> Matrix2<f64> + Send + Sync;
type ScalarFn = dyn Fn(&Point2<f64>) -> f64 + Send + Sync;

/// A symmetric positive definite coefficient with declared spectral bounds.
#[derive(Clone)]
pub struct CoefficientField {
    eval: Arc<MatrixFn>,
    gamma_min: f64,
    gamma_max: f64,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("gamma_min", &self.gamma_min)
            .field("gamma_max", &self.gamma_max)
            .finish_non_exhaustive()
    }
}

impl CoefficientField {
    pub fn new(
        eval: impl Fn(&Point2<f64>) -> Matrix2<f64> + Send + Sync + 'static,
        gamma_min: f64,
        gamma_max: f64,
    ) -> Result<Self> {
        if !(gamma_min > 0.0 && gamma_max >= gamma_min) {
            return Err(Error::invalid(format!(
                "spectral bounds must satisfy 0 < gamma_min <= gamma_max, got [{gamma_min}, {gamma_max}]"
            )));
        }
        Ok(Self {
            eval: Arc::new(eval),
            gamma_min,
            gamma_max,
        })
    }

    pub fn eval(&self, p: &Point2<f64>) -> Matrix2<f64> {
        (self.eval)(p)
    }

    pub fn gamma_min(&self) -> f64 {
        self.gamma_min
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma_max
    }

    /// Eigenvalues of `A(p)` in ascending order.
    pub fn eigenvalues(&self, p: &Point2<f64>) -> [f64; 2] {
        let a = self.eval(p);
        let mean = 0.5 * (a[(0, 0)] + a[(1, 1)]);
        let half_diff = 0.5 * (a[(0, 0)] - a[(1, 1)]);
        let off = 0.5 * (a[(0, 1)] + a[(1, 0)]);
        let r = half_diff.hypot(off);
        [mean - r, mean + r]
    }
}

/// Where the coefficient is sampled on each fine triangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuadratureRule {
    /// One point at the centroid.
    #[default]
    Centroid,
    /// Mean of the three edge midpoints.
    EdgeMidpoints,
}

impl std::str::FromStr for QuadratureRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centroid" => Ok(Self::Centroid),
            "midpoint" | "edge-midpoint" | "midpoints" => Ok(Self::EdgeMidpoints),
            other => Err(Error::invalid(format!("unknown quadrature rule `{other}`"))),
        }
    }
}

impl fmt::Display for QuadratureRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Centroid => "centroid",
            Self::EdgeMidpoints => "midpoint",
        })
    }
}

/// Coefficient, source and optional analytic solution of one benchmark.
#[derive(Clone)]
pub struct ProblemInstance {
    pub name: String,
    pub coefficient: CoefficientField,
    source: Arc<ScalarFn>,
    exact: Option<Arc<ScalarFn>>,
    epsilon: Option<f64>,
}

impl fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("name", &self.name)
            .field("coefficient", &self.coefficient)
            .field("epsilon", &self.epsilon)
            .finish_non_exhaustive()
    }
}

impl ProblemInstance {
    pub fn new(
        name: impl Into<String>,
        coefficient: CoefficientField,
        source: impl Fn(&Point2<f64>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            coefficient,
            source: Arc::new(source),
            exact: None,
            epsilon: None,
        }
    }

    pub fn with_exact_solution(
        mut self,
        exact: impl Fn(&Point2<f64>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.exact = Some(Arc::new(exact));
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        self.epsilon = Some(epsilon);
        Ok(self)
    }

    /// Replaces the source term, keeping the coefficient.
    pub fn with_source(
        mut self,
        source: impl Fn(&Point2<f64>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.source = Arc::new(source);
        self.exact = None;
        self
    }

    pub fn source(&self, p: &Point2<f64>) -> f64 {
        (self.source)(p)
    }

    pub fn exact_solution(&self, p: &Point2<f64>) -> Option<f64> {
        self.exact.as_ref().map(|u| u(p))
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }
}

const SECTION5_EPSILON: f64 = 0.05;

/// The oscillating benchmark on the unit square with `epsilon = 0.05`:
/// `A = (8 pi^2)^-1 diag(2 / (2 + cos(2 pi x1 / eps)), 1 + cos(2 pi x1 / eps) / 2)`
/// and `f = sin(2 pi x1) sin(2 pi x2)`.
pub fn model_problem_section5() -> ProblemInstance {
    let eps = SECTION5_EPSILON;
    let scale = 1.0 / (8.0 * PI * PI);
    let coefficient = CoefficientField::new(
        move |p: &Point2<f64>| {
            let c = (2.0 * PI * p.x / eps).cos();
            Matrix2::new(scale * 2.0 / (2.0 + c), 0.0, 0.0, scale * (1.0 + 0.5 * c))
        },
        scale * 0.5,
        scale * 2.0,
    )
    .expect("section 5 bounds are valid");
    ProblemInstance::new("section5", coefficient, |p: &Point2<f64>| {
        (2.0 * PI * p.x).sin() * (2.0 * PI * p.y).sin()
    })
    .with_exact_solution(move |p: &Point2<f64>| {
        let (s1, s2) = ((2.0 * PI * p.x).sin(), (2.0 * PI * p.y).sin());
        s1 * s2 + 0.5 * eps * (2.0 * PI * p.x).cos() * s2 * (2.0 * PI * p.x / eps).sin()
    })
    .with_epsilon(eps)
    .expect("positive epsilon")
}

/// `A = gamma * I` with `f = 1`.
pub fn constant_problem(gamma: f64) -> Result<ProblemInstance> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    let coefficient = CoefficientField::new(
        move |_: &Point2<f64>| Matrix2::identity() * gamma,
        gamma,
        gamma,
    )?;
    Ok(ProblemInstance::new("constant", coefficient, |_: &Point2<f64>| 1.0))
}

/// Looks up a registered problem by name.
pub fn problem_by_name(name: &str, gamma: f64) -> Result<ProblemInstance> {
    match name {
        "section5" => Ok(model_problem_section5()),
        "constant" => constant_problem(gamma),
        other => Err(Error::invalid(format!("unknown problem `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn section5_coefficient_at_origin() {
        let p = model_problem_section5();
        let a = p.coefficient.eval(&Point2::new(0.0, 0.3));
        let s = 1.0 / (8.0 * PI * PI);
        assert!((a[(0, 0)] - s * 2.0 / 3.0).abs() < 1e-15);
        assert!((a[(1, 1)] - s * 1.5).abs() < 1e-15);
        assert_eq!(a[(0, 1)], 0.0);
        assert!((p.coefficient.gamma_min() - s * 0.5).abs() < 1e-16);
        assert!((p.coefficient.gamma_max() - s * 2.0).abs() < 1e-16);
        assert_eq!(p.epsilon(), Some(0.05));
    }

    #[test]
    fn section5_exact_solution_value() {
        let p = model_problem_section5();
        let u = p.exact_solution(&Point2::new(0.25, 0.25)).unwrap();
        assert!((u - 1.0).abs() < 1e-15);
        assert!((p.source(&Point2::new(0.25, 0.25)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn section5_symmetric_within_bounds_on_random_samples() {
        let p = model_problem_section5();
        let c = &p.coefficient;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1_000_000 {
            let x = Point2::new(rng.random::<f64>(), rng.random::<f64>());
            let a = c.eval(&x);
            assert!((a[(0, 1)] - a[(1, 0)]).abs() <= 1e-14);
            let [lo, hi] = c.eigenvalues(&x);
            assert!(lo >= c.gamma_min() * (1.0 - 1e-14) && hi <= c.gamma_max() * (1.0 + 1e-14));
        }
    }

    #[test]
    fn constant_problem_fixture() {
        let p = constant_problem(1.0).unwrap();
        assert_eq!(p.coefficient.eval(&Point2::new(0.3, 0.9)), Matrix2::identity());
        assert_eq!(p.coefficient.eigenvalues(&Point2::new(0.1, 0.2)), [1.0, 1.0]);
        assert_eq!(p.source(&Point2::new(0.5, 0.5)), 1.0);
        assert!(p.exact_solution(&Point2::new(0.5, 0.5)).is_none());
        assert!(constant_problem(0.0).is_err());
        assert!(constant_problem(-2.0).is_err());
        assert!(problem_by_name("nope", 1.0).is_err());
    }
}
