//! Shared state for one problem on one coarse/fine hierarchy.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::Vector2;

use crate::correctors::{compute_correctors, CorrectorBasis, Strategy};
use crate::error::Result;
use crate::fem::{Discretization, FeFunction};
use crate::interpolation::QuasiInterpolator;
use crate::linalg::SolverKind;
use crate::mesh::RefinementHierarchy;
use crate::patches::LayerSpec;
use crate::problem::{ProblemInstance, QuadratureRule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub solver: SolverKind,
    /// Relative residual for every sparse SPD solve.
    pub tol: f64,
    pub quadrature: QuadratureRule,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            solver: SolverKind::Direct,
            tol: 1e-12,
            quadrature: QuadratureRule::Centroid,
        }
    }
}

/// Fine discretization, quasi-interpolation and a corrector cache for one problem.
pub struct MultiscaleSetup {
    pub problem: ProblemInstance,
    pub hier: Arc<RefinementHierarchy>,
    pub fine: Discretization,
    pub interp: QuasiInterpolator,
    pub options: SolveOptions,
    coarse_gradients: Vec<[Vector2<f64>; 3]>,
    cache: Mutex<HashMap<(Strategy, LayerSpec), Arc<CorrectorBasis>>>,
}

impl std::fmt::Debug for MultiscaleSetup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MultiscaleSetup")
            .field("problem", &self.problem.name)
            .field("coarse_n", &self.hier.coarse().lattice())
            .field("fine_n", &self.hier.fine().lattice())
            .field("options", &self.options)
            .finish_non_exhaustive()
    }
}

impl MultiscaleSetup {
    pub fn new(
        problem: ProblemInstance,
        coarse_n: usize,
        fine_n: usize,
        options: SolveOptions,
    ) -> Result<Self> {
        if coarse_n == 0 || fine_n % coarse_n != 0 {
            return Err(crate::Error::invalid(format!(
                "fine subdivisions {fine_n} must be a positive multiple of coarse subdivisions {coarse_n}"
            )));
        }
        let hier = Arc::new(RefinementHierarchy::uniform(coarse_n, fine_n / coarse_n)?);
        Self::from_hierarchy(problem, hier, options)
    }

    pub fn from_hierarchy(
        problem: ProblemInstance,
        hier: Arc<RefinementHierarchy>,
        options: SolveOptions,
    ) -> Result<Self> {
        let fine = Discretization::new(hier.fine(), &problem, options.quadrature)?;
        let interp = QuasiInterpolator::new(&hier)?;
        let coarse = hier.coarse();
        let coarse_gradients = (0..coarse.num_triangles())
            .map(|t| coarse.barycentric_gradients(t))
            .collect::<Result<_>>()?;
        Ok(Self {
            problem,
            hier,
            fine,
            interp,
            options,
            coarse_gradients,
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Coarse cell side length `H`.
    pub fn coarse_step(&self) -> f64 {
        1.0 / self.hier.coarse().lattice().unwrap_or(1) as f64
    }

    /// Fine cell side length `h`.
    pub fn fine_step(&self) -> f64 {
        1.0 / self.hier.fine().lattice().unwrap_or(1) as f64
    }

    /// Gradients of the three coarse hats on coarse element `t`.
    pub fn coarse_gradients(&self, t: usize) -> &[Vector2<f64>; 3] {
        &self.coarse_gradients[t]
    }

    /// Constant gradient of a coarse function on coarse element `t`.
    pub fn coarse_gradient_of(&self, t: usize, coarse_values: &[f64]) -> Vector2<f64> {
        let tri = self.hier.coarse().triangles()[t];
        let g = &self.coarse_gradients[t];
        g[0] * coarse_values[tri[0]] + g[1] * coarse_values[tri[1]] + g[2] * coarse_values[tri[2]]
    }

    pub fn reference(&self) -> Result<FeFunction> {
        self.fine.solve_reference(self.options.solver, self.options.tol)
    }

    /// Corrector basis for `(strategy, layers)`, computed once per setup.
    pub fn correctors(&self, strategy: Strategy, layers: LayerSpec) -> Result<Arc<CorrectorBasis>> {
        if let Some(b) = self.cache.lock().expect("cache lock").get(&(strategy, layers)) {
            return Ok(Arc::clone(b));
        }
        let basis = Arc::new(compute_correctors(self, strategy, layers)?);
        self.cache
            .lock()
            .expect("cache lock")
            .insert((strategy, layers), Arc::clone(&basis));
        Ok(basis)
    }
}
