//! P1 finite elements: element matrices, global assembly with Dirichlet
//! elimination and the fine reference solve.

use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3, Point2, Vector2};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, SolverKind, SpdSolver, UNMAPPED};
use crate::mesh::Triangulation;
use crate::problem::{CoefficientField, ProblemInstance, QuadratureRule};

/// Nodal P1 function on a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct FeFunction {
    mesh: Arc<Triangulation>,
    values: Vec<f64>,
}

impl FeFunction {
    pub fn zeros(mesh: &Arc<Triangulation>) -> Self {
        Self {
            mesh: Arc::clone(mesh),
            values: vec![0.0; mesh.num_vertices()],
        }
    }

    pub fn from_values(mesh: &Arc<Triangulation>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.num_vertices() {
            return Err(Error::MeshMismatch(format!(
                "{} values for {} vertices",
                values.len(),
                mesh.num_vertices()
            )));
        }
        Ok(Self {
            mesh: Arc::clone(mesh),
            values,
        })
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(mesh: &Arc<Triangulation>, f: impl FnMut(&Point2<f64>) -> f64) -> Self {
        Self {
            mesh: Arc::clone(mesh),
            values: mesh.vertices().iter().map(f).collect(),
        }
    }

    pub fn mesh(&self) -> &Arc<Triangulation> {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Point evaluation; `None` outside the mesh.
    pub fn eval(&self, p: &Point2<f64>) -> Option<f64> {
        let (t, lam) = self.mesh.locate(p)?;
        let tri = self.mesh.triangles()[t];
        Some((0..3).map(|k| lam[k] * self.values[tri[k]]).sum())
    }

    /// Sets all boundary values to zero.
    pub fn zero_boundary(&mut self) {
        for (v, x) in self.values.iter_mut().enumerate() {
            if self.mesh.is_boundary(v) {
                *x = 0.0;
            }
        }
    }

    pub fn boundary_max_abs(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|(v, _)| self.mesh.is_boundary(*v))
            .fold(0.0, |m, (_, x)| m.max(x.abs()))
    }

    pub(crate) fn check_mesh(&self, mesh: &Triangulation) -> Result<()> {
        if self.mesh.same_mesh(mesh) {
            Ok(())
        } else {
            Err(Error::MeshMismatch("function lives on a different mesh".into()))
        }
    }
}

/// Map between mesh vertices and free (non-Dirichlet) unknowns.
#[derive(Debug, Clone)]
pub struct DofMap {
    free: Vec<usize>,
    index: Vec<usize>,
}

impl DofMap {
    pub fn interior(mesh: &Triangulation) -> Self {
        let free: Vec<usize> = (0..mesh.num_vertices())
            .filter(|&v| !mesh.is_boundary(v))
            .collect();
        let index = linalg::index_map(&free, mesh.num_vertices());
        Self { free, index }
    }

    pub fn len(&self) -> usize {
        self.free.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free.is_empty()
    }

    /// Vertex of each free unknown.
    pub fn vertices(&self) -> &[usize] {
        &self.free
    }

    pub fn free_index(&self, vertex: usize) -> Option<usize> {
        match self.index[vertex] {
            UNMAPPED => None,
            i => Some(i),
        }
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&v| full[v]).collect()
    }

    pub fn extend(&self, reduced: &[f64], num_vertices: usize) -> Vec<f64> {
        let mut full = vec![0.0; num_vertices];
        for (&v, &x) in self.free.iter().zip(reduced) {
            full[v] = x;
        }
        full
    }
}

/// Stiffness system on the free unknowns.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub mesh: Arc<Triangulation>,
    pub matrix: CsrMatrix<f64>,
    pub rhs: Vec<f64>,
    pub dofs: DofMap,
}

/// `K_ij = area (A grad l_j) . grad l_i` for the barycentric hats `l`.
pub fn element_stiffness(corners: &[Point2<f64>; 3], a: &Matrix2<f64>) -> Result<Matrix3<f64>> {
    let [p0, p1, p2] = corners;
    let area = 0.5 * ((p1.x - p0.x) * (p2.y - p0.y) - (p2.x - p0.x) * (p1.y - p0.y));
    if !(area > 0.0) {
        return Err(Error::DegenerateTriangle(0));
    }
    let s = 1.0 / (2.0 * area);
    let g = |p: &Point2<f64>, q: &Point2<f64>| Vector2::new(p.y - q.y, q.x - p.x) * s;
    let grads = [g(p1, p2), g(p2, p0), g(p0, p1)];
    Ok(stiffness_from_gradients(&grads, area, a))
}

fn stiffness_from_gradients(grads: &[Vector2<f64>; 3], area: f64, a: &Matrix2<f64>) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| area * (a * grads[j]).dot(&grads[i]))
}

/// Exact P1 mass matrix: `area (1 + delta_ij) / 12`.
pub fn element_mass(area: f64) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| area * if i == j { 2.0 } else { 1.0 } / 12.0)
}

fn element_coefficient(
    mesh: &Triangulation,
    t: usize,
    coefficient: &CoefficientField,
    rule: QuadratureRule,
) -> Matrix2<f64> {
    match rule {
        QuadratureRule::Centroid => coefficient.eval(&mesh.centroid(t)),
        QuadratureRule::EdgeMidpoints => {
            let [a, b, c] = mesh.corners(t);
            let mids = [
                nalgebra::center(&a, &b),
                nalgebra::center(&b, &c),
                nalgebra::center(&c, &a),
            ];
            mids.iter().map(|m| coefficient.eval(m)).sum::<Matrix2<f64>>() / 3.0
        }
    }
}

/// `int_t f l_a` with the edge-midpoint rule, exact for quadratic integrands.
fn element_load(mesh: &Triangulation, t: usize, problem: &ProblemInstance) -> [f64; 3] {
    let [a, b, c] = mesh.corners(t);
    let area = mesh.area(t);
    let f_ab = problem.source(&nalgebra::center(&a, &b));
    let f_bc = problem.source(&nalgebra::center(&b, &c));
    let f_ca = problem.source(&nalgebra::center(&c, &a));
    let w = area / 6.0;
    [w * (f_ab + f_ca), w * (f_ab + f_bc), w * (f_bc + f_ca)]
}

/// Everything the multiscale solvers need from the fine mesh: per-element
/// coefficients and gradients, and the stiffness and mass matrices over all
/// vertices (boundary rows included).
#[derive(Debug, Clone)]
pub struct Discretization {
    mesh: Arc<Triangulation>,
    coefficients: Vec<Matrix2<f64>>,
    gradients: Vec<[Vector2<f64>; 3]>,
    areas: Vec<f64>,
    element_loads: Vec<[f64; 3]>,
    stiffness: CsrMatrix<f64>,
    mass: CsrMatrix<f64>,
    load: Vec<f64>,
    dofs: DofMap,
}

impl Discretization {
    pub fn new(
        mesh: &Arc<Triangulation>,
        problem: &ProblemInstance,
        rule: QuadratureRule,
    ) -> Result<Self> {
        let local: Vec<_> = (0..mesh.num_triangles())
            .into_par_iter()
            .map(|t| -> Result<_> {
                let grads = mesh.barycentric_gradients(t)?;
                let a = element_coefficient(mesh, t, &problem.coefficient, rule);
                Ok((grads, a, element_load(mesh, t, problem)))
            })
            .collect::<Result<_>>()?;

        let n = mesh.num_vertices();
        let mut k = CooMatrix::new(n, n);
        let mut m = CooMatrix::new(n, n);
        let mut load = vec![0.0; n];
        let mut coefficients = Vec::with_capacity(local.len());
        let mut gradients = Vec::with_capacity(local.len());
        let mut areas = Vec::with_capacity(local.len());
        let mut element_loads = Vec::with_capacity(local.len());
        for (t, (grads, a, fl)) in local.into_iter().enumerate() {
            let area = mesh.area(t);
            let ke = stiffness_from_gradients(&grads, area, &a);
            let me = element_mass(area);
            let tri = mesh.triangles()[t];
            for i in 0..3 {
                load[tri[i]] += fl[i];
                for j in 0..3 {
                    k.push(tri[i], tri[j], ke[(i, j)]);
                    m.push(tri[i], tri[j], me[(i, j)]);
                }
            }
            coefficients.push(a);
            gradients.push(grads);
            areas.push(area);
            element_loads.push(fl);
        }
        Ok(Self {
            mesh: Arc::clone(mesh),
            coefficients,
            gradients,
            areas,
            element_loads,
            stiffness: CsrMatrix::from(&k),
            mass: CsrMatrix::from(&m),
            load,
            dofs: DofMap::interior(mesh),
        })
    }

    pub fn mesh(&self) -> &Arc<Triangulation> {
        &self.mesh
    }

    /// Effective constant coefficient of element `t` after quadrature.
    pub fn coefficient(&self, t: usize) -> &Matrix2<f64> {
        &self.coefficients[t]
    }

    pub fn gradients(&self, t: usize) -> &[Vector2<f64>; 3] {
        &self.gradients[t]
    }

    pub fn area(&self, t: usize) -> f64 {
        self.areas[t]
    }

    pub fn element_load(&self, t: usize) -> &[f64; 3] {
        &self.element_loads[t]
    }

    pub fn element_stiffness(&self, t: usize) -> Matrix3<f64> {
        stiffness_from_gradients(&self.gradients[t], self.areas[t], &self.coefficients[t])
    }

    /// Full-vertex stiffness matrix.
    pub fn stiffness(&self) -> &CsrMatrix<f64> {
        &self.stiffness
    }

    /// Full-vertex mass matrix.
    pub fn mass(&self) -> &CsrMatrix<f64> {
        &self.mass
    }

    /// `int f phi_v` for every vertex `v`.
    pub fn load(&self) -> &[f64] {
        &self.load
    }

    pub fn dofs(&self) -> &DofMap {
        &self.dofs
    }

    /// Gradient of a nodal vector on element `t`.
    pub fn gradient_of(&self, t: usize, values: &[f64]) -> Vector2<f64> {
        let tri = self.mesh.triangles()[t];
        let g = &self.gradients[t];
        g[0] * values[tri[0]] + g[1] * values[tri[1]] + g[2] * values[tri[2]]
    }

    /// `a(v, v)` over the whole domain.
    pub fn energy(&self, values: &[f64]) -> f64 {
        linalg::quadratic_form(&self.stiffness, values)
    }

    /// `a(u, v)`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        linalg::dot(&linalg::csr_mul(&self.stiffness, u), v)
    }

    /// Squared A-weighted gradient norm of `values` on element `t`.
    pub fn element_energy(&self, t: usize, values: &[f64]) -> f64 {
        let g = self.gradient_of(t, values);
        self.areas[t] * (self.coefficients[t] * g).dot(&g)
    }

    /// The system on the free unknowns.
    pub fn system(&self) -> SparseSystem {
        let csc = linalg::principal_submatrix(&self.stiffness, self.dofs.vertices());
        SparseSystem {
            mesh: Arc::clone(&self.mesh),
            matrix: linalg::csc_to_csr(&csc),
            rhs: self.dofs.restrict(&self.load),
            dofs: self.dofs.clone(),
        }
    }

    /// Fine-scale reference `u_h`.
    pub fn solve_reference(&self, kind: SolverKind, tol: f64) -> Result<FeFunction> {
        solve_spd(&self.system(), kind, tol)
    }
}

/// Assembles stiffness and load on `mesh` with Dirichlet unknowns eliminated.
pub fn assemble_system(
    mesh: &Arc<Triangulation>,
    problem: &ProblemInstance,
    rule: QuadratureRule,
) -> Result<SparseSystem> {
    Ok(Discretization::new(mesh, problem, rule)?.system())
}

/// Solves an assembled system; boundary values of the result are zero.
pub fn solve_spd(system: &SparseSystem, kind: SolverKind, tol: f64) -> Result<FeFunction> {
    let n = system.mesh.num_vertices();
    if system.dofs.is_empty() {
        return Ok(FeFunction::zeros(&system.mesh));
    }
    let csc = linalg::principal_submatrix(
        &system.matrix,
        &(0..system.dofs.len()).collect::<Vec<_>>(),
    );
    let solver = SpdSolver::new(&csc, kind, tol)?;
    let x = solver.solve(&system.rhs)?;
    FeFunction::from_values(&system.mesh, system.dofs.extend(&x, n))
}
