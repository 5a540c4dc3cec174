//! Local corrector problems and the correction operator `Q_h`.
//!
//! For every coarse element `T` and direction `e_i` a fine function `w_T^i`
//! supported in the patch `U(T)` is computed. Strategies 1 and 2 solve plain
//! Dirichlet problems on the patch (1 additionally pins the fine values at the
//! coarse vertices of `T`). Strategy 3 solves in the patch-local kernel of the
//! quasi-interpolation, with the load restricted to `T`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::FeFunction;
use crate::linalg::{self, csr_mul, norm, SpdSolver, SymmetricPseudoInverse, UNMAPPED};
use crate::mesh::Triangulation;
use crate::patches::{build_patches, LayerSpec, Patch};
use crate::setup::MultiscaleSetup;

/// Relative eigenvalue cut-off for the constraint Schur complement.
const CONSTRAINT_RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Patch Dirichlet problem with the coarse vertices of `T` pinned.
    ReducedSpace,
    /// Patch Dirichlet problem in the full fine space.
    FullSpace,
    /// Patch problem in the kernel of the quasi-interpolation.
    Constrained,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::ReducedSpace, Strategy::FullSpace, Strategy::Constrained];

    pub fn number(self) -> u8 {
        match self {
            Strategy::ReducedSpace => 1,
            Strategy::FullSpace => 2,
            Strategy::Constrained => 3,
        }
    }

    /// Strategy 3 corrections are globally conforming, the others are broken.
    pub fn is_conforming(self) -> bool {
        self == Strategy::Constrained
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(Strategy::ReducedSpace),
            "2" => Ok(Strategy::FullSpace),
            "3" => Ok(Strategy::Constrained),
            other => Err(Error::invalid(format!("unknown strategy '{other}', expected 1, 2 or 3"))),
        }
    }
}

/// The pair `(w_T^1, w_T^2)` stored on its fine DOFs.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCorrector {
    pub owner: usize,
    /// Sorted fine vertices carrying unknowns.
    pub dofs: Vec<usize>,
    pub values: [Vec<f64>; 2],
}

impl LocalCorrector {
    fn zero(owner: usize) -> Self {
        Self {
            owner,
            dofs: Vec::new(),
            values: [Vec::new(), Vec::new()],
        }
    }

    /// Value of `w_T^i` at a fine vertex, zero off the DOF set.
    pub fn value_at(&self, i: usize, vertex: usize) -> f64 {
        match self.dofs.binary_search(&vertex) {
            Ok(k) => self.values[i][k],
            Err(_) => 0.0,
        }
    }

    /// Zero extension of `w_T^i` to all fine vertices.
    pub fn extend(&self, i: usize, num_vertices: usize) -> Vec<f64> {
        let mut out = vec![0.0; num_vertices];
        for (&v, &x) in self.dofs.iter().zip(&self.values[i]) {
            out[v] = x;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveDiagnostics {
    pub owner: usize,
    pub dofs: usize,
    pub constraints: usize,
    /// Relative residual of the first block row, worst of the two directions.
    pub residual: f64,
    /// `max |C w|`, zero for strategies without constraints.
    pub constraint_violation: f64,
    pub dropped_constraints: usize,
    /// Condition of the constraint Schur complement on its kept range.
    pub saddle_condition: f64,
}

/// All correctors of one strategy on one patch family.
#[derive(Debug, Clone)]
pub struct CorrectorBasis {
    pub strategy: Strategy,
    pub layers: LayerSpec,
    pub patches: Vec<Patch>,
    pub correctors: Vec<LocalCorrector>,
    pub diagnostics: Vec<SolveDiagnostics>,
    num_fine_vertices: usize,
}

impl CorrectorBasis {
    pub fn corrector(&self, t: usize) -> &LocalCorrector {
        &self.correctors[t]
    }

    pub fn full_corrector(&self, t: usize, i: usize, mesh: &Arc<Triangulation>) -> Result<FeFunction> {
        FeFunction::from_values(mesh, self.correctors[t].extend(i, self.num_fine_vertices))
    }

    pub fn max_residual(&self) -> f64 {
        self.diagnostics.iter().fold(0.0, |m, d| m.max(d.residual))
    }

    pub fn max_constraint_violation(&self) -> f64 {
        self.diagnostics.iter().fold(0.0, |m, d| m.max(d.constraint_violation))
    }

    pub fn dropped_constraints(&self) -> usize {
        self.diagnostics.iter().map(|d| d.dropped_constraints).sum()
    }
}

/// Negative load `-∫ A e_i·∇φ_a` over `elements`, for every mapped DOF `a`.
fn direction_loads(
    setup: &MultiscaleSetup,
    elements: &[usize],
    dof_map: &[usize],
    n: usize,
) -> [Vec<f64>; 2] {
    let mesh = setup.hier.fine();
    let mut b = [vec![0.0; n], vec![0.0; n]];
    for &tau in elements {
        let a = setup.fine.coefficient(tau);
        let g = setup.fine.gradients(tau);
        let area = setup.fine.area(tau);
        for (k, &v) in mesh.triangles()[tau].iter().enumerate() {
            let l = dof_map[v];
            if l == UNMAPPED {
                continue;
            }
            let ag = a * g[k];
            b[0][l] -= area * ag[0];
            b[1][l] -= area * ag[1];
        }
    }
    b
}

struct ConstraintSolver {
    rows: CsrMatrix<f64>,
    /// `K^{-1} C^T`.
    y: DMatrix<f64>,
    schur: SymmetricPseudoInverse,
}

/// Factorized local operator, reusable for every owner sharing the same patch.
struct LocalSystem {
    dofs: Vec<usize>,
    dof_map: Vec<usize>,
    k: SpdSolver,
    constraint: Option<ConstraintSolver>,
}

impl LocalSystem {
    fn new(setup: &MultiscaleSetup, dofs: Vec<usize>, rows: Option<CsrMatrix<f64>>) -> Result<Self> {
        let nv = setup.hier.fine().num_vertices();
        let kmat = linalg::principal_submatrix(setup.fine.stiffness(), &dofs);
        let k = SpdSolver::new(&kmat, setup.options.solver, setup.options.tol)?;
        let constraint = match rows {
            Some(c) if c.nrows() > 0 && !dofs.is_empty() => {
                let ct = DMatrix::from(&c.transpose());
                let y = k.solve_many(&ct)?;
                let s = DMatrix::from(&c) * &y;
                let s = (&s + s.transpose()) * 0.5;
                Some(ConstraintSolver {
                    rows: c,
                    y,
                    schur: SymmetricPseudoInverse::new(s, CONSTRAINT_RANK_TOL),
                })
            }
            _ => None,
        };
        Ok(Self {
            dof_map: linalg::index_map(&dofs, nv),
            dofs,
            k,
            constraint,
        })
    }

    /// One pass of `[K C^T; C 0] [w; λ] = [r; s]` through the Schur complement.
    fn saddle_step(&self, r: &[f64], s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x0 = self.k.solve(r)?;
        let Some(c) = &self.constraint else {
            return Ok((x0, Vec::new()));
        };
        let cx: Vec<f64> = csr_mul(&c.rows, &x0).iter().zip(s).map(|(a, b)| a - b).collect();
        let lambda = c.schur.apply(&DVector::from_vec(cx));
        let yl = &c.y * &lambda;
        let w = x0.iter().zip(yl.iter()).map(|(a, b)| a - b).collect();
        Ok((w, lambda.as_slice().to_vec()))
    }

    /// Residuals `(b - K w - C^T λ, -C w)`.
    fn residuals(&self, b: &[f64], w: &[f64], lambda: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let kw = csr_mul(self.k.matrix(), w);
        let mut r: Vec<f64> = b.iter().zip(&kw).map(|(b, a)| b - a).collect();
        let mut s = Vec::new();
        if let Some(c) = &self.constraint {
            let ctl = csr_mul(&c.rows.transpose(), lambda);
            r.iter_mut().zip(&ctl).for_each(|(ri, x)| *ri -= x);
            s = csr_mul(&c.rows, w).iter().map(|x| -x).collect();
        }
        (r, s)
    }

    fn solve(&self, owner: usize, b: &[Vec<f64>; 2]) -> Result<(LocalCorrector, SolveDiagnostics)> {
        let mut diag = SolveDiagnostics {
            owner,
            dofs: self.dofs.len(),
            constraints: self.constraint.as_ref().map_or(0, |c| c.rows.nrows()),
            saddle_condition: self.constraint.as_ref().map_or(1.0, |c| c.schur.condition),
            dropped_constraints: self.constraint.as_ref().map_or(0, |c| c.schur.dropped),
            ..Default::default()
        };
        let mut values: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for i in 0..2 {
            let m = diag.constraints;
            let (mut w, mut lambda) = self.saddle_step(&b[i], &vec![0.0; m])?;
            let bn = norm(&b[i]);
            let scale = if bn > 0.0 { bn } else { 1.0 };
            let (mut r, mut s) = self.residuals(&b[i], &w, &lambda);
            // Refinement sweeps on the full saddle system.
            for _ in 0..2 {
                if norm(&r) <= 1e-13 * scale && s.iter().all(|x| x.abs() <= 1e-14) {
                    break;
                }
                let (dw, dl) = self.saddle_step(&r, &s)?;
                w.iter_mut().zip(&dw).for_each(|(a, d)| *a += d);
                lambda.iter_mut().zip(&dl).for_each(|(a, d)| *a += d);
                (r, s) = self.residuals(&b[i], &w, &lambda);
            }
            diag.residual = diag.residual.max(norm(&r) / scale);
            let cv = s.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            diag.constraint_violation = diag.constraint_violation.max(cv);
            values[i] = w;
        }
        Ok((
            LocalCorrector {
                owner,
                dofs: self.dofs.clone(),
                values,
            },
            diag,
        ))
    }
}

/// Fine DOFs of the Strategy 1 space: patch interior minus the coarse vertices of `T`.
fn reduced_dofs(setup: &MultiscaleSetup, patch: &Patch) -> Vec<usize> {
    let pinned: Vec<usize> = setup.hier.coarse().triangles()[patch.owner]
        .iter()
        .map(|&v| setup.hier.coarse_vertex_in_fine(v))
        .collect();
    patch
        .interior_dofs
        .iter()
        .copied()
        .filter(|v| !pinned.contains(v))
        .collect()
}

fn check_owner(setup: &MultiscaleSetup, patch: &Patch) -> Result<()> {
    if patch.owner >= setup.hier.coarse().num_triangles() {
        return Err(Error::invalid(format!("patch owner {} out of range", patch.owner)));
    }
    Ok(())
}

fn solve_dirichlet(
    setup: &MultiscaleSetup,
    patch: &Patch,
    dofs: Vec<usize>,
) -> Result<(LocalCorrector, SolveDiagnostics)> {
    if dofs.is_empty() {
        return Ok((LocalCorrector::zero(patch.owner), SolveDiagnostics { owner: patch.owner, saddle_condition: 1.0, ..Default::default() }));
    }
    let sys = LocalSystem::new(setup, dofs, None)?;
    let b = direction_loads(setup, &patch.fine_elements, &sys.dof_map, sys.dofs.len());
    sys.solve(patch.owner, &b)
}

pub fn solve_corrector_strategy1(
    setup: &MultiscaleSetup,
    patch: &Patch,
) -> Result<(LocalCorrector, SolveDiagnostics)> {
    check_owner(setup, patch)?;
    solve_dirichlet(setup, patch, reduced_dofs(setup, patch))
}

pub fn solve_corrector_strategy2(
    setup: &MultiscaleSetup,
    patch: &Patch,
) -> Result<(LocalCorrector, SolveDiagnostics)> {
    check_owner(setup, patch)?;
    solve_dirichlet(setup, patch, patch.interior_dofs.clone())
}

pub fn solve_corrector_strategy3(
    setup: &MultiscaleSetup,
    patch: &Patch,
) -> Result<(LocalCorrector, SolveDiagnostics)> {
    check_owner(setup, patch)?;
    let sys = constrained_system(setup, patch)?;
    solve_constrained_with(setup, &sys, patch.owner)
}

fn constrained_system(setup: &MultiscaleSetup, patch: &Patch) -> Result<LocalSystem> {
    let block = setup.interp.build_constraints(patch)?;
    LocalSystem::new(setup, patch.interior_dofs.clone(), Some(block.rows))
}

fn solve_constrained_with(
    setup: &MultiscaleSetup,
    sys: &LocalSystem,
    owner: usize,
) -> Result<(LocalCorrector, SolveDiagnostics)> {
    if sys.dofs.is_empty() {
        return Ok((LocalCorrector::zero(owner), SolveDiagnostics { owner, saddle_condition: 1.0, ..Default::default() }));
    }
    let b = direction_loads(setup, setup.hier.children(owner), &sys.dof_map, sys.dofs.len());
    sys.solve(owner, &b)
}

/// Solves every corrector of `strategy` on patches grown by `layers`.
///
/// Owners with identical patches share one factorization. The map runs on the
/// current rayon pool and its output does not depend on the schedule.
pub fn compute_correctors(
    setup: &MultiscaleSetup,
    strategy: Strategy,
    layers: LayerSpec,
) -> Result<CorrectorBasis> {
    let patches = build_patches(&setup.hier, layers)?;
    let n = patches.len();

    let results: Vec<Vec<(LocalCorrector, SolveDiagnostics)>> = match strategy {
        Strategy::ReducedSpace | Strategy::FullSpace => patches
            .par_iter()
            .map(|p| {
                let r = if strategy == Strategy::ReducedSpace {
                    solve_corrector_strategy1(setup, p)
                } else {
                    solve_corrector_strategy2(setup, p)
                };
                r.map(|x| vec![x])
            })
            .collect::<Result<_>>()?,
        Strategy::Constrained => {
            let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
            for p in &patches {
                groups.entry(p.fine_elements.as_slice()).or_default().push(p.owner);
            }
            let groups: Vec<Vec<usize>> = groups.into_values().collect();
            groups
                .par_iter()
                .map(|owners| {
                    let sys = constrained_system(setup, &patches[owners[0]])?;
                    owners
                        .iter()
                        .map(|&t| solve_constrained_with(setup, &sys, t))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?
        }
    };

    let mut correctors = vec![LocalCorrector::zero(0); n];
    let mut diagnostics = vec![SolveDiagnostics::default(); n];
    for (c, d) in results.into_iter().flatten() {
        let t = c.owner;
        correctors[t] = c;
        diagnostics[t] = d;
    }
    Ok(CorrectorBasis {
        strategy,
        layers,
        patches,
        correctors,
        diagnostics,
        num_fine_vertices: setup.hier.fine().num_vertices(),
    })
}

/// A fine field given by independent nodal values on each fine element.
#[derive(Debug, Clone, PartialEq)]
pub struct BrokenField {
    mesh: Arc<Triangulation>,
    values: Vec<[f64; 3]>,
}

impl BrokenField {
    pub fn zeros(mesh: &Arc<Triangulation>) -> Self {
        Self {
            mesh: Arc::clone(mesh),
            values: vec![[0.0; 3]; mesh.num_triangles()],
        }
    }

    pub fn from_conforming(u: &FeFunction) -> Self {
        let v = u.values();
        Self {
            mesh: Arc::clone(u.mesh()),
            values: u.mesh().triangles().iter().map(|t| [v[t[0]], v[t[1]], v[t[2]]]).collect(),
        }
    }

    pub fn mesh(&self) -> &Arc<Triangulation> {
        &self.mesh
    }

    pub fn element_values(&self, t: usize) -> [f64; 3] {
        self.values[t]
    }

    pub fn element_values_mut(&mut self, t: usize) -> &mut [f64; 3] {
        &mut self.values[t]
    }
}

/// A correction or corrected field, conforming or broken along coarse edges.
#[derive(Debug, Clone, PartialEq)]
pub enum CorrectedField {
    Conforming(FeFunction),
    Broken(BrokenField),
}

impl CorrectedField {
    pub fn mesh(&self) -> &Arc<Triangulation> {
        match self {
            CorrectedField::Conforming(u) => u.mesh(),
            CorrectedField::Broken(b) => b.mesh(),
        }
    }

    /// Nodal values of the restriction to fine element `t`.
    pub fn element_values(&self, t: usize) -> [f64; 3] {
        match self {
            CorrectedField::Conforming(u) => {
                let tri = u.mesh().triangles()[t];
                let v = u.values();
                [v[tri[0]], v[tri[1]], v[tri[2]]]
            }
            CorrectedField::Broken(b) => b.element_values(t),
        }
    }

    pub fn as_conforming(&self) -> Option<&FeFunction> {
        match self {
            CorrectedField::Conforming(u) => Some(u),
            CorrectedField::Broken(_) => None,
        }
    }

    pub fn to_broken(&self) -> BrokenField {
        match self {
            CorrectedField::Conforming(u) => BrokenField::from_conforming(u),
            CorrectedField::Broken(b) => b.clone(),
        }
    }

    /// `self + s * other` elementwise on nodal values; conforming only if both are.
    pub fn axpy(&self, s: f64, other: &CorrectedField) -> Result<CorrectedField> {
        if !self.mesh().same_mesh(other.mesh()) {
            return Err(Error::MeshMismatch("fields live on different meshes".into()));
        }
        match (self, other) {
            (CorrectedField::Conforming(a), CorrectedField::Conforming(b)) => {
                let v = a.values().iter().zip(b.values()).map(|(x, y)| x + s * y).collect();
                Ok(CorrectedField::Conforming(FeFunction::from_values(a.mesh(), v)?))
            }
            _ => {
                let mut out = BrokenField::zeros(self.mesh());
                for t in 0..self.mesh().num_triangles() {
                    let (x, y) = (self.element_values(t), other.element_values(t));
                    *out.element_values_mut(t) = [x[0] + s * y[0], x[1] + s * y[1], x[2] + s * y[2]];
                }
                Ok(CorrectedField::Broken(out))
            }
        }
    }
}

/// Whether a correction lives in the conforming fine space or the broken one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSpace {
    Conforming,
    Broken,
}

/// `Q_h(Φ_H) = Σ_T [χ_T] Σ_i ∂_iΦ_H(x_T) w_T^i`, with `x_T` the barycenter of `T`.
///
/// The cut-off `χ_T` applies to strategies 1 and 2 only. Since `Φ_H` is
/// piecewise affine its gradient on `T` does not depend on `x_T`.
#[derive(Debug, Clone)]
pub struct CorrectionOperator {
    pub basis: Arc<CorrectorBasis>,
}

impl CorrectionOperator {
    pub fn new(basis: Arc<CorrectorBasis>) -> Self {
        Self { basis }
    }

    pub fn target(&self) -> TargetSpace {
        if self.basis.strategy.is_conforming() {
            TargetSpace::Conforming
        } else {
            TargetSpace::Broken
        }
    }

    pub fn apply(&self, setup: &MultiscaleSetup, coarse: &FeFunction) -> Result<CorrectedField> {
        apply_correction(setup, &self.basis, coarse)
    }
}

pub fn apply_correction(
    setup: &MultiscaleSetup,
    basis: &CorrectorBasis,
    coarse: &FeFunction,
) -> Result<CorrectedField> {
    coarse.check_mesh(setup.hier.coarse())?;
    let fine = setup.hier.fine();
    let u = coarse.values();
    let nt = setup.hier.coarse().num_triangles();
    if basis.strategy.is_conforming() {
        let mut out = vec![0.0; fine.num_vertices()];
        for t in 0..nt {
            let g = setup.coarse_gradient_of(t, u);
            let c = &basis.correctors[t];
            for (k, &v) in c.dofs.iter().enumerate() {
                out[v] += g[0] * c.values[0][k] + g[1] * c.values[1][k];
            }
        }
        Ok(CorrectedField::Conforming(FeFunction::from_values(fine, out)?))
    } else {
        let mut out = BrokenField::zeros(fine);
        for t in 0..nt {
            let g = setup.coarse_gradient_of(t, u);
            let c = &basis.correctors[t];
            for &tau in setup.hier.children(t) {
                let tri = fine.triangles()[tau];
                let vals = out.element_values_mut(tau);
                for k in 0..3 {
                    vals[k] = g[0] * c.value_at(0, tri[k]) + g[1] * c.value_at(1, tri[k]);
                }
            }
        }
        Ok(CorrectedField::Broken(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::element_stiffness;
    use crate::patches::build_patch;
    use crate::problem::{constant_problem, model_problem_section5};
    use crate::setup::SolveOptions;

    fn model_setup(coarse: usize, fine: usize) -> MultiscaleSetup {
        MultiscaleSetup::new(model_problem_section5(), coarse, fine, SolveOptions::default()).unwrap()
    }

    /// Dense stiffness on `dofs` from element matrices, and the direction loads on `elements`.
    fn dense_oracle(setup: &MultiscaleSetup, patch: &Patch, dofs: &[usize], load_elements: &[usize]) -> [DVector<f64>; 2] {
        let mesh = setup.hier.fine();
        let n = dofs.len();
        let pos = |v: usize| dofs.iter().position(|&d| d == v);
        let mut k = DMatrix::zeros(n, n);
        for &tau in &patch.fine_elements {
            let tri = mesh.triangles()[tau];
            let ke = element_stiffness(&mesh.corners(tau), setup.fine.coefficient(tau)).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    if let (Some(i), Some(j)) = (pos(tri[a]), pos(tri[b])) {
                        k[(i, j)] += ke[(a, b)];
                    }
                }
            }
        }
        let mut out = [DVector::zeros(n), DVector::zeros(n)];
        for d in 0..2 {
            let mut rhs = DVector::zeros(n);
            for &tau in load_elements {
                let tri = mesh.triangles()[tau];
                let g = mesh.barycentric_gradients(tau).unwrap();
                let ae = setup.fine.coefficient(tau).column(d).into_owned();
                for a in 0..3 {
                    if let Some(i) = pos(tri[a]) {
                        rhs[i] -= mesh.area(tau) * ae.dot(&g[a]);
                    }
                }
            }
            out[d] = k.clone().lu().solve(&rhs).unwrap();
        }
        out
    }

    fn max_diff(a: &[f64], b: &DVector<f64>) -> f64 {
        a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn constant_coefficient_gives_zero_classical_correctors() {
        let setup = MultiscaleSetup::new(constant_problem(2.5).unwrap(), 4, 16, SolveOptions::default()).unwrap();
        for strategy in [Strategy::ReducedSpace, Strategy::FullSpace] {
            for layers in [LayerSpec::Coarse(0), LayerSpec::Coarse(1)] {
                let basis = compute_correctors(&setup, strategy, layers).unwrap();
                for c in &basis.correctors {
                    for i in 0..2 {
                        assert!(c.values[i].iter().all(|x| x.abs() < 1e-12));
                    }
                }
            }
        }
    }

    #[test]
    fn dirichlet_correctors_match_dense_oracle() {
        let setup = model_setup(8, 32);
        for t in [0usize, 37, 70, 127] {
            let patch = build_patch(&setup.hier, t, LayerSpec::Coarse(1)).unwrap();
            let (c1, d1) = solve_corrector_strategy1(&setup, &patch).unwrap();
            let (c2, d2) = solve_corrector_strategy2(&setup, &patch).unwrap();
            assert!(d1.residual <= 1e-10 && d2.residual <= 1e-10);
            let o1 = dense_oracle(&setup, &patch, &c1.dofs, &patch.fine_elements);
            let o2 = dense_oracle(&setup, &patch, &c2.dofs, &patch.fine_elements);
            for i in 0..2 {
                assert!(max_diff(&c1.values[i], &o1[i]) < 1e-10);
                assert!(max_diff(&c2.values[i], &o2[i]) < 1e-10);
            }
        }
    }

    #[test]
    fn reduced_space_pins_coarse_vertices() {
        let setup = model_setup(4, 16);
        let basis = compute_correctors(&setup, Strategy::ReducedSpace, LayerSpec::Coarse(1)).unwrap();
        for (t, c) in basis.correctors.iter().enumerate() {
            for &v in &setup.hier.coarse().triangles()[t] {
                let fv = setup.hier.coarse_vertex_in_fine(v);
                assert_eq!(c.value_at(0, fv), 0.0);
                assert_eq!(c.value_at(1, fv), 0.0);
            }
        }
    }

    #[test]
    fn strategies_one_and_two_agree_without_oversampling() {
        let setup = model_setup(4, 32);
        let a = compute_correctors(&setup, Strategy::ReducedSpace, LayerSpec::Coarse(0)).unwrap();
        let b = compute_correctors(&setup, Strategy::FullSpace, LayerSpec::Coarse(0)).unwrap();
        for (x, y) in a.correctors.iter().zip(&b.correctors) {
            assert_eq!(x.dofs, y.dofs);
            for i in 0..2 {
                for (p, q) in x.values[i].iter().zip(&y.values[i]) {
                    assert!((p - q).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn constrained_correctors_lie_in_kernel() {
        let setup = model_setup(4, 16);
        let basis = compute_correctors(&setup, Strategy::Constrained, LayerSpec::Coarse(1)).unwrap();
        assert!(basis.max_constraint_violation() <= 1e-10);
        assert!(basis.max_residual() <= 1e-10);
        let nv = setup.hier.fine().num_vertices();
        for c in &basis.correctors {
            for i in 0..2 {
                let nodal = setup.interp.node_values(&c.extend(i, nv));
                assert!(nodal.iter().all(|x| x.abs() <= 1e-10));
            }
        }
    }

    /// Null-space oracle: span ker C by eigenvectors of `C^T C` and solve the reduced SPD system.
    #[test]
    fn constrained_correctors_match_null_space_oracle() {
        let setup = model_setup(4, 16);
        for t in [3usize, 12, 21, 30] {
            let patch = build_patch(&setup.hier, t, LayerSpec::Coarse(1)).unwrap();
            let (c, _) = solve_corrector_strategy3(&setup, &patch).unwrap();
            let block = setup.interp.build_constraints(&patch).unwrap();
            let cd = block.to_dense();
            let eig = (cd.transpose() * &cd).symmetric_eigen();
            let cmax = eig.eigenvalues.max();
            let basis: Vec<DVector<f64>> = (0..eig.eigenvalues.len())
                .filter(|&j| eig.eigenvalues[j] < 1e-10 * cmax)
                .map(|j| eig.eigenvectors.column(j).into_owned())
                .collect();
            let z = DMatrix::from_columns(&basis);
            let n = patch.interior_dofs.len();
            let pos = |v: usize| patch.interior_dofs.iter().position(|&d| d == v);
            let mesh = setup.hier.fine();
            let mut k = DMatrix::zeros(n, n);
            for &tau in &patch.fine_elements {
                let tri = mesh.triangles()[tau];
                let ke = element_stiffness(&mesh.corners(tau), setup.fine.coefficient(tau)).unwrap();
                for a in 0..3 {
                    for b in 0..3 {
                        if let (Some(i), Some(j)) = (pos(tri[a]), pos(tri[b])) {
                            k[(i, j)] += ke[(a, b)];
                        }
                    }
                }
            }
            for d in 0..2 {
                let mut rhs = DVector::zeros(n);
                for &tau in setup.hier.children(t) {
                    let tri = mesh.triangles()[tau];
                    let g = mesh.barycentric_gradients(tau).unwrap();
                    let ae = setup.fine.coefficient(tau).column(d).into_owned();
                    for a in 0..3 {
                        if let Some(i) = pos(tri[a]) {
                            rhs[i] -= mesh.area(tau) * ae.dot(&g[a]);
                        }
                    }
                }
                let kr = z.transpose() * &k * &z;
                let yr = kr.cholesky().unwrap().solve(&(z.transpose() * rhs));
                let w = &z * yr;
                assert!(max_diff(&c.values[d], &w) <= 1e-9, "owner {t} direction {d}");
            }
        }
    }

    #[test]
    fn identical_patches_share_factorization_without_changing_results() {
        let setup = model_setup(2, 8);
        let shared = compute_correctors(&setup, Strategy::Constrained, LayerSpec::Full).unwrap();
        for t in 0..setup.hier.coarse().num_triangles() {
            let patch = build_patch(&setup.hier, t, LayerSpec::Full).unwrap();
            let (c, _) = solve_corrector_strategy3(&setup, &patch).unwrap();
            assert_eq!(c, shared.correctors[t]);
        }
    }

    #[test]
    fn correction_is_linear_and_vanishes_on_zero() {
        let setup = model_setup(4, 16);
        for strategy in Strategy::ALL {
            let basis = compute_correctors(&setup, strategy, LayerSpec::Coarse(1)).unwrap();
            let op = CorrectionOperator::new(Arc::new(basis));
            let coarse = setup.hier.coarse();
            let zero = FeFunction::zeros(coarse);
            let q0 = op.apply(&setup, &zero).unwrap();
            for t in 0..setup.hier.fine().num_triangles() {
                assert_eq!(q0.element_values(t), [0.0; 3]);
            }
            let mut u = FeFunction::interpolate(coarse, |p| (3.0 * p.x).sin() * p.y * (1.0 - p.y) * p.x * (1.0 - p.x));
            u.zero_boundary();
            let mut u2 = u.clone();
            u2.values_mut().iter_mut().for_each(|x| *x *= 2.0);
            let q1 = op.apply(&setup, &u).unwrap();
            let q2 = op.apply(&setup, &u2).unwrap();
            let diff = q2.axpy(-2.0, &q1).unwrap();
            for t in 0..setup.hier.fine().num_triangles() {
                assert!(diff.element_values(t).iter().all(|x| x.abs() < 1e-14));
            }
            assert_eq!(op.target() == TargetSpace::Conforming, strategy == Strategy::Constrained);
        }
    }

    #[test]
    fn hat_correction_support_stays_in_patch_union() {
        let setup = model_setup(4, 16);
        let basis = Arc::new(compute_correctors(&setup, Strategy::Constrained, LayerSpec::Coarse(1)).unwrap());
        let coarse = setup.hier.coarse();
        let fine = setup.hier.fine();
        let z = 2 * 5 + 2;
        let mut hat = FeFunction::zeros(coarse);
        hat.values_mut()[z] = 1.0;
        let q = apply_correction(&setup, &basis, &hat).unwrap();
        let q = q.as_conforming().unwrap();
        let mut allowed = vec![false; fine.num_vertices()];
        for &t in coarse.vertex_triangles(z) {
            for &tau in &basis.patches[t].fine_elements {
                for &v in &fine.triangles()[tau] {
                    allowed[v] = true;
                }
            }
        }
        let mut support = 0;
        for (v, &x) in q.values().iter().enumerate() {
            if x != 0.0 {
                support += 1;
                assert!(allowed[v], "vertex {v} outside the patch union");
            }
        }
        assert!(support > 0);
    }

    #[test]
    fn parallel_and_serial_runs_agree_bitwise() {
        let setup = model_setup(4, 16);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| compute_correctors(&setup, Strategy::Constrained, LayerSpec::Coarse(1)).unwrap());
        let parallel = compute_correctors(&setup, Strategy::Constrained, LayerSpec::Coarse(1)).unwrap();
        assert_eq!(serial.correctors, parallel.correctors);
    }

    #[test]
    fn strategy_parse_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("4".parse::<Strategy>().is_err());
    }
}
