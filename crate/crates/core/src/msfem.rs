//! Coarse-scale MsFEM systems in Petrov-Galerkin and symmetric form.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;

use crate::correctors::{apply_correction, BrokenField, CorrectedField, CorrectorBasis, Strategy};
use crate::error::{Error, Result};
use crate::fem::FeFunction;
use crate::linalg::{condition_number, csr_mul};
use crate::setup::MultiscaleSetup;

/// Condition estimate above which a Petrov-Galerkin matrix counts as singular.
pub const SINGULAR_CONDITION: f64 = 1e14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Formulation {
    PetrovGalerkin,
    Symmetric,
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Formulation::PetrovGalerkin => "pg",
            Formulation::Symmetric => "symmetric",
        })
    }
}

impl FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pg" => Ok(Formulation::PetrovGalerkin),
            "symmetric" | "sym" => Ok(Formulation::Symmetric),
            other => Err(Error::invalid(format!("unknown formulation '{other}', expected pg or symmetric"))),
        }
    }
}

/// Load used against the test functions of the symmetric formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RhsVariant {
    /// `∫ f (Φ_H + Q Φ_H)`.
    #[default]
    Corrected,
    /// `∫ f Φ_H`, the perturbed right-hand side.
    Coarse,
}

impl fmt::Display for RhsVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RhsVariant::Corrected => "corrected",
            RhsVariant::Coarse => "coarse",
        })
    }
}

impl FromStr for RhsVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "corrected" => Ok(RhsVariant::Corrected),
            "coarse" => Ok(RhsVariant::Coarse),
            other => Err(Error::invalid(format!("unknown rhs variant '{other}', expected corrected or coarse"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MsfemSolution {
    pub strategy: Strategy,
    pub formulation: Formulation,
    pub rhs: RhsVariant,
    /// `u_H` on the coarse mesh.
    pub coarse: FeFunction,
    /// `u_H + Q_h(u_H)` on the fine mesh.
    pub corrected: CorrectedField,
    /// Coarse matrix on the interior coarse nodes, row = test function.
    pub matrix: DMatrix<f64>,
    pub load: DVector<f64>,
    pub condition: f64,
}

impl MsfemSolution {
    /// Number of coarse unknowns.
    pub fn dofs(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Per coarse element: `P = ∫_T A(e_i + ∇w^i)` as columns, `S_ji = ∫_T (e_j+∇w^j)·A(e_i+∇w^i)`,
/// and `r_i = ∫_T f w^i`.
struct ElementBlocks {
    p: Matrix2<f64>,
    s: Matrix2<f64>,
    r: Vector2<f64>,
}

fn element_blocks(setup: &MultiscaleSetup, basis: &CorrectorBasis, t: usize) -> ElementBlocks {
    let fine = setup.hier.fine();
    let c = basis.corrector(t);
    let mut out = ElementBlocks {
        p: Matrix2::zeros(),
        s: Matrix2::zeros(),
        r: Vector2::zeros(),
    };
    for &tau in setup.hier.children(t) {
        let tri = fine.triangles()[tau];
        let g = setup.fine.gradients(tau);
        let a = setup.fine.coefficient(tau);
        let area = setup.fine.area(tau);
        let load = setup.fine.element_load(tau);
        let mut d = [Vector2::x(), Vector2::y()];
        for i in 0..2 {
            for k in 0..3 {
                let w = c.value_at(i, tri[k]);
                d[i] += g[k] * w;
                out.r[i] += load[k] * w;
            }
        }
        for i in 0..2 {
            let ad = a * d[i];
            out.p[(0, i)] += area * ad[0];
            out.p[(1, i)] += area * ad[1];
            for j in 0..2 {
                out.s[(j, i)] += area * d[j].dot(&ad);
            }
        }
    }
    out
}

/// `∫ f Φ_z` for every node, from the assembled fine load.
fn coarse_load(setup: &MultiscaleSetup) -> DVector<f64> {
    let f = setup.fine.load();
    DVector::from_iterator(
        setup.interp.nodes().len(),
        setup
            .interp
            .nodes()
            .iter()
            .map(|&z| setup.interp.hat_in_fine(z).iter().map(|&(v, p)| p * f[v]).sum::<f64>()),
    )
}

/// Assembles the coarse system of strategies 1 and 2 from element blocks.
fn assemble_classical(
    setup: &MultiscaleSetup,
    basis: &CorrectorBasis,
    formulation: Formulation,
    rhs: RhsVariant,
) -> (DMatrix<f64>, DVector<f64>) {
    let coarse = setup.hier.coarse();
    let n = setup.interp.nodes().len();
    let blocks: Vec<ElementBlocks> = (0..coarse.num_triangles())
        .into_par_iter()
        .map(|t| element_blocks(setup, basis, t))
        .collect();
    let mut m = DMatrix::zeros(n, n);
    let mut b = coarse_load(setup);
    for (t, blk) in blocks.iter().enumerate() {
        let tri = coarse.triangles()[t];
        let g = setup.coarse_gradients(t);
        let local = match formulation {
            Formulation::PetrovGalerkin => blk.p,
            Formulation::Symmetric => blk.s,
        };
        for a in 0..3 {
            let Some(row) = setup.interp.node_index(tri[a]) else { continue };
            if formulation == Formulation::Symmetric && rhs == RhsVariant::Corrected {
                b[row] += g[a].dot(&blk.r);
            }
            for c in 0..3 {
                let Some(col) = setup.interp.node_index(tri[c]) else { continue };
                m[(row, col)] += g[a].dot(&(local * g[c]));
            }
        }
    }
    (m, b)
}

/// Corrected basis `Φ_z + Q(Φ_z)` as fine vectors with their supports.
fn conforming_basis(setup: &MultiscaleSetup, basis: &CorrectorBasis) -> Vec<(Vec<usize>, Vec<f64>)> {
    let coarse = setup.hier.coarse();
    let nv = setup.hier.fine().num_vertices();
    setup
        .interp
        .nodes()
        .par_iter()
        .map(|&z| {
            let mut v = vec![0.0; nv];
            let mut touched = vec![false; nv];
            for (f, p) in setup.interp.hat_in_fine(z) {
                v[f] += p;
                touched[f] = true;
            }
            for &t in coarse.vertex_triangles(z) {
                let a = coarse.triangles()[t].iter().position(|&x| x == z).expect("vertex of its triangle");
                let g = setup.coarse_gradients(t)[a];
                let c = basis.corrector(t);
                for (k, &f) in c.dofs.iter().enumerate() {
                    v[f] += g[0] * c.values[0][k] + g[1] * c.values[1][k];
                    touched[f] = true;
                }
            }
            let support: Vec<usize> = (0..nv).filter(|&f| touched[f]).collect();
            (support, v)
        })
        .collect()
}

fn assemble_conforming(
    setup: &MultiscaleSetup,
    basis: &CorrectorBasis,
    rhs: RhsVariant,
) -> (DMatrix<f64>, DVector<f64>, Vec<(Vec<usize>, Vec<f64>)>) {
    let n = setup.interp.nodes().len();
    let phi = conforming_basis(setup, basis);
    let k = setup.fine.stiffness();
    let f = setup.fine.load();
    let nv = setup.hier.fine().num_vertices();
    // Upper triangle only, mirrored below, so the matrix is exactly symmetric.
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|a| {
            let kphi = csr_mul(k, &phi[a].1);
            let mut in_range = vec![false; nv];
            for (v, x) in kphi.iter().enumerate() {
                in_range[v] = *x != 0.0;
            }
            (a..n)
                .map(|b| {
                    let (supp, vals) = &phi[b];
                    supp.iter().filter(|&&v| in_range[v]).map(|&v| kphi[v] * vals[v]).sum()
                })
                .collect()
        })
        .collect();
    let mut m = DMatrix::zeros(n, n);
    for (a, row) in rows.iter().enumerate() {
        for (off, &x) in row.iter().enumerate() {
            m[(a, a + off)] = x;
            m[(a + off, a)] = x;
        }
    }
    let load = match rhs {
        RhsVariant::Corrected => DVector::from_iterator(
            n,
            phi.iter().map(|(supp, vals)| supp.iter().map(|&v| f[v] * vals[v]).sum::<f64>()),
        ),
        RhsVariant::Coarse => coarse_load(setup),
    };
    (m, load, phi)
}

fn expand_nodes(setup: &MultiscaleSetup, x: &DVector<f64>) -> Result<FeFunction> {
    let mut u = FeFunction::zeros(setup.hier.coarse());
    for (&z, &v) in setup.interp.nodes().iter().zip(x.iter()) {
        u.values_mut()[z] = v;
    }
    Ok(u)
}

/// `u_H + Q_h(u_H)` for a coarse solution, conforming or broken by strategy.
pub fn reconstruct(setup: &MultiscaleSetup, basis: &CorrectorBasis, coarse: &FeFunction) -> Result<CorrectedField> {
    let q = apply_correction(setup, basis, coarse)?;
    let base = setup.interp.prolong(coarse)?;
    match q {
        CorrectedField::Conforming(_) => CorrectedField::Conforming(base).axpy(1.0, &q),
        CorrectedField::Broken(_) => CorrectedField::Broken(BrokenField::from_conforming(&base)).axpy(1.0, &q),
    }
}

/// Petrov-Galerkin coarse problem for strategies 1 and 2.
///
/// The system is not symmetric and its solvability is not guaranteed, so a
/// singular or badly conditioned matrix is returned as [`Error::Singular`].
pub fn solve_pg(setup: &MultiscaleSetup, basis: &Arc<CorrectorBasis>) -> Result<MsfemSolution> {
    if basis.strategy == Strategy::Constrained {
        return Err(Error::invalid("the Petrov-Galerkin formulation is available for strategies 1 and 2 only"));
    }
    let (m, b) = assemble_classical(setup, basis, Formulation::PetrovGalerkin, RhsVariant::Coarse);
    let condition = condition_number(&m);
    if !(condition < SINGULAR_CONDITION) {
        return Err(Error::Singular {
            reason: format!("Petrov-Galerkin coarse matrix for strategy {}", basis.strategy),
            condition,
        });
    }
    let x = m.clone().lu().solve(&b).ok_or_else(|| Error::Singular {
        reason: "LU factorization broke down".into(),
        condition,
    })?;
    let coarse = expand_nodes(setup, &x)?;
    let corrected = reconstruct(setup, basis, &coarse)?;
    Ok(MsfemSolution {
        strategy: basis.strategy,
        formulation: Formulation::PetrovGalerkin,
        rhs: RhsVariant::Coarse,
        coarse,
        corrected,
        matrix: m,
        load: b,
        condition,
    })
}

/// Symmetric coarse problem `a(u_H + Q u_H, Φ + Q Φ) = (f, test)` for any strategy.
///
/// A matrix that fails Cholesky factorization is an assembly error.
pub fn solve_symmetric(
    setup: &MultiscaleSetup,
    basis: &Arc<CorrectorBasis>,
    rhs: RhsVariant,
) -> Result<MsfemSolution> {
    let (m, b, phi) = if basis.strategy.is_conforming() {
        let (m, b, phi) = assemble_conforming(setup, basis, rhs);
        (m, b, Some(phi))
    } else {
        let (m, b) = assemble_classical(setup, basis, Formulation::Symmetric, rhs);
        (m, b, None)
    };
    let chol = m.clone().cholesky().ok_or_else(|| {
        Error::NotPositiveDefinite(format!("symmetric coarse matrix for strategy {}", basis.strategy))
    })?;
    let x = chol.solve(&b);
    let condition = condition_number(&m);
    let coarse = expand_nodes(setup, &x)?;
    let corrected = match phi {
        Some(phi) => {
            let mut u = vec![0.0; setup.hier.fine().num_vertices()];
            for ((supp, vals), &c) in phi.iter().zip(x.iter()) {
                for &v in supp {
                    u[v] += c * vals[v];
                }
            }
            CorrectedField::Conforming(FeFunction::from_values(setup.hier.fine(), u)?)
        }
        None => reconstruct(setup, basis, &coarse)?,
    };
    Ok(MsfemSolution {
        strategy: basis.strategy,
        formulation: Formulation::Symmetric,
        rhs,
        coarse,
        corrected,
        matrix: m,
        load: b,
        condition,
    })
}

pub fn solve(
    setup: &MultiscaleSetup,
    basis: &Arc<CorrectorBasis>,
    formulation: Formulation,
    rhs: RhsVariant,
) -> Result<MsfemSolution> {
    match formulation {
        Formulation::PetrovGalerkin => solve_pg(setup, basis),
        Formulation::Symmetric => solve_symmetric(setup, basis, rhs),
    }
}

/// Largest coarse-vertex distance, in lattice steps, between coupled nodes.
pub fn stencil_radius(setup: &MultiscaleSetup, m: &DMatrix<f64>) -> usize {
    let coarse = setup.hier.coarse();
    let h = setup.coarse_step();
    let nodes = setup.interp.nodes();
    let mut r = 0;
    for a in 0..m.nrows() {
        for b in 0..m.ncols() {
            if m[(a, b)] != 0.0 {
                let (p, q) = (coarse.vertices()[nodes[a]], coarse.vertices()[nodes[b]]);
                let d = ((p.x - q.x).abs().max((p.y - q.y).abs()) / h).round() as usize;
                r = r.max(d);
            }
        }
    }
    r
}
