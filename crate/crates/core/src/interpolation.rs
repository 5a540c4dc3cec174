//! Clément-type quasi-interpolation `(I_H v)(z) = ∫ v Φ_z / ∫ Φ_z`, the
//! splitting `V_h = V_H ⊕ W_h` with `W_h = ker I_H`, and the constraint rows
//! that localize `W_h` to a patch.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{Error, Result};
use crate::fem::FeFunction;
use crate::linalg::{self, UNMAPPED};
use crate::mesh::RefinementHierarchy;
use crate::patches::Patch;

/// Quasi-interpolation onto the coarse space together with coarse-fine transfer.
#[derive(Debug, Clone)]
pub struct QuasiInterpolator {
    hier: Arc<RefinementHierarchy>,
    /// Fine vertices x coarse vertices, `P[v][z] = Φ_z(x_v)`.
    prolongation: CsrMatrix<f64>,
    /// Interior coarse vertices, the nodes of `V_H`.
    nodes: Vec<usize>,
    node_index: Vec<usize>,
    /// One row per node: fine weights `(M_h P_z) / ∫ Φ_z`.
    weights: CsrMatrix<f64>,
    /// Coarse mass matrix on the nodes, factorized.
    coarse_mass: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    /// Coarse elements whose closure contains each node.
    node_elements: Vec<Vec<usize>>,
}

impl QuasiInterpolator {
    pub fn new(hier: &Arc<RefinementHierarchy>) -> Result<Self> {
        let coarse = hier.coarse();
        let fine = hier.fine();

        let mut p = CooMatrix::new(fine.num_vertices(), coarse.num_vertices());
        for (v, x) in fine.vertices().iter().enumerate() {
            let (t, lam) = coarse
                .locate(x)
                .ok_or_else(|| Error::invalid("fine vertex outside the coarse mesh"))?;
            let tri = coarse.triangles()[t];
            for k in 0..3 {
                // Lattice coordinates are exact; clean round-off on other ratios.
                if lam[k].abs() > 1e-13 {
                    p.push(v, tri[k], lam[k]);
                }
            }
        }
        let prolongation = CsrMatrix::from(&p);

        let nodes: Vec<usize> = (0..coarse.num_vertices())
            .filter(|&z| !coarse.is_boundary(z))
            .collect();
        let node_index = linalg::index_map(&nodes, coarse.num_vertices());

        // Fine mass matrix, exact for products of fine hats with piecewise linears.
        let mut m = CooMatrix::new(fine.num_vertices(), fine.num_vertices());
        for t in 0..fine.num_triangles() {
            let me = crate::fem::element_mass(fine.area(t));
            let tri = fine.triangles()[t];
            for i in 0..3 {
                for j in 0..3 {
                    m.push(tri[i], tri[j], me[(i, j)]);
                }
            }
        }
        let mass = CsrMatrix::from(&m);

        let pt = prolongation.transpose();
        let mut w = CooMatrix::new(nodes.len(), fine.num_vertices());
        let mut node_elements = vec![Vec::new(); nodes.len()];
        for (r, &z) in nodes.iter().enumerate() {
            let integral: f64 = coarse.vertex_triangles(z).iter().map(|&t| coarse.area(t)).sum::<f64>() / 3.0;
            node_elements[r] = coarse.vertex_triangles(z).to_vec();
            let row = pt.row(z);
            let mut dense = std::collections::BTreeMap::new();
            for (&v, &phi) in row.col_indices().iter().zip(row.values()) {
                let mrow = mass.row(v);
                for (&u, &mv) in mrow.col_indices().iter().zip(mrow.values()) {
                    *dense.entry(u).or_insert(0.0) += mv * phi;
                }
            }
            for (u, val) in dense {
                w.push(r, u, val / integral);
            }
        }
        let weights = CsrMatrix::from(&w);

        let mut mh = DMatrix::zeros(nodes.len(), nodes.len());
        for t in 0..coarse.num_triangles() {
            let me = crate::fem::element_mass(coarse.area(t));
            let tri = coarse.triangles()[t];
            for i in 0..3 {
                for j in 0..3 {
                    let (a, b) = (node_index[tri[i]], node_index[tri[j]]);
                    if a != UNMAPPED && b != UNMAPPED {
                        mh[(a, b)] += me[(i, j)];
                    }
                }
            }
        }
        let coarse_mass = nalgebra::Cholesky::new(mh).ok_or_else(|| Error::Singular {
            reason: "coarse Gram matrix of the quasi-interpolation".into(),
            condition: f64::INFINITY,
        })?;

        Ok(Self {
            hier: Arc::clone(hier),
            prolongation,
            nodes,
            node_index,
            weights,
            coarse_mass,
            node_elements,
        })
    }

    pub fn hierarchy(&self) -> &Arc<RefinementHierarchy> {
        &self.hier
    }

    /// Interior coarse vertices.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn node_index(&self, coarse_vertex: usize) -> Option<usize> {
        match self.node_index[coarse_vertex] {
            UNMAPPED => None,
            i => Some(i),
        }
    }

    /// Coarse elements forming `ω_z` for node row `r`.
    pub fn node_elements(&self, r: usize) -> &[usize] {
        &self.node_elements[r]
    }

    pub fn weights(&self) -> &CsrMatrix<f64> {
        &self.weights
    }

    /// Fine nodal values of the coarse hat at coarse vertex `z`, as (vertex, value) pairs.
    pub fn hat_in_fine(&self, z: usize) -> Vec<(usize, f64)> {
        let pt = self.prolongation.transpose();
        let row = pt.row(z);
        row.col_indices().iter().copied().zip(row.values().iter().copied()).collect()
    }

    /// Coarse nodal vector (all coarse vertices) to fine nodal vector.
    pub fn prolong_values(&self, coarse_values: &[f64]) -> Vec<f64> {
        linalg::csr_mul(&self.prolongation, coarse_values)
    }

    pub fn prolong(&self, u: &FeFunction) -> Result<FeFunction> {
        u.check_mesh(self.hier.coarse())?;
        FeFunction::from_values(self.hier.fine(), self.prolong_values(u.values()))
    }

    /// Nodal values `(I_H v)(z)` for every interior coarse node.
    pub fn node_values(&self, fine_values: &[f64]) -> Vec<f64> {
        linalg::csr_mul(&self.weights, fine_values)
    }

    pub fn interpolate(&self, v: &FeFunction) -> Result<FeFunction> {
        v.check_mesh(self.hier.fine())?;
        let nodal = self.node_values(v.values());
        let mut out = vec![0.0; self.hier.coarse().num_vertices()];
        for (&z, x) in self.nodes.iter().zip(nodal) {
            out[z] = x;
        }
        FeFunction::from_values(self.hier.coarse(), out)
    }

    /// Splits `v = P Ψ + w` with `I_H w = 0`; returns `w`.
    ///
    /// `I_H P` is invertible on `V_H`, so `Ψ` is the `L²` projection of `v`.
    pub fn project_to_kernel(&self, v: &FeFunction) -> Result<FeFunction> {
        let coarse_part = self.coarse_component(v)?;
        let pv = self.prolong_values(coarse_part.values());
        let w: Vec<f64> = v.values().iter().zip(&pv).map(|(a, b)| a - b).collect();
        FeFunction::from_values(self.hier.fine(), w)
    }

    /// The `V_H` component `Ψ` of the splitting.
    pub fn coarse_component(&self, v: &FeFunction) -> Result<FeFunction> {
        v.check_mesh(self.hier.fine())?;
        let integrals: Vec<f64> = self
            .nodes
            .iter()
            .map(|&z| {
                self.hier.coarse().vertex_triangles(z).iter().map(|&t| self.hier.coarse().area(t)).sum::<f64>() / 3.0
            })
            .collect();
        // (I_H v)(z) * ∫Φ_z = (v, Φ_z)_{L²}.
        let rhs: Vec<f64> = self
            .node_values(v.values())
            .iter()
            .zip(&integrals)
            .map(|(a, b)| a * b)
            .collect();
        let psi = self.coarse_mass.solve(&DVector::from_vec(rhs));
        let mut out = vec![0.0; self.hier.coarse().num_vertices()];
        for (&z, x) in self.nodes.iter().zip(psi.iter()) {
            out[z] = *x;
        }
        FeFunction::from_values(self.hier.coarse(), out)
    }

    /// Constraint rows describing the localized kernel space on `patch`.
    pub fn build_constraints(&self, patch: &Patch) -> Result<ConstraintBlock> {
        if patch.is_empty() {
            return Err(Error::invalid("empty patch"));
        }
        let coarse = self.hier.coarse();
        let mut touched = vec![false; coarse.num_triangles()];
        for &f in &patch.fine_elements {
            touched[self.hier.parent(f)] = true;
        }
        let active: Vec<usize> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(r, _)| self.node_elements[*r].iter().any(|&t| touched[t]))
            .map(|(r, _)| r)
            .collect();

        let dof_map = linalg::index_map(&patch.interior_dofs, self.hier.fine().num_vertices());
        let mut c = CooMatrix::new(active.len(), patch.interior_dofs.len());
        for (i, &r) in active.iter().enumerate() {
            let row = self.weights.row(r);
            for (&v, &w) in row.col_indices().iter().zip(row.values()) {
                if dof_map[v] != UNMAPPED {
                    c.push(i, dof_map[v], w);
                }
            }
        }
        Ok(ConstraintBlock {
            owner: patch.owner,
            active_nodes: active.iter().map(|&r| self.nodes[r]).collect(),
            active_rows: active,
            dofs: patch.interior_dofs.clone(),
            rows: CsrMatrix::from(&c),
        })
    }
}

/// `C v = 0` iff the zero extension of `v` lies in `ker I_H`.
#[derive(Debug, Clone)]
pub struct ConstraintBlock {
    pub owner: usize,
    /// Active coarse vertices.
    pub active_nodes: Vec<usize>,
    /// Row indices of the active nodes in the interpolator's node list.
    pub active_rows: Vec<usize>,
    /// Fine vertices of the columns.
    pub dofs: Vec<usize>,
    pub rows: CsrMatrix<f64>,
}

impl ConstraintBlock {
    pub fn num_constraints(&self) -> usize {
        self.rows.nrows()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from(&self.rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patches::{build_patch, LayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, r: usize) -> (Arc<RefinementHierarchy>, QuasiInterpolator) {
        let h = Arc::new(RefinementHierarchy::uniform(n, r).unwrap());
        let q = QuasiInterpolator::new(&h).unwrap();
        (h, q)
    }

    fn random_fine(h: &RefinementHierarchy, seed: u64) -> FeFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = FeFunction::interpolate(h.fine(), |_| rng.random_range(-1.0..1.0));
        v.zero_boundary();
        v
    }

    #[test]
    fn zero_maps_to_zero() {
        let (h, q) = setup(4, 4);
        let z = q.interpolate(&FeFunction::zeros(h.fine())).unwrap();
        assert!(z.values().iter().all(|&x| x == 0.0));
    }

    /// High-order quadrature of `∫ φ_fine Φ_coarse / ∫ Φ_coarse`, independent of the mass matrices.
    fn quadrature_oracle(h: &RefinementHierarchy, fine_v: usize, z: usize) -> f64 {
        let fine = h.fine();
        let coarse = h.coarse();
        let hat = |mesh: &crate::mesh::Triangulation, vertex: usize, p: &nalgebra::Point2<f64>| {
            mesh.vertex_triangles(vertex)
                .iter()
                .map(|&t| {
                    let lam = mesh.barycentric(t, p);
                    let k = mesh.triangles()[t].iter().position(|&x| x == vertex).unwrap();
                    if lam.iter().all(|&l| l >= -1e-12) { lam[k].max(0.0) } else { 0.0 }
                })
                .fold(0.0, f64::max)
        };
        let mut num = 0.0;
        // Edge-midpoint rule on a uniform sub-triangulation; the integrand is
        // quadratic on every sub-triangle.
        let m = 3;
        for &t in fine.vertex_triangles(fine_v) {
            let [a, b, c] = fine.corners(t);
            let area = fine.area(t);
            for i in 0..m {
                for j in 0..(m - i) {
                    for upper in 0..2 {
                        if upper == 1 && i + j + 1 >= m {
                            continue;
                        }
                        let (fi, fj) = (i as f64, j as f64);
                        let pts = if upper == 0 {
                            [(fi, fj), (fi + 1.0, fj), (fi, fj + 1.0)]
                        } else {
                            [(fi + 1.0, fj), (fi + 1.0, fj + 1.0), (fi, fj + 1.0)]
                        };
                        for e in 0..3 {
                            let (u0, v0) = pts[e];
                            let (u1, v1) = pts[(e + 1) % 3];
                            let (u, v) = ((u0 + u1) / (2.0 * m as f64), (v0 + v1) / (2.0 * m as f64));
                            let p = a + (b - a) * u + (c - a) * v;
                            num += area / (m * m) as f64 / 3.0 * hat(fine, fine_v, &p) * hat(coarse, z, &p);
                        }
                    }
                }
            }
        }
        let den: f64 = coarse.vertex_triangles(z).iter().map(|&t| coarse.area(t)).sum::<f64>() / 3.0;
        num / den
    }

    #[test]
    fn interpolating_a_fine_hat_matches_quadrature() {
        let (h, q) = setup(4, 2);
        let z = 2 * 5 + 2; // coarse vertex (2, 2)
        let v = h.coarse_vertex_in_fine(z);
        let mut vals = vec![0.0; h.fine().num_vertices()];
        vals[v] = 1.0;
        let hat = FeFunction::from_values(h.fine(), vals).unwrap();
        let ih = q.interpolate(&hat).unwrap();
        let oracle = quadrature_oracle(&h, v, z);
        assert!((ih.values()[z] - oracle).abs() < 1e-12, "{} vs {oracle}", ih.values()[z]);
        // A neighbour node gets a smaller, still positive weight.
        let v2 = v + 1;
        let mut vals = vec![0.0; h.fine().num_vertices()];
        vals[v2] = 1.0;
        let ih2 = q.interpolate(&FeFunction::from_values(h.fine(), vals).unwrap()).unwrap();
        assert!((ih2.values()[z] - quadrature_oracle(&h, v2, z)).abs() < 1e-12);
    }

    #[test]
    fn splitting_properties() {
        let (h, q) = setup(4, 4);
        let v = random_fine(&h, 7);
        let w = q.project_to_kernel(&v).unwrap();
        let ih = q.interpolate(&w).unwrap();
        assert!(ih.values().iter().all(|x| x.abs() < 1e-12));
        // Idempotence.
        let w2 = q.project_to_kernel(&w).unwrap();
        let diff = w.values().iter().zip(w2.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
        // Direct sum reconstructs v.
        let psi = q.coarse_component(&v).unwrap();
        let pv = q.prolong(&psi).unwrap();
        let err = v
            .values()
            .iter()
            .zip(pv.values().iter().zip(w.values()))
            .map(|(a, (b, c))| (a - b - c).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn prolonged_coarse_hats_have_no_kernel_part() {
        let (h, q) = setup(4, 2);
        for &z in q.nodes() {
            let mut c = vec![0.0; h.coarse().num_vertices()];
            c[z] = 1.0;
            let hat = q.prolong(&FeFunction::from_values(h.coarse(), c.clone()).unwrap()).unwrap();
            let w = q.project_to_kernel(&hat).unwrap();
            assert!(w.values().iter().all(|x| x.abs() < 1e-12));
            let psi = q.coarse_component(&hat).unwrap();
            assert!(psi.values().iter().zip(&c).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn kernel_part_is_l2_orthogonal_to_coarse_hats() {
        let (h, q) = setup(4, 4);
        let w = q.project_to_kernel(&random_fine(&h, 9)).unwrap();
        let mass = {
            let mut m = CooMatrix::new(h.fine().num_vertices(), h.fine().num_vertices());
            for t in 0..h.fine().num_triangles() {
                let me = crate::fem::element_mass(h.fine().area(t));
                let tri = h.fine().triangles()[t];
                for i in 0..3 {
                    for j in 0..3 {
                        m.push(tri[i], tri[j], me[(i, j)]);
                    }
                }
            }
            CsrMatrix::from(&m)
        };
        let mw = linalg::csr_mul(&mass, w.values());
        for &z in q.nodes() {
            let pair: f64 = q.hat_in_fine(z).iter().map(|&(v, phi)| phi * mw[v]).sum();
            assert!(pair.abs() < 1e-14, "{pair}");
        }
    }

    #[test]
    fn mesh_mismatch_rejected() {
        let (h, q) = setup(2, 2);
        assert!(q.interpolate(&FeFunction::zeros(h.coarse())).is_err());
    }

    #[test]
    fn constraints_on_the_whole_domain() {
        let (h, q) = setup(4, 2);
        let p = build_patch(&h, 0, LayerSpec::Full).unwrap();
        let c = q.build_constraints(&p).unwrap();
        assert_eq!(c.active_nodes, q.nodes());
        assert_eq!(c.dofs.len(), h.fine().num_interior_vertices());
    }

    #[test]
    fn constraints_inside_one_element_brute_force() {
        let (h, q) = setup(4, 4);
        let t = 2 * (1 * 4 + 1);
        let p = build_patch(&h, t, LayerSpec::Coarse(0)).unwrap();
        let c = q.build_constraints(&p).unwrap();
        // Brute force: nodes whose hat support shares positive area with the patch.
        let mut expected: Vec<usize> = q
            .nodes()
            .iter()
            .copied()
            .filter(|&z| {
                p.fine_elements.iter().any(|&f| {
                    let c = h.fine().centroid(f);
                    let (ct, lam) = h.coarse().locate(&c).unwrap();
                    let k = h.coarse().triangles()[ct].iter().position(|&x| x == z);
                    k.is_some_and(|k| lam[k] > 0.0)
                })
            })
            .collect();
        expected.sort();
        let mut got = c.active_nodes.clone();
        got.sort();
        assert_eq!(got, expected);
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn kernel_of_constraints_extends_into_kernel() {
        let (h, q) = setup(4, 4);
        let p = build_patch(&h, 13, LayerSpec::Coarse(1)).unwrap();
        let c = q.build_constraints(&p).unwrap();
        let dense = c.to_dense();
        // Project a random vector onto ker C.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DVector::from_fn(dense.ncols(), |_, _| rng.random_range(-1.0..1.0));
        let cct = &dense * dense.transpose();
        let lam = cct.cholesky().unwrap().solve(&(&dense * &x));
        let w = &x - dense.transpose() * lam;
        let mut full = vec![0.0; h.fine().num_vertices()];
        for (i, &v) in c.dofs.iter().enumerate() {
            full[v] = w[i];
        }
        let ih = q.node_values(&full);
        assert!(ih.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn empty_patch_rejected() {
        let (h, q) = setup(2, 2);
        let mut p = build_patch(&h, 0, LayerSpec::Coarse(0)).unwrap();
        p.fine_elements.clear();
        assert!(q.build_constraints(&p).is_err());
    }
}
