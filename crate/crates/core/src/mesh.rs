//! Nested uniform triangulations of the unit square.
//!
//! Every lattice cell `(i, j)` is split along the diagonal from `(i, j)` to
//! `(i + 1, j + 1)`. Vertices are numbered row-major (`j * (n + 1) + i`) and
//! triangles cell by cell, the lower triangle of a cell first.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Point2, Vector2};

use crate::error::{Error, Result};

/// A conforming triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Triangulation {
    vertices: Vec<Point2<f64>>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    /// `neighbors[t][e]` is the triangle across edge `e = (v[e], v[(e + 1) % 3])`.
    neighbors: Vec<[Option<usize>; 3]>,
    vertex_triangles: Vec<Vec<usize>>,
    mesh_size: f64,
    lattice: Option<usize>,
}

fn signed_area(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
}

impl Triangulation {
    /// Builds a mesh from raw parts, validating orientation and edge manifoldness.
    pub fn from_parts(
        vertices: Vec<Point2<f64>>,
        triangles: Vec<[usize; 3]>,
        boundary: Vec<bool>,
    ) -> Result<Self> {
        if boundary.len() != vertices.len() {
            return Err(Error::invalid(format!(
                "{} boundary flags for {} vertices",
                boundary.len(),
                vertices.len()
            )));
        }
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::invalid("non-finite vertex coordinate"));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::invalid(format!("triangle {t} references a missing vertex")));
            }
            let area = signed_area(&vertices[tri[0]], &vertices[tri[1]], &vertices[tri[2]]);
            if !(area > 0.0) {
                return Err(Error::DegenerateTriangle(t));
            }
        }

        let mut edge_owner: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        let mut neighbors = vec![[None; 3]; triangles.len()];
        for (t, tri) in triangles.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                match edge_owner.get(&key) {
                    None => {
                        edge_owner.insert(key, (t, e));
                    }
                    Some(&(other, oe)) => {
                        if neighbors[other][oe].is_some() {
                            return Err(Error::invalid(format!(
                                "edge ({a}, {b}) is shared by more than two triangles"
                            )));
                        }
                        neighbors[other][oe] = Some(t);
                        neighbors[t][e] = Some(other);
                    }
                }
            }
        }

        let mut vertex_triangles = vec![Vec::new(); vertices.len()];
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                vertex_triangles[v].push(t);
            }
        }

        let mesh_size = triangles
            .iter()
            .flat_map(|tri| {
                (0..3).map(move |e| (tri[e], tri[(e + 1) % 3]))
            })
            .map(|(a, b)| (vertices[a] - vertices[b]).norm())
            .fold(0.0, f64::max);

        Ok(Self {
            vertices,
            triangles,
            boundary,
            neighbors,
            vertex_triangles,
            mesh_size,
            lattice: None,
        })
    }

    pub fn vertices(&self) -> &[Point2<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    pub fn neighbors(&self, t: usize) -> &[Option<usize>; 3] {
        &self.neighbors[t]
    }

    pub fn vertex_triangles(&self, v: usize) -> &[usize] {
        &self.vertex_triangles[v]
    }

    /// Maximal element diameter.
    pub fn mesh_size(&self) -> f64 {
        self.mesh_size
    }

    /// Subdivisions per side for lattice meshes.
    pub fn lattice(&self) -> Option<usize> {
        self.lattice
    }

    /// Number of vertices not on the boundary.
    pub fn num_interior_vertices(&self) -> usize {
        self.boundary.iter().filter(|b| !**b).count()
    }

    pub fn corners(&self, t: usize) -> [Point2<f64>; 3] {
        let tri = self.triangles[t];
        [self.vertices[tri[0]], self.vertices[tri[1]], self.vertices[tri[2]]]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        signed_area(&a, &b, &c)
    }

    pub fn centroid(&self, t: usize) -> Point2<f64> {
        let [a, b, c] = self.corners(t);
        Point2::from((a.coords + b.coords + c.coords) / 3.0)
    }

    /// Gradients of the three barycentric coordinates, constant on the triangle.
    pub fn barycentric_gradients(&self, t: usize) -> Result<[Vector2<f64>; 3]> {
        let [a, b, c] = self.corners(t);
        let area = signed_area(&a, &b, &c);
        if !(area > 0.0) {
            return Err(Error::DegenerateTriangle(t));
        }
        let scale = 1.0 / (2.0 * area);
        let grad = |p: &Point2<f64>, q: &Point2<f64>| Vector2::new(p.y - q.y, q.x - p.x) * scale;
        Ok([grad(&b, &c), grad(&c, &a), grad(&a, &b)])
    }

    /// Barycentric coordinates of `p` with respect to triangle `t`.
    pub fn barycentric(&self, t: usize, p: &Point2<f64>) -> [f64; 3] {
        let [a, b, c] = self.corners(t);
        let total = signed_area(&a, &b, &c);
        [
            signed_area(p, &b, &c) / total,
            signed_area(&a, p, &c) / total,
            signed_area(&a, &b, p) / total,
        ]
    }

    /// Finds a triangle containing `p` together with its barycentric coordinates.
    pub fn locate(&self, p: &Point2<f64>) -> Option<(usize, [f64; 3])> {
        const SLACK: f64 = -1e-12;
        if let Some(n) = self.lattice {
            if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                return None;
            }
            let nf = n as f64;
            let i = ((p.x * nf).floor() as usize).min(n - 1);
            let j = ((p.y * nf).floor() as usize).min(n - 1);
            let s = p.x * nf - i as f64;
            let r = p.y * nf - j as f64;
            let t = 2 * (j * n + i) + usize::from(r > s);
            return Some((t, self.barycentric(t, p)));
        }
        (0..self.triangles.len()).find_map(|t| {
            let lam = self.barycentric(t, p);
            lam.iter().all(|&l| l >= SLACK).then_some((t, lam))
        })
    }

    /// Grows a triangle set by every triangle sharing at least one vertex with it.
    pub fn grow_by_vertex_contact(&self, members: &mut [bool]) -> bool {
        let mut touched = vec![false; self.vertices.len()];
        for (t, &m) in members.iter().enumerate() {
            if m {
                for &v in &self.triangles[t] {
                    touched[v] = true;
                }
            }
        }
        let mut grew = false;
        for (v, _) in touched.iter().enumerate().filter(|(_, &x)| x) {
            for &t in &self.vertex_triangles[v] {
                if !members[t] {
                    members[t] = true;
                    grew = true;
                }
            }
        }
        grew
    }

    /// The element patch `U_k(t)`: `U_0 = {t}`, and each further layer adds every
    /// triangle touching the previous patch, sharing a vertex suffices.
    pub fn element_patch(&self, t: usize, k: usize) -> Result<Vec<usize>> {
        if t >= self.triangles.len() {
            return Err(Error::invalid(format!(
                "element {t} out of range ({} triangles)",
                self.triangles.len()
            )));
        }
        let mut members = vec![false; self.triangles.len()];
        members[t] = true;
        for _ in 0..k {
            if !self.grow_by_vertex_contact(&mut members) {
                break;
            }
        }
        Ok(mask_to_indices(&members))
    }

    /// Structural equality used to check that two functions live on the same mesh.
    pub fn same_mesh(&self, other: &Triangulation) -> bool {
        std::ptr::eq(self, other)
            || (self.lattice.is_some() && self.lattice == other.lattice)
            || (self.vertices == other.vertices && self.triangles == other.triangles)
    }
}

pub(crate) fn mask_to_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Uniform criss-cross triangulation of the unit square with `n` cells per side.
pub fn build_uniform_mesh(n: usize) -> Result<Triangulation> {
    if n == 0 {
        return Err(Error::invalid("a uniform mesh needs at least one subdivision"));
    }
    let nf = n as f64;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    let mut boundary = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push(Point2::new(i as f64 / nf, j as f64 / nf));
            boundary.push(i == 0 || j == 0 || i == n || j == n);
        }
    }
    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    let mut mesh = Triangulation::from_parts(vertices, triangles, boundary)?;
    mesh.lattice = Some(n);
    Ok(mesh)
}

/// A coarse lattice mesh, its uniform refinement and the maps between them.
#[derive(Debug, Clone)]
pub struct RefinementHierarchy {
    coarse: Arc<Triangulation>,
    fine: Arc<Triangulation>,
    ratio: usize,
    children: Vec<Vec<usize>>,
    parent: Vec<usize>,
    coarse_vertex_in_fine: Vec<usize>,
}

impl RefinementHierarchy {
    /// Coarse mesh with `coarse_n` cells per side, each cell split into `ratio²` fine cells.
    pub fn uniform(coarse_n: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::invalid("refinement ratio must be positive"));
        }
        let coarse = Arc::new(build_uniform_mesh(coarse_n)?);
        Self::from_coarse(coarse, ratio)
    }

    fn from_coarse(coarse: Arc<Triangulation>, ratio: usize) -> Result<Self> {
        let n = coarse
            .lattice()
            .ok_or_else(|| Error::invalid("refinement requires a lattice mesh"))?;
        let fine = if ratio == 1 {
            Arc::clone(&coarse)
        } else {
            Arc::new(build_uniform_mesh(n * ratio)?)
        };
        let nf = n * ratio;

        let mut parent = vec![0; fine.num_triangles()];
        let mut children = vec![Vec::with_capacity(2 * ratio * ratio); coarse.num_triangles()];
        for jf in 0..nf {
            for i_f in 0..nf {
                let (ic, jc) = (i_f / ratio, jf / ratio);
                let (li, lj) = (i_f % ratio, jf % ratio);
                for upper in 0..2 {
                    let t = 2 * (jf * nf + i_f) + upper;
                    // Fine diagonals are parallel to the coarse one and never straddle it.
                    let above = lj > li || (lj == li && upper == 1);
                    let pt = 2 * (jc * n + ic) + usize::from(above);
                    parent[t] = pt;
                    children[pt].push(t);
                }
            }
        }
        let coarse_vertex_in_fine = (0..=n)
            .flat_map(|j| (0..=n).map(move |i| (j * ratio) * (nf + 1) + i * ratio))
            .collect();
        Ok(Self {
            coarse,
            fine,
            ratio,
            children,
            parent,
            coarse_vertex_in_fine,
        })
    }

    pub fn coarse(&self) -> &Arc<Triangulation> {
        &self.coarse
    }

    pub fn fine(&self) -> &Arc<Triangulation> {
        &self.fine
    }

    /// Fine cells per coarse cell side.
    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn children(&self, coarse_t: usize) -> &[usize] {
        &self.children[coarse_t]
    }

    pub fn parent(&self, fine_t: usize) -> usize {
        self.parent[fine_t]
    }

    /// Fine vertex index coinciding with coarse vertex `v`.
    pub fn coarse_vertex_in_fine(&self, v: usize) -> usize {
        self.coarse_vertex_in_fine[v]
    }

    /// `U_k(t)` on the coarse mesh.
    pub fn coarse_element_patch(&self, t: usize, k: usize) -> Result<Vec<usize>> {
        self.coarse.element_patch(t, k)
    }
}

/// Refines a lattice mesh `levels` times by uniform bisection of every cell side.
pub fn refine_uniform(coarse: &Arc<Triangulation>, levels: u32) -> Result<RefinementHierarchy> {
    let ratio = 1usize
        .checked_shl(levels)
        .filter(|r| *r > 0)
        .ok_or_else(|| Error::invalid("too many refinement levels"))?;
    RefinementHierarchy::from_coarse(Arc::clone(coarse), ratio)
}
