//! Oversampling patches as unions of fine elements.

use std::fmt;

use nalgebra::Point2;

use crate::error::{Error, Result};
use crate::mesh::{mask_to_indices, RefinementHierarchy};

/// How a patch was grown around its owner element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    /// `k` layers of coarse elements, `U_k(T)`.
    Coarse(usize),
    /// `L` layers of fine elements grown from the children of `T`.
    Fine(usize),
    /// The whole domain.
    Full,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Coarse(k) => write!(f, "coarse:{k}"),
            LayerSpec::Fine(l) => write!(f, "fine:{l}"),
            LayerSpec::Full => f.write_str("full"),
        }
    }
}

impl std::str::FromStr for LayerSpec {
    type Err = Error;

    /// `full`, `fine:L`, `coarse:k`, or a bare `L` for fine layers.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let count = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad layer count '{v}'")))
        };
        if s == "full" {
            Ok(LayerSpec::Full)
        } else if let Some(v) = s.strip_prefix("fine:") {
            Ok(LayerSpec::Fine(count(v)?))
        } else if let Some(v) = s.strip_prefix("coarse:") {
            Ok(LayerSpec::Coarse(count(v)?))
        } else {
            Ok(LayerSpec::Fine(count(s)?))
        }
    }
}

impl LayerSpec {
    /// Layer count in fine-grid steps and in coarse layers for a given ratio `H/h`.
    pub fn fine_and_coarse_layers(&self, ratio: usize, coarse_n: usize) -> (f64, f64) {
        match *self {
            LayerSpec::Coarse(k) => ((k * ratio) as f64, k as f64),
            LayerSpec::Fine(l) => (l as f64, l as f64 / ratio as f64),
            // Enough layers to cover the domain from any element.
            LayerSpec::Full => ((2 * coarse_n * ratio) as f64, (2 * coarse_n) as f64),
        }
    }
}

/// An admissible patch `T ⊂ U(T) ⊂ Ω` made of fine elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub owner: usize,
    /// Sorted fine element indices.
    pub fine_elements: Vec<usize>,
    /// Sorted fine vertices in the open patch that are not on the domain boundary.
    pub interior_dofs: Vec<usize>,
    /// Distance from the owner to the patch boundary, domain boundary excluded.
    pub thickness: f64,
    pub layers: LayerSpec,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.fine_elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine_elements.is_empty()
    }

    pub fn contains_element(&self, fine_t: usize) -> bool {
        self.fine_elements.binary_search(&fine_t).is_ok()
    }

    /// Membership mask over all fine elements.
    pub fn element_mask(&self, num_fine: usize) -> Vec<bool> {
        let mut mask = vec![false; num_fine];
        for &t in &self.fine_elements {
            mask[t] = true;
        }
        mask
    }

    fn from_mask(hier: &RefinementHierarchy, owner: usize, mask: &[bool], layers: LayerSpec) -> Self {
        let fine = hier.fine();
        let fine_elements = mask_to_indices(mask);
        let mut incident = vec![0usize; fine.num_vertices()];
        for &t in &fine_elements {
            for &v in &fine.triangles()[t] {
                incident[v] += 1;
            }
        }
        let interior_dofs = (0..fine.num_vertices())
            .filter(|&v| {
                !fine.is_boundary(v)
                    && incident[v] > 0
                    && incident[v] == fine.vertex_triangles(v).len()
            })
            .collect();
        let thickness = patch_thickness(hier, owner, &fine_elements, mask);
        Self {
            owner,
            fine_elements,
            interior_dofs,
            thickness,
            layers,
        }
    }
}

fn check_owner(hier: &RefinementHierarchy, t: usize) -> Result<()> {
    if t < hier.coarse().num_triangles() {
        Ok(())
    } else {
        Err(Error::invalid(format!("coarse element {t} out of range")))
    }
}

/// Children of `U_k(T)`.
pub fn patch_from_coarse_layers(hier: &RefinementHierarchy, t: usize, k: usize) -> Result<Patch> {
    let coarse = hier.coarse_element_patch(t, k)?;
    let mut mask = vec![false; hier.fine().num_triangles()];
    for c in coarse {
        for &f in hier.children(c) {
            mask[f] = true;
        }
    }
    Ok(Patch::from_mask(hier, t, &mask, LayerSpec::Coarse(k)))
}

/// Children of `T` grown `layers` times by fine-element vertex contact.
pub fn patch_from_fine_layers(hier: &RefinementHierarchy, t: usize, layers: usize) -> Result<Patch> {
    check_owner(hier, t)?;
    let fine = hier.fine();
    let mut mask = vec![false; fine.num_triangles()];
    for &f in hier.children(t) {
        mask[f] = true;
    }
    for _ in 0..layers {
        if !fine.grow_by_vertex_contact(&mut mask) {
            break;
        }
    }
    Ok(Patch::from_mask(hier, t, &mask, LayerSpec::Fine(layers)))
}

pub fn full_patch(hier: &RefinementHierarchy, t: usize) -> Result<Patch> {
    check_owner(hier, t)?;
    let mask = vec![true; hier.fine().num_triangles()];
    Ok(Patch::from_mask(hier, t, &mask, LayerSpec::Full))
}

pub fn build_patch(hier: &RefinementHierarchy, t: usize, spec: LayerSpec) -> Result<Patch> {
    match spec {
        LayerSpec::Coarse(k) => patch_from_coarse_layers(hier, t, k),
        LayerSpec::Fine(l) => patch_from_fine_layers(hier, t, l),
        LayerSpec::Full => full_patch(hier, t),
    }
}

/// One patch per coarse element.
pub fn build_patches(hier: &RefinementHierarchy, spec: LayerSpec) -> Result<Vec<Patch>> {
    use rayon::prelude::*;
    (0..hier.coarse().num_triangles())
        .into_par_iter()
        .map(|t| build_patch(hier, t, spec))
        .collect()
}

/// `d_min`: the smallest patch thickness.
pub fn min_thickness(patches: &[Patch]) -> f64 {
    patches.iter().map(|p| p.thickness).fold(f64::INFINITY, f64::min)
}

pub fn max_thickness(patches: &[Patch]) -> f64 {
    patches.iter().map(|p| p.thickness).fold(0.0, f64::max)
}

/// Whether `d_min >= c H log2(1/H)` holds for coarse step `h_coarse`.
pub fn satisfies_log_regime(patches: &[Patch], h_coarse: f64, c: f64) -> bool {
    min_thickness(patches) >= c * h_coarse * (1.0 / h_coarse).log2()
}

fn point_segment_distance(p: &Point2<f64>, a: &Point2<f64>, b: &Point2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 == 0.0 {
        0.0
    } else {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    };
    (p - (a + ab * s)).norm()
}

fn point_in_triangle(p: &Point2<f64>, tri: &[Point2<f64>; 3]) -> bool {
    let cross = |a: &Point2<f64>, b: &Point2<f64>| (b.x - a.x) * (p.y - a.y) - (p.x - a.x) * (b.y - a.y);
    (0..3).all(|e| cross(&tri[e], &tri[(e + 1) % 3]) >= 0.0)
}

/// Distance between a closed triangle and a segment that does not cross its interior.
pub(crate) fn triangle_segment_distance(tri: &[Point2<f64>; 3], a: &Point2<f64>, b: &Point2<f64>) -> f64 {
    if point_in_triangle(a, tri) || point_in_triangle(b, tri) {
        return 0.0;
    }
    let mut d = f64::INFINITY;
    for e in 0..3 {
        let (p, q) = (&tri[e], &tri[(e + 1) % 3]);
        d = d
            .min(point_segment_distance(a, p, q))
            .min(point_segment_distance(b, p, q))
            .min(point_segment_distance(p, a, b));
    }
    d
}

fn patch_thickness(hier: &RefinementHierarchy, owner: usize, elements: &[usize], mask: &[bool]) -> f64 {
    let fine = hier.fine();
    let tri = hier.coarse().corners(owner);
    let mut d = f64::INFINITY;
    let mut any = false;
    for &t in elements {
        let verts = fine.triangles()[t];
        for (e, nb) in fine.neighbors(t).iter().enumerate() {
            if let Some(nb) = nb {
                if !mask[*nb] {
                    any = true;
                    let a = fine.vertices()[verts[e]];
                    let b = fine.vertices()[verts[(e + 1) % 3]];
                    d = d.min(triangle_segment_distance(&tri, &a, &b));
                }
            }
        }
    }
    // Without a relative boundary the patch is the whole domain and the
    // distance is to the empty set.
    if any {
        d
    } else {
        f64::INFINITY
    }
}
