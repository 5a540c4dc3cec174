//! Error norms against the fine reference, corrector decay and rate fits.

use rayon::prelude::*;

use crate::correctors::{solve_corrector_strategy3, CorrectedField, CorrectorBasis, Strategy};
use crate::error::{Error, Result};
use crate::fem::{element_mass, Discretization, FeFunction};
use crate::mesh::RefinementHierarchy;
use crate::msfem::MsfemSolution;
use crate::patches::{build_patch, LayerSpec};
use crate::setup::MultiscaleSetup;

/// Tail energies below this are treated as saturated.
pub const ENERGY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub l2: f64,
    /// `(Σ_T ‖∇(u_h - u)‖²_{L²(T)})^{1/2}` with plain gradients.
    pub h1_semi: f64,
    /// `(l2² + h1_semi²)^{1/2}`.
    pub h1_full: f64,
    /// `‖u_h - u_H‖_{L²}` for the coarse part alone.
    pub coarse_l2: f64,
    /// Squared `(L², broken H¹)` contributions per coarse element.
    pub per_element: Vec<[f64; 2]>,
}

/// L² and broken H¹ distances between a conforming reference and any fine field.
pub fn field_errors(
    disc: &Discretization,
    hier: &RefinementHierarchy,
    reference: &FeFunction,
    approx: &CorrectedField,
) -> Result<ErrorReport> {
    let fine = disc.mesh();
    reference.check_mesh(fine)?;
    if !approx.mesh().same_mesh(fine) {
        return Err(Error::MeshMismatch("approximation is not on the reference mesh".into()));
    }
    if !hier.fine().same_mesh(fine) {
        return Err(Error::MeshMismatch("hierarchy fine mesh differs from the reference mesh".into()));
    }
    let u = reference.values();
    let per_element: Vec<[f64; 2]> = (0..hier.coarse().num_triangles())
        .into_par_iter()
        .map(|t| {
            let mut acc = [0.0; 2];
            for &tau in hier.children(t) {
                let tri = fine.triangles()[tau];
                let a = approx.element_values(tau);
                let d = nalgebra::Vector3::new(u[tri[0]] - a[0], u[tri[1]] - a[1], u[tri[2]] - a[2]);
                let area = disc.area(tau);
                acc[0] += d.dot(&(element_mass(area) * d));
                let g = disc.gradients(tau);
                let grad = g[0] * d[0] + g[1] * d[1] + g[2] * d[2];
                acc[1] += area * grad.norm_squared();
            }
            acc
        })
        .collect();
    let l2 = per_element.iter().map(|e| e[0]).sum::<f64>().max(0.0);
    let h1 = per_element.iter().map(|e| e[1]).sum::<f64>();
    Ok(ErrorReport {
        l2: l2.sqrt(),
        h1_semi: h1.sqrt(),
        h1_full: (l2 + h1).sqrt(),
        coarse_l2: 0.0,
        per_element,
    })
}

/// Errors of an MsFEM solution against `u_h`, including the coarse part.
pub fn error_norms(setup: &MultiscaleSetup, reference: &FeFunction, solution: &MsfemSolution) -> Result<ErrorReport> {
    let mut report = field_errors(&setup.fine, &setup.hier, reference, &solution.corrected)?;
    let coarse = CorrectedField::Conforming(setup.interp.prolong(&solution.coarse)?);
    report.coarse_l2 = field_errors(&setup.fine, &setup.hier, reference, &coarse)?.l2;
    Ok(report)
}

/// L² norm of the jump of a field across interior coarse edges.
pub fn coarse_edge_jump(hier: &RefinementHierarchy, field: &CorrectedField) -> f64 {
    let fine = hier.fine();
    let mut total = 0.0;
    for tau in 0..fine.num_triangles() {
        let tri = fine.triangles()[tau];
        for (e, nb) in fine.neighbors(tau).iter().enumerate() {
            let Some(other) = *nb else { continue };
            if other < tau || hier.parent(other) == hier.parent(tau) {
                continue;
            }
            let (a, b) = (tri[e], tri[(e + 1) % 3]);
            let otri = fine.triangles()[other];
            let (mine, theirs) = (field.element_values(tau), field.element_values(other));
            let at = |t: &[usize; 3], vals: &[f64; 3], v: usize| vals[t.iter().position(|&x| x == v).expect("shared vertex")];
            let ja = at(&tri, &mine, a) - at(&otri, &theirs, a);
            let jb = at(&tri, &mine, b) - at(&otri, &theirs, b);
            let len = (fine.vertices()[a] - fine.vertices()[b]).norm();
            total += len / 3.0 * (ja * ja + ja * jb + jb * jb);
        }
    }
    total.sqrt()
}

/// Least-squares slope of `log(error)` against `log(H)`.
pub fn fit_rate(h_values: &[f64], errors: &[f64]) -> Result<f64> {
    if h_values.len() != errors.len() {
        return Err(Error::invalid("step and error lists differ in length"));
    }
    if h_values.len() < 3 {
        return Err(Error::invalid("a rate fit needs at least three points"));
    }
    if h_values.iter().chain(errors).any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::invalid("rate fit needs positive finite steps and errors"));
    }
    let x: Vec<f64> = h_values.iter().map(|h| h.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    Ok(linear_fit(&x, &y).0)
}

/// `(slope, intercept, rms residual)` for `y ≈ slope x + intercept`.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - icpt).powi(2)).sum();
    (slope, icpt, (rss / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayProfile {
    pub owner: usize,
    pub direction: usize,
    /// `E_k = ‖A^{1/2}∇w‖_{L²(Ω∖U_k(T))}` for `k = 0..=k_max`.
    pub tail: Vec<f64>,
    /// Fitted `r` in `E_k ≈ C e^{-r k}` over `k ≥ 1`, if there are enough unsaturated points.
    pub rate: Option<f64>,
    pub fit_residual: f64,
    /// Energy of the localized corrector error `‖A^{1/2}∇(w - w^k)‖` for `k = 0..=k_max`, if requested.
    pub truncation: Vec<f64>,
}

impl DecayProfile {
    /// All tail energies vanish, as for a zero corrector.
    pub fn is_zero(&self) -> bool {
        self.tail.iter().all(|&e| e <= ENERGY_FLOOR)
    }

    /// `E_{k+1} <= E_k + slack` for all `k`.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.tail.windows(2).all(|w| w[1] <= w[0] + slack)
    }

    /// Build a profile from tail energies, fitting over `k ≥ 1` and `E_k > ENERGY_FLOOR`.
    pub fn from_tail(owner: usize, direction: usize, tail: Vec<f64>) -> Self {
        let pts: Vec<(f64, f64)> = tail
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, &e)| e > ENERGY_FLOOR)
            .map(|(k, &e)| (k as f64, e.ln()))
            .collect();
        let (rate, fit_residual) = if pts.len() >= 2 {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let (slope, _, res) = linear_fit(&x, &y);
            (Some(-slope), res)
        } else {
            (None, 0.0)
        };
        Self {
            owner,
            direction,
            tail,
            rate,
            fit_residual,
            truncation: Vec::new(),
        }
    }
}

/// Tail energies of the globally computed corrector `w_T^i` outside the coarse rings `U_k(T)`.
///
/// With `truncation` the corrector is also recomputed on every `U_k(T)` and
/// its energy distance to the global one recorded.
pub fn decay_profile(
    setup: &MultiscaleSetup,
    basis: &CorrectorBasis,
    owner: usize,
    direction: usize,
    k_max: usize,
    truncation: bool,
) -> Result<DecayProfile> {
    if basis.strategy != Strategy::Constrained || basis.layers != LayerSpec::Full {
        return Err(Error::invalid("decay profiles need strategy 3 correctors on the whole domain"));
    }
    if direction > 1 || owner >= basis.correctors.len() {
        return Err(Error::invalid(format!("no corrector ({owner}, {direction})")));
    }
    let nv = setup.hier.fine().num_vertices();
    let w = basis.corrector(owner).extend(direction, nv);
    let coarse_nt = setup.hier.coarse().num_triangles();
    let fine_nt = setup.hier.fine().num_triangles();
    let element_energy: Vec<f64> = (0..fine_nt).map(|tau| setup.fine.element_energy(tau, &w)).collect();

    let mut tail = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let mut inside = vec![false; coarse_nt];
        for t in setup.hier.coarse_element_patch(owner, k)? {
            inside[t] = true;
        }
        let e: f64 = (0..fine_nt)
            .filter(|&tau| !inside[setup.hier.parent(tau)])
            .map(|tau| element_energy[tau])
            .sum();
        tail.push(e.max(0.0).sqrt());
    }
    let mut profile = DecayProfile::from_tail(owner, direction, tail);
    if truncation {
        profile.truncation = (0..=k_max)
            .map(|k| {
                let patch = build_patch(&setup.hier, owner, LayerSpec::Coarse(k))?;
                let (local, _) = solve_corrector_strategy3(setup, &patch)?;
                let mut d = local.extend(direction, nv);
                d.iter_mut().zip(&w).for_each(|(a, b)| *a -= b);
                Ok(setup.fine.energy(&d).max(0.0).sqrt())
            })
            .collect::<Result<_>>()?;
    }
    Ok(profile)
}
