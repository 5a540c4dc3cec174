use std::sync::{Arc, OnceLock};

use msfem::analysis::field_errors;
use msfem::config::StudyConfig;
use msfem::correctors::{apply_correction, CorrectedField, CorrectorBasis, Strategy};
use msfem::dump::{parse_field, parse_mesh, write_field, write_mesh};
use msfem::fem::FeFunction;
use msfem::mesh::{build_uniform_mesh, RefinementHierarchy};
use msfem::patches::{build_patch, LayerSpec};
use msfem::problem::model_problem_section5;
use msfem::setup::{MultiscaleSetup, SolveOptions};
use proptest::prelude::*;

fn shared() -> &'static (MultiscaleSetup, [Arc<CorrectorBasis>; 3]) {
    static CELL: OnceLock<(MultiscaleSetup, [Arc<CorrectorBasis>; 3])> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = MultiscaleSetup::new(model_problem_section5(), 4, 16, SolveOptions::default()).unwrap();
        let b = Strategy::ALL.map(|st| s.correctors(st, LayerSpec::Coarse(1)).unwrap());
        (s, b)
    })
}

fn coarse_function(setup: &MultiscaleSetup, values: &[f64]) -> FeFunction {
    let mut u = FeFunction::zeros(setup.hier.coarse());
    for (&z, &x) in setup.interp.nodes().iter().zip(values) {
        u.values_mut()[z] = x;
    }
    u
}

prop_compose! {
    fn node_values()(v in prop::collection::vec(-1.0f64..1.0, 9)) -> Vec<f64> { v }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn correction_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, x in node_values(), y in node_values(), s in 0usize..3) {
        let (setup, bases) = shared();
        let basis = &bases[s];
        let u = coarse_function(setup, &x);
        let v = coarse_function(setup, &y);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = apply_correction(setup, basis, &coarse_function(setup, &combo)).unwrap();
        let qu = apply_correction(setup, basis, &u).unwrap();
        let qv = apply_correction(setup, basis, &v).unwrap();
        let rhs = qu.axpy(b / if a == 0.0 { 1.0 } else { a }, &qv).unwrap();
        for t in 0..setup.hier.fine().num_triangles() {
            let l = lhs.element_values(t);
            let r = if a == 0.0 { qv.element_values(t).map(|z| b * z) } else { rhs.element_values(t).map(|z| a * z) };
            for k in 0..3 {
                prop_assert!((l[k] - r[k]).abs() <= 1e-12 * (1.0 + l[k].abs()));
            }
        }
    }

    #[test]
    fn error_norms_are_homogeneous(s in -10.0f64..10.0, x in node_values()) {
        let (setup, _) = shared();
        let zero = FeFunction::zeros(setup.hier.fine());
        let u = setup.interp.prolong(&coarse_function(setup, &x)).unwrap();
        let mut su = u.clone();
        su.values_mut().iter_mut().for_each(|v| *v *= s);
        let a = field_errors(&setup.fine, &setup.hier, &zero, &CorrectedField::Conforming(u)).unwrap();
        let b = field_errors(&setup.fine, &setup.hier, &zero, &CorrectedField::Conforming(su)).unwrap();
        prop_assert!((b.l2 - s.abs() * a.l2).abs() <= 1e-12 * (1.0 + b.l2));
        prop_assert!((b.h1_semi - s.abs() * a.h1_semi).abs() <= 1e-12 * (1.0 + b.h1_semi));
    }

    #[test]
    fn kernel_part_is_l2_orthogonal_to_coarse_hats(seed in prop::collection::vec(-1.0f64..1.0, 289)) {
        let (setup, _) = shared();
        let mut v = FeFunction::from_values(setup.hier.fine(), seed).unwrap();
        v.zero_boundary();
        let w = setup.interp.project_to_kernel(&v).unwrap();
        let m = setup.fine.mass();
        let mw = msfem::linalg::csr_mul(m, w.values());
        for &z in setup.interp.nodes() {
            let pair: f64 = setup.interp.hat_in_fine(z).iter().map(|&(f, p)| p * mw[f]).sum();
            prop_assert!(pair.abs() < 1e-14);
        }
    }

    #[test]
    fn patches_grow_monotonically(n in 1usize..6, r in 1usize..4, t_seed in 0usize..1000, k in 0usize..4) {
        let hier = RefinementHierarchy::uniform(n, r).unwrap();
        let t = t_seed % hier.coarse().num_triangles();
        let small = build_patch(&hier, t, LayerSpec::Coarse(k)).unwrap();
        let large = build_patch(&hier, t, LayerSpec::Coarse(k + 1)).unwrap();
        prop_assert!(small.fine_elements.iter().all(|f| large.fine_elements.binary_search(f).is_ok()));
        prop_assert!(small.interior_dofs.iter().all(|v| large.interior_dofs.binary_search(v).is_ok()));
        prop_assert!(small.thickness <= large.thickness + 1e-15);
        let fl = build_patch(&hier, t, LayerSpec::Fine(k)).unwrap();
        let fl2 = build_patch(&hier, t, LayerSpec::Fine(k + 1)).unwrap();
        prop_assert!(fl.fine_elements.iter().all(|f| fl2.fine_elements.binary_search(f).is_ok()));
    }

    #[test]
    fn mesh_and_field_dumps_round_trip(n in 1usize..7, vals in prop::collection::vec(-1e6f64..1e6, 0..50)) {
        let mesh = build_uniform_mesh(n).unwrap();
        let mut text = Vec::new();
        write_mesh(&mesh, &mut text).unwrap();
        let back = parse_mesh(std::str::from_utf8(&text).unwrap()).unwrap();
        prop_assert_eq!(back.vertices(), mesh.vertices());
        prop_assert_eq!(back.triangles(), mesh.triangles());
        prop_assert_eq!(back.boundary_flags(), mesh.boundary_flags());
        let mut text = Vec::new();
        write_field(&vals, &mut text).unwrap();
        prop_assert_eq!(parse_field(std::str::from_utf8(&text).unwrap()).unwrap(), vals);
    }

    #[test]
    fn parsers_never_panic(s in "\\PC{0,200}") {
        let _ = parse_mesh(&s);
        let _ = parse_field(&s);
        let _ = StudyConfig::parse(&s);
    }

    #[test]
    fn config_lines_never_panic(key in "[a-z_-]{1,16}", value in "[ -~]{0,24}") {
        let _ = StudyConfig::parse(&format!("{key} = {value}\n"));
    }
}

/// Largest ratio `‖v - I_H v‖_{L²(K)} / (H ‖∇v‖_{L²(ω_K)})` over coarse `K` for a family of smooth `v`.
fn interpolation_constant(coarse_n: usize, fine_n: usize) -> f64 {
    let setup = MultiscaleSetup::new(model_problem_section5(), coarse_n, fine_n, SolveOptions::default()).unwrap();
    let fine = setup.hier.fine();
    let coarse = setup.hier.coarse();
    let h = 1.0 / coarse_n as f64;
    let mut worst: f64 = 0.0;
    for (a, b, c) in [(1.0, 2.0, 0.3), (3.0, 1.0, 1.1), (2.0, 5.0, 2.0), (4.0, 4.0, 0.7)] {
        let v = FeFunction::interpolate(fine, |p| {
            (std::f64::consts::PI * a * p.x).sin() * (std::f64::consts::PI * b * p.y).sin() * (1.0 + 0.5 * (c * p.x + p.y).cos())
        });
        let iv = setup.interp.prolong(&setup.interp.interpolate(&v).unwrap()).unwrap();
        let d: Vec<f64> = v.values().iter().zip(iv.values()).map(|(x, y)| x - y).collect();
        for k in 0..coarse.num_triangles() {
            let mut l2 = 0.0;
            for &tau in setup.hier.children(k) {
                let tri = fine.triangles()[tau];
                let e = nalgebra::Vector3::new(d[tri[0]], d[tri[1]], d[tri[2]]);
                l2 += e.dot(&(msfem::fem::element_mass(setup.fine.area(tau)) * e));
            }
            let mut grad = 0.0;
            for t in setup.hier.coarse_element_patch(k, 1).unwrap() {
                for &tau in setup.hier.children(t) {
                    grad += setup.fine.area(tau) * setup.fine.gradient_of(tau, v.values()).norm_squared();
                }
            }
            if grad > 0.0 {
                worst = worst.max(l2.sqrt() / (h * grad.sqrt()));
            }
        }
    }
    worst
}

#[test]
fn interpolation_constant_is_mesh_independent() {
    let c1 = interpolation_constant(4, 16);
    let c2 = interpolation_constant(4, 32);
    let c3 = interpolation_constant(4, 64);
    assert!(c2 <= 1.05 * c1, "{c1} -> {c2}");
    assert!(c3 <= 1.05 * c2, "{c2} -> {c3}");
}
