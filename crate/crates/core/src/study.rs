//! Study orchestration and CSV emission for the command line harness.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::analysis::{decay_profile, error_norms, fit_rate, ErrorReport};
use crate::config::StudyConfig;
use crate::correctors::{CorrectedField, Strategy};
use crate::dump::{write_field, write_mesh};
use crate::error::{Error, Result};
use crate::fem::FeFunction;
use crate::msfem::{self, Formulation, MsfemSolution};
use crate::patches::LayerSpec;
use crate::problem::problem_by_name;
use crate::setup::{MultiscaleSetup, SolveOptions};

pub const CSV_HEADER: &str = "problem,H,h,fine_layers,k,strategy,formulation,err_l2,err_h1_semi,err_h1_full,err_coarse_l2,dofs_coarse,dofs_fine,status,runtime_ms";

pub const DECAY_HEADER: &str = "problem,H,h,owner,direction,k,tail_energy,truncation_error,rate,fit_residual,status";

/// One CSV row of a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub problem: String,
    pub coarse_n: usize,
    pub fine_n: usize,
    pub layers: LayerSpec,
    pub strategy: Strategy,
    pub formulation: Formulation,
    pub errors: Option<ErrorReport>,
    pub dofs_coarse: usize,
    pub dofs_fine: usize,
    /// `ok`, or `error:<stage>:<message>`.
    pub status: String,
    pub runtime_ms: u128,
}

impl StudyRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn coarse_step(&self) -> f64 {
        1.0 / self.coarse_n as f64
    }

    pub fn fine_step(&self) -> f64 {
        1.0 / self.fine_n as f64
    }

    pub fn csv_row(&self) -> String {
        let (fl, k) = self
            .layers
            .fine_and_coarse_layers(self.fine_n / self.coarse_n, self.coarse_n);
        let e = |f: fn(&ErrorReport) -> f64| self.errors.as_ref().map_or(String::new(), |r| format!("{:e}", f(r)));
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.problem,
            self.coarse_step(),
            self.fine_step(),
            fl,
            k,
            self.strategy,
            self.formulation,
            e(|r| r.l2),
            e(|r| r.h1_semi),
            e(|r| r.h1_full),
            e(|r| r.coarse_l2),
            self.dofs_coarse,
            self.dofs_fine,
            self.status,
            self.runtime_ms
        )
    }
}

fn status_for(stage: &str, e: &Error) -> String {
    let msg: String = e.to_string().chars().map(|c| if c == ',' || c == '\n' { ';' } else { c }).collect();
    format!("error:{stage}:{msg}")
}

/// Everything computed by one end-to-end solve.
pub struct SolveOutcome {
    pub record: StudyRecord,
    pub reference: Option<FeFunction>,
    pub solution: Option<MsfemSolution>,
}

fn options(config: &StudyConfig) -> SolveOptions {
    SolveOptions {
        solver: config.solver,
        tol: config.tol,
        quadrature: config.quadrature,
    }
}

fn build_setup(config: &StudyConfig, coarse_n: usize) -> Result<MultiscaleSetup> {
    let problem = problem_by_name(&config.problem, config.gamma)?;
    MultiscaleSetup::new(problem, coarse_n, config.fine, options(config))
}

/// Mesh, reference, patches, correctors, coarse solve and errors for one `(H, layers, strategy)`.
pub fn solve_case(
    setup: &MultiscaleSetup,
    reference: Option<&FeFunction>,
    config: &StudyConfig,
    layers: LayerSpec,
    strategy: Strategy,
) -> SolveOutcome {
    let start = Instant::now();
    let formulation = config.formulation_for(strategy);
    let mut record = StudyRecord {
        problem: config.problem.clone(),
        coarse_n: setup.hier.coarse().lattice().unwrap_or(0),
        fine_n: config.fine,
        layers,
        strategy,
        formulation,
        errors: None,
        dofs_coarse: setup.interp.nodes().len(),
        dofs_fine: setup.fine.dofs().len(),
        status: "ok".into(),
        runtime_ms: 0,
    };
    let mut outcome = SolveOutcome {
        record: record.clone(),
        reference: None,
        solution: None,
    };
    let run = |record: &mut StudyRecord, outcome: &mut SolveOutcome| -> std::result::Result<(), String> {
        let uh = match reference {
            Some(u) => u.clone(),
            None => setup.reference().map_err(|e| status_for("reference", &e))?,
        };
        let basis = setup
            .correctors(strategy, layers)
            .map_err(|e| status_for("correctors", &e))?;
        let sol = msfem::solve(setup, &basis, formulation, config.rhs).map_err(|e| status_for("coarse", &e))?;
        record.errors = Some(error_norms(setup, &uh, &sol).map_err(|e| status_for("errors", &e))?);
        outcome.reference = Some(uh);
        outcome.solution = Some(sol);
        Ok(())
    };
    if let Err(status) = run(&mut record, &mut outcome) {
        record.status = status;
    }
    record.runtime_ms = start.elapsed().as_millis();
    outcome.record = record;
    outcome
}

/// Vertex values of a corrected field; broken fields are averaged over incident elements.
pub fn vertex_values(field: &CorrectedField) -> Vec<f64> {
    match field {
        CorrectedField::Conforming(u) => u.values().to_vec(),
        CorrectedField::Broken(b) => {
            let mesh = b.mesh();
            let mut sum = vec![0.0; mesh.num_vertices()];
            let mut count = vec![0usize; mesh.num_vertices()];
            for (t, tri) in mesh.triangles().iter().enumerate() {
                let v = b.element_values(t);
                for k in 0..3 {
                    sum[tri[k]] += v[k];
                    count[tri[k]] += 1;
                }
            }
            sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn csv(header: &str, rows: &[String]) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    out
}

/// CSV text and whether every row succeeded.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    pub csv: String,
    pub all_ok: bool,
    pub records: Vec<StudyRecord>,
}

impl StudyOutput {
    fn from_records(records: Vec<StudyRecord>, extra: Vec<(String, bool)>) -> Self {
        let mut rows: Vec<String> = records.iter().map(StudyRecord::csv_row).collect();
        let mut all_ok = records.iter().all(StudyRecord::is_ok);
        for (row, ok) in extra {
            rows.push(row);
            all_ok &= ok;
        }
        Self {
            csv: csv(CSV_HEADER, &rows),
            all_ok,
            records,
        }
    }

    /// Writes the CSV to the configured output, or returns it for stdout.
    pub fn emit(&self, config: &StudyConfig) -> Result<Option<&str>> {
        match &config.output {
            Some(p) => {
                write_text(p, &self.csv)?;
                Ok(None)
            }
            None => Ok(Some(&self.csv)),
        }
    }
}

fn unstarted(config: &StudyConfig, coarse_n: usize, layers: LayerSpec, strategy: Strategy, e: &Error) -> StudyRecord {
    StudyRecord {
        problem: config.problem.clone(),
        coarse_n: coarse_n.max(1),
        fine_n: config.fine,
        layers,
        strategy,
        formulation: config.formulation_for(strategy),
        errors: None,
        dofs_coarse: 0,
        dofs_fine: 0,
        status: status_for("setup", e),
        runtime_ms: 0,
    }
}

fn dump_outputs(config: &StudyConfig, setup: &MultiscaleSetup, outcome: &SolveOutcome) -> Result<()> {
    if let (Some(path), Some(sol)) = (&config.dump_field, &outcome.solution) {
        let mut text = Vec::new();
        write_field(&vertex_values(&sol.corrected), &mut text)?;
        write_text(path, &String::from_utf8_lossy(&text))?;
    }
    if let Some(dir) = &config.dump_correctors {
        let layers = outcome.record.layers;
        let basis = setup.correctors(outcome.record.strategy, layers)?;
        fs::create_dir_all(dir)?;
        let nv = setup.hier.fine().num_vertices();
        for (t, c) in basis.correctors.iter().enumerate() {
            for i in 0..2 {
                let mut text = Vec::new();
                write_field(&c.extend(i, nv), &mut text)?;
                fs::write(dir.join(format!("corrector_{t}_{}.txt", i + 1)), text)?;
            }
        }
    }
    Ok(())
}

pub fn run_solve(config: &StudyConfig) -> Result<StudyOutput> {
    config.validate()?;
    let (coarse_n, layers) = config.sweep()[0];
    let record = match build_setup(config, coarse_n) {
        Ok(setup) => {
            let outcome = solve_case(&setup, None, config, layers, config.strategy);
            if outcome.record.is_ok() {
                dump_outputs(config, &setup, &outcome)?;
            }
            outcome.record
        }
        Err(e) => unstarted(config, coarse_n, layers, config.strategy, &e),
    };
    Ok(StudyOutput::from_records(vec![record], Vec::new()))
}

fn reference_for(config: &StudyConfig) -> Option<FeFunction> {
    // The reference only depends on the fine mesh, so one solve serves a whole sweep.
    build_setup(config, config.fine).ok()?.reference().ok()
}

/// One row per `(H, layers)` plus `slope` rows fitted over the successful ones.
pub fn run_convergence(config: &StudyConfig) -> Result<StudyOutput> {
    config.validate()?;
    if config.coarse.len() < 3 {
        return Err(Error::invalid("a convergence sweep needs at least three coarse sizes"));
    }
    let reference = reference_for(config);
    let mut records = Vec::new();
    for (n, layers) in config.sweep() {
        records.push(match build_setup(config, n) {
            Ok(setup) => solve_case(&setup, reference.as_ref(), config, layers, config.strategy).record,
            Err(e) => unstarted(config, n, layers, config.strategy, &e),
        });
    }
    let ok: Vec<&StudyRecord> = records.iter().filter(|r| r.is_ok()).collect();
    let h: Vec<f64> = ok.iter().map(|r| r.coarse_step()).collect();
    let pick = |f: fn(&ErrorReport) -> f64| -> Vec<f64> { ok.iter().map(|r| f(r.errors.as_ref().expect("ok rows have errors"))).collect() };
    let slopes = [
        fit_rate(&h, &pick(|r| r.l2)),
        fit_rate(&h, &pick(|r| r.h1_semi)),
        fit_rate(&h, &pick(|r| r.h1_full)),
        fit_rate(&h, &pick(|r| r.coarse_l2)),
    ];
    let slope_ok = slopes.iter().all(|s| s.is_ok());
    let cell = |s: &Result<f64>| s.as_ref().map_or(String::new(), |v| format!("{v:e}"));
    let status = match slopes.iter().find_map(|s| s.as_ref().err()) {
        None => "ok".to_string(),
        Some(e) => status_for("fit", e),
    };
    let row = format!(
        "{},slope,,,,{},{},{},{},{},{},,,{},0",
        config.problem,
        config.strategy,
        config.formulation_for(config.strategy),
        cell(&slopes[0]),
        cell(&slopes[1]),
        cell(&slopes[2]),
        cell(&slopes[3]),
        status
    );
    Ok(StudyOutput::from_records(records, vec![(row, slope_ok)]))
}

/// Strategies 1, 2 and 3 side by side at the first `(H, layers)` of the config.
pub fn run_compare(config: &StudyConfig) -> Result<StudyOutput> {
    config.validate()?;
    let (n, layers) = config.sweep()[0];
    let records = match build_setup(config, n) {
        Ok(setup) => {
            let reference = setup.reference().ok();
            Strategy::ALL
                .iter()
                .map(|&s| solve_case(&setup, reference.as_ref(), config, layers, s).record)
                .collect()
        }
        Err(e) => Strategy::ALL.iter().map(|&s| unstarted(config, n, layers, s, &e)).collect(),
    };
    Ok(StudyOutput::from_records(records, Vec::new()))
}

/// Coarse elements with no vertex on the boundary, `count` of them spread over the index range.
pub fn interior_owners(setup: &MultiscaleSetup, count: usize) -> Vec<usize> {
    let coarse = setup.hier.coarse();
    let interior: Vec<usize> = (0..coarse.num_triangles())
        .filter(|&t| coarse.triangles()[t].iter().all(|&v| !coarse.is_boundary(v)))
        .collect();
    if interior.len() <= count {
        return interior;
    }
    (0..count).map(|j| interior[(2 * j + 1) * interior.len() / (2 * count)]).collect()
}

/// Decay CSV: one row per `(owner, direction, k)`.
pub fn run_decay(config: &StudyConfig) -> Result<StudyOutput> {
    config.validate()?;
    let n = config.coarse[0];
    let mut rows = Vec::new();
    let mut all_ok = true;
    let h = 1.0 / n as f64;
    let hf = 1.0 / config.fine as f64;
    match build_setup(config, n) {
        Err(e) => {
            all_ok = false;
            rows.push(format!("{},{h},{hf},,,,,,,,{}", config.problem, status_for("setup", &e)));
        }
        Ok(setup) => {
            let owners = if config.owners.is_empty() { interior_owners(&setup, 5) } else { config.owners.clone() };
            match setup.correctors(Strategy::Constrained, LayerSpec::Full) {
                Err(e) => {
                    all_ok = false;
                    rows.push(format!("{},{h},{hf},,,,,,,,{}", config.problem, status_for("correctors", &e)));
                }
                Ok(basis) => {
                    for &t in &owners {
                        for i in 0..2 {
                            match decay_profile(&setup, &basis, t, i, config.k_max, config.truncation) {
                                Err(e) => {
                                    all_ok = false;
                                    rows.push(format!("{},{h},{hf},{t},{},,,,,,{}", config.problem, i + 1, status_for("decay", &e)));
                                }
                                Ok(p) => {
                                    let status = if p.is_zero() { "zero-corrector" } else { "ok" };
                                    let rate = p.rate.map_or(String::new(), |r| format!("{r:e}"));
                                    for (k, e) in p.tail.iter().enumerate() {
                                        let tr = p.truncation.get(k).map_or(String::new(), |x| format!("{x:e}"));
                                        let mut row = String::new();
                                        write!(
                                            row,
                                            "{},{h},{hf},{t},{},{k},{e:e},{tr},{rate},{:e},{status}",
                                            config.problem,
                                            i + 1,
                                            p.fit_residual
                                        )
                                        .expect("writing to a string");
                                        rows.push(row);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(StudyOutput {
        csv: csv(DECAY_HEADER, &rows),
        all_ok,
        records: Vec::new(),
    })
}

pub fn run_dump_mesh(n: usize, out: impl Write) -> Result<()> {
    let mesh = crate::mesh::build_uniform_mesh(n)?;
    write_mesh(&mesh, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(text: &str) -> StudyConfig {
        StudyConfig::parse(text).unwrap()
    }

    #[test]
    fn header_is_stable() {
        assert_eq!(CSV_HEADER.split(',').count(), 15);
        let out = run_solve(&small("coarse = 2\nfine = 8\nlayers = coarse:1")).unwrap();
        let mut lines = out.csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), 15);
        assert!(out.all_ok, "{row}");
    }

    #[test]
    fn vanishing_correctors_reproduce_coarse_fem_errors() {
        let c = small("problem = constant\nstrategy = 2\nlayers-fine = 0\ncoarse = 4\nfine = 16");
        let out = run_solve(&c).unwrap();
        let r = out.records[0].errors.clone().unwrap();
        // With Q = 0 the corrected field is the prolonged coarse solution.
        assert!((r.l2 - r.coarse_l2).abs() < 1e-15);
    }

    #[test]
    fn reruns_match_except_runtime() {
        let c = small("coarse = 4\nfine = 16\nlayers = coarse:1");
        let strip = |s: String| s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
        let a = strip(run_compare(&c).unwrap().csv);
        let b = strip(run_compare(&c).unwrap().csv);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn failures_are_rows_not_panics() {
        let c = small("problem = nonexistent\ncoarse = 2\nfine = 8");
        let out = run_solve(&c).unwrap();
        assert!(!out.all_ok);
        assert!(out.records[0].status.starts_with("error:setup:"));
    }

    #[test]
    fn convergence_appends_slope_row() {
        let c = small("coarse = 2,4,8\nfine = 16\nlayers = full");
        let out = run_convergence(&c).unwrap();
        let last = out.csv.lines().last().unwrap();
        assert!(last.contains(",slope,"));
        assert_eq!(last.split(',').count(), 15);
        assert!(run_convergence(&small("coarse = 2,4\nfine = 16")).is_err());
    }

    #[test]
    fn constant_coefficient_decay_is_reported() {
        let c = small("problem = constant\ncoarse = 4\nfine = 16\nk-max = 2\nowners = 9");
        let out = run_decay(&c).unwrap();
        assert_eq!(out.csv.lines().count(), 1 + 2 * 3);
        assert!(out.all_ok);
    }
}
