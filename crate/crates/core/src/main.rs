use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msfem::config::StudyConfig;
use msfem::study::{self, StudyOutput};

#[derive(Parser)]
#[command(name = "msfem", version, about = "Multiscale FEM studies on the unit square")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One end-to-end solve, one CSV row.
    Solve(StudyArgs),
    /// Sweep over coarse sizes with fitted slopes.
    Convergence(StudyArgs),
    /// Strategies 1, 2 and 3 at the same coarse size and layers.
    Compare(StudyArgs),
    /// Tail energies of globally computed strategy 3 correctors.
    Decay(StudyArgs),
    /// Write the uniform mesh with `n` cells per side.
    DumpMesh {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Flags override values from `--config`.
#[derive(Args, Default)]
struct StudyArgs {
    /// `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    /// Coarse subdivisions, comma separated for sweeps.
    #[arg(long)]
    coarse: Option<String>,
    #[arg(long)]
    fine: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    /// pg or symmetric.
    #[arg(long)]
    formulation: Option<String>,
    /// corrected or coarse load for the symmetric formulation.
    #[arg(long)]
    rhs: Option<String>,
    /// Layers as full, fine:L or coarse:k, comma separated.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long = "layers-fine")]
    layers_fine: Option<String>,
    #[arg(long = "layers-coarse")]
    layers_coarse: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    /// direct or cg.
    #[arg(long)]
    solver: Option<String>,
    /// centroid or midpoint.
    #[arg(long)]
    quadrature: Option<String>,
    #[arg(long)]
    output: Option<String>,
    /// Worker threads, 1 for serial runs.
    #[arg(long)]
    parallel: Option<String>,
    #[arg(long = "dump-field")]
    dump_field: Option<String>,
    #[arg(long = "dump-correctors")]
    dump_correctors: Option<String>,
    /// Coarse elements for the decay study.
    #[arg(long)]
    owners: Option<String>,
    #[arg(long = "k-max")]
    k_max: Option<String>,
    #[arg(long)]
    truncation: bool,
}

impl StudyArgs {
    fn into_config(self) -> msfem::Result<StudyConfig> {
        let mut c = StudyConfig::default();
        if let Some(path) = &self.config {
            c.apply_text(&fs::read_to_string(path)?)?;
        }
        let pairs = [
            ("problem", self.problem),
            ("gamma", self.gamma),
            ("coarse", self.coarse),
            ("fine", self.fine),
            ("strategy", self.strategy),
            ("formulation", self.formulation),
            ("rhs", self.rhs),
            ("layers", self.layers),
            ("layers-fine", self.layers_fine),
            ("layers-coarse", self.layers_coarse),
            ("tol", self.tol),
            ("solver", self.solver),
            ("quadrature", self.quadrature),
            ("output", self.output),
            ("parallel", self.parallel),
            ("dump-field", self.dump_field),
            ("dump-correctors", self.dump_correctors),
            ("owners", self.owners),
            ("k-max", self.k_max),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                c.set(key, &v)
                    .map_err(|e| msfem::Error::InvalidArgument(format!("--{key}: {e}")))?;
            }
        }
        if self.truncation {
            c.truncation = true;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run_study(args: StudyArgs, run: fn(&StudyConfig) -> msfem::Result<StudyOutput>) -> msfem::Result<bool> {
    let config = args.into_config()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.parallel {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| msfem::Error::InvalidArgument(format!("thread pool: {e}")))?;
    let out = pool.install(|| run(&config))?;
    if let Some(text) = out.emit(&config)? {
        io::stdout().write_all(text.as_bytes())?;
    }
    Ok(out.all_ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(a) => run_study(a, study::run_solve),
        Command::Convergence(a) => run_study(a, study::run_convergence),
        Command::Compare(a) => run_study(a, study::run_compare),
        Command::Decay(a) => run_study(a, study::run_decay),
        Command::DumpMesh { n, output } => (|| {
            match output {
                Some(p) => study::run_dump_mesh(n, fs::File::create(p)?)?,
                None => study::run_dump_mesh(n, io::stdout().lock())?,
            }
            Ok(true)
        })(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("msfem: {e}");
            ExitCode::from(2)
        }
    }
}
