//! `slicekit` command-line front end.
//!
//! Every check subcommand builds one [`CheckSpec`] and hands it to the
//! runner; `corpus run` replays the built-in examples.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use slicekit::corpus::{self, CorpusRun};
use slicekit::dynamics::{integrate, Method};
use slicekit::report::CheckReport;
use slicekit::runner::{execute, Outcome, RunOptions};
use slicekit::sysdef::{CheckSpec, Model};
use slicekit::Error;

#[derive(Parser, Debug)]
#[command(
    name = "slicekit",
    version,
    about = "Verify slicings, constants of the motion and Hamilton-Jacobi conditions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Args, Debug)]
struct Common {
    /// System definition file (TOML).
    #[arg(long, conflicts_with = "corpus")]
    system: Option<PathBuf>,
    /// Use a built-in corpus entry instead of a file.
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ConstantMode {
    Infinitesimal,
    Integral,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ClassifyMode {
    Classify,
    LagrangianSlicing,
    ClassicalHj,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FibredMode {
    Fibred,
    Isotropy,
    Theorem6,
    VerticalBlock,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PoissonKind {
    Structure,
    Jacobi,
    Lagrangian,
    Theorem5,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SodeMode {
    Reconstruct,
    SecondOrder,
    Lemma8,
    Lemma8Converse,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum IntegrateMethod {
    Rk45,
    Rk4,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Slicing residual of a declared slicing, or tangency of a bare map.
    CheckSlicing {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "map")]
        slicing: Option<String>,
        #[arg(long, conflicts_with = "slicing")]
        map: Option<String>,
        /// Target field `Z`.
        #[arg(long)]
        field: String,
        /// Reparameterize the slicing by this map before checking.
        #[arg(long, requires = "slicing")]
        gauge: Option<String>,
    },
    /// Complete-slicing check with optional coverage estimate.
    CheckComplete {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        complete: String,
        #[arg(long)]
        field: String,
        #[arg(long)]
        coverage_samples: Option<usize>,
    },
    /// Constant of the motion, given directly or recovered from a complete slicing.
    CheckConstant {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "complete")]
        map: Option<String>,
        #[arg(long, conflicts_with = "map")]
        complete: Option<String>,
        #[arg(long)]
        field: String,
        #[arg(long, value_enum, default_value_t = ConstantMode::Infinitesimal)]
        mode: ConstantMode,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        checkpoints: Option<usize>,
        #[arg(long)]
        integrator_tolerance: Option<f64>,
    },
    /// Hamilton-Jacobi residual of a slicing of a symplectic system.
    HjResidual {
        #[command(flatten)]
        common: Common,
        /// Symplectic structure name.
        #[arg(long)]
        structure: String,
        #[arg(long)]
        slicing: String,
    },
    /// Isotropic/coisotropic/Lagrangian classification and related checks.
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        structure: String,
        #[arg(long, value_enum, default_value_t = ClassifyMode::Classify)]
        mode: ClassifyMode,
        #[arg(long)]
        map: Option<String>,
        /// Base space of the generating function (classical-hj).
        #[arg(long)]
        base: Option<String>,
        /// Generating function `W` on the base (classical-hj).
        #[arg(long)]
        potential: Option<String>,
    },
    /// Fibred slicings, fibre isotropy and the fibred HJ equivalence.
    CheckFibred {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fibration: String,
        #[arg(long, value_enum, default_value_t = FibredMode::Fibred)]
        mode: FibredMode,
        #[arg(long)]
        map: Option<String>,
        #[arg(long)]
        field: Option<String>,
        #[arg(long)]
        structure: Option<String>,
    },
    /// Pairwise brackets of a list of functions.
    Involution {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        structure: String,
        #[arg(long = "function", required = true)]
        functions: Vec<String>,
    },
    /// Checks on an almost-Poisson structure.
    PoissonCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        structure: String,
        #[arg(long, value_enum, default_value_t = PoissonKind::Jacobi)]
        kind: PoissonKind,
        #[arg(long)]
        map: Option<String>,
        /// Test functions for the Jacobi identity (default: coordinates).
        #[arg(long = "function")]
        functions: Vec<String>,
    },
    /// Second-order fields on a tangent bundle.
    ReconstructSode {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = SodeMode::Reconstruct)]
        mode: SodeMode,
        #[arg(long)]
        sode: Option<String>,
        #[arg(long)]
        field: Option<String>,
        #[arg(long)]
        map: Option<String>,
        #[arg(long)]
        complete: Option<String>,
    },
    /// Flow-box complete slicing built from a transversal.
    Straighten {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: String,
        /// Transversal map into the phase space.
        #[arg(long)]
        map: String,
        #[arg(long, num_args = 2, allow_negative_numbers = true, value_names = ["T0", "T1"])]
        t_range: Vec<f64>,
        #[arg(long)]
        integrator_tolerance: Option<f64>,
    },
    /// Built-in example systems.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Integrate a field from one initial point.
    Integrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: String,
        /// Initial point, comma separated.
        #[arg(
            long,
            value_delimiter = ',',
            allow_negative_numbers = true,
            required = true
        )]
        x0: Vec<f64>,
        #[arg(long, allow_negative_numbers = true)]
        t_end: f64,
        #[arg(long, value_enum, default_value_t = IntegrateMethod::Rk45)]
        method: IntegrateMethod,
        /// Fixed step for rk4.
        #[arg(long, default_value_t = 1e-2)]
        step: f64,
        #[arg(long, default_value_t = 1e-10)]
        integrator_tolerance: f64,
    },
}

#[derive(Subcommand, Debug)]
enum CorpusAction {
    /// Run an entry (or `all`) and compare with its expected verdicts.
    Run {
        id: String,
        #[arg(long, default_value_t = 1e-8)]
        tolerance: f64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List entry ids.
    List,
    /// Print the definition file of an entry.
    Show { id: String },
}

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;

/// Errors in the inputs themselves, as opposed to checks that could not
/// be completed.
fn is_usage_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Definition(_) | Error::Unknown { .. } | Error::Io(_) | Error::Parse(_)
    )
}

fn error_exit(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if is_usage_error(e) {
        EXIT_USAGE
    } else {
        EXIT_FAIL
    })
}

fn load_model(c: &Common) -> slicekit::Result<Model> {
    match (&c.system, &c.corpus) {
        (Some(path), None) => Model::from_path(path),
        (None, Some(id)) => corpus::load(id),
        _ => Err(Error::Definition(
            "one of --system or --corpus is required".into(),
        )),
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> slicekit::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn render_report(r: &CheckReport, format: Format) -> slicekit::Result<String> {
    match format {
        Format::Text => Ok(r.to_string()),
        Format::Json => Ok(r.to_json()? + "\n"),
        Format::Csv => r.to_csv(),
    }
}

fn opt<T: ToString>(v: T) -> Option<String> {
    Some(v.to_string())
}

fn base_spec(op: &str, c: &Common) -> CheckSpec {
    CheckSpec {
        label: op.to_string(),
        op: op.to_string(),
        tolerance: Some(c.tolerance),
        samples: Some(c.samples),
        seed: Some(c.seed),
        ..CheckSpec::default()
    }
}

/// Translates a check subcommand into its runner operation.
fn check_spec(cmd: &Command) -> Option<(&Common, CheckSpec)> {
    let (common, spec) = match cmd {
        Command::CheckSlicing {
            common,
            slicing,
            map,
            field,
            gauge,
        } => {
            let op = match (slicing, gauge) {
                (None, _) => "tangency",
                (Some(_), None) => "slicing",
                (Some(_), Some(_)) => "gauge",
            };
            (
                common,
                CheckSpec {
                    slicing: slicing.clone(),
                    map: map.clone(),
                    field: opt(field),
                    phi: gauge.clone(),
                    ..base_spec(op, common)
                },
            )
        }
        Command::CheckComplete {
            common,
            complete,
            field,
            coverage_samples,
        } => (
            common,
            CheckSpec {
                complete: opt(complete),
                field: opt(field),
                coverage_samples: *coverage_samples,
                ..base_spec("complete", common)
            },
        ),
        Command::CheckConstant {
            common,
            map,
            complete,
            field,
            mode,
            horizon,
            checkpoints,
            integrator_tolerance,
        } => {
            let op = if complete.is_some() {
                "constant-from-complete"
            } else {
                "constant"
            };
            (
                common,
                CheckSpec {
                    map: map.clone(),
                    complete: complete.clone(),
                    field: opt(field),
                    mode: Some(match mode {
                        ConstantMode::Infinitesimal => "infinitesimal".into(),
                        ConstantMode::Integral => "integral".into(),
                    }),
                    horizon: *horizon,
                    checkpoints: *checkpoints,
                    integrator_tolerance: *integrator_tolerance,
                    ..base_spec(op, common)
                },
            )
        }
        Command::HjResidual {
            common,
            structure,
            slicing,
        } => (
            common,
            CheckSpec {
                system: opt(structure),
                slicing: opt(slicing),
                ..base_spec("hj-residual", common)
            },
        ),
        Command::Classify {
            common,
            structure,
            mode,
            map,
            base,
            potential,
        } => {
            let op = match mode {
                ClassifyMode::Classify => "classify",
                ClassifyMode::LagrangianSlicing => "lagrangian-slicing",
                ClassifyMode::ClassicalHj => "classical-hj",
            };
            (
                common,
                CheckSpec {
                    system: opt(structure),
                    map: map.clone(),
                    base: base.clone(),
                    potential: potential.clone(),
                    ..base_spec(op, common)
                },
            )
        }
        Command::CheckFibred {
            common,
            fibration,
            mode,
            map,
            field,
            structure,
        } => {
            let op = match mode {
                FibredMode::Fibred => "fibred",
                FibredMode::Isotropy => "fibre-isotropy",
                FibredMode::Theorem6 => "theorem6",
                FibredMode::VerticalBlock => "vertical-block",
            };
            (
                common,
                CheckSpec {
                    fibration: opt(fibration),
                    map: map.clone(),
                    field: field.clone(),
                    system: structure.clone(),
                    ..base_spec(op, common)
                },
            )
        }
        Command::Involution {
            common,
            structure,
            functions,
        } => (
            common,
            CheckSpec {
                system: opt(structure),
                functions: Some(functions.clone()),
                ..base_spec("involution", common)
            },
        ),
        Command::PoissonCheck {
            common,
            structure,
            kind,
            map,
            functions,
        } => {
            let op = match kind {
                PoissonKind::Structure => "structure",
                PoissonKind::Jacobi => "jacobi",
                PoissonKind::Lagrangian => "poisson-lagrangian",
                PoissonKind::Theorem5 => "theorem5",
            };
            (
                common,
                CheckSpec {
                    system: opt(structure),
                    map: map.clone(),
                    functions: (!functions.is_empty()).then(|| functions.clone()),
                    ..base_spec(op, common)
                },
            )
        }
        Command::ReconstructSode {
            common,
            mode,
            sode,
            field,
            map,
            complete,
        } => {
            let op = match mode {
                SodeMode::Reconstruct => "reconstruct-sode",
                SodeMode::SecondOrder => "second-order",
                SodeMode::Lemma8 => "lemma8",
                SodeMode::Lemma8Converse => "lemma8-converse",
            };
            (
                common,
                CheckSpec {
                    sode: sode.clone(),
                    field: field.clone(),
                    map: map.clone(),
                    complete: complete.clone(),
                    ..base_spec(op, common)
                },
            )
        }
        Command::Straighten {
            common,
            field,
            map,
            t_range,
            integrator_tolerance,
        } => (
            common,
            CheckSpec {
                field: opt(field),
                map: opt(map),
                t_range: Some([t_range[0], t_range[1]]),
                integrator_tolerance: *integrator_tolerance,
                ..base_spec("straighten", common)
            },
        ),
        Command::Corpus { .. } | Command::Integrate { .. } => return None,
    };
    Some((common, spec))
}

fn run_check_command(common: &Common, spec: &CheckSpec) -> ExitCode {
    let model = match load_model(common) {
        Ok(m) => m,
        Err(e) => return error_exit(&e),
    };
    let opts = RunOptions {
        tolerance: common.tolerance,
        samples: common.samples,
        seed: common.seed,
    };
    let report = match execute(&model, spec, &opts) {
        Ok(r) => r,
        Err(e) => return error_exit(&e),
    };
    if let Err(e) = render_report(&report, common.format).and_then(|t| emit(&common.out, &t)) {
        return error_exit(&e);
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAIL)
    }
}

fn render_corpus_text(runs: &[CorpusRun]) -> String {
    let mut s = String::new();
    for run in runs {
        s += &format!("== {}: {}\n", run.id, run.title);
        for o in &run.outcomes {
            let max = o
                .report
                .as_ref()
                .map_or(String::from("-"), |r| format!("{:.3e}", r.max));
            let expected = o.expected.map_or(String::from("-"), |e| e.to_string());
            s += &format!(
                "  [{}] {}: {} (expected {}, max {})\n",
                if o.matched { "ok" } else { "MISMATCH" },
                o.label,
                o.outcome,
                expected,
                max
            );
            for m in &o.mismatches {
                s += &format!("      {m}\n");
            }
            if let (Some(e), true) = (&o.error, o.outcome == Outcome::Error) {
                s += &format!("      error: {e}\n");
            }
        }
    }
    let total: usize = runs.iter().map(|r| r.outcomes.len()).sum();
    let matched: usize = runs
        .iter()
        .map(|r| r.outcomes.iter().filter(|o| o.matched).count())
        .sum();
    s += &format!("{matched}/{total} checks reproduced their expected verdicts\n");
    s
}

fn render_corpus_csv(runs: &[CorpusRun]) -> slicekit::Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record([
        "entry", "label", "op", "outcome", "expected", "matched", "max",
    ])
    .map_err(io)?;
    for run in runs {
        for o in &run.outcomes {
            w.write_record([
                run.id.clone(),
                o.label.clone(),
                o.op.clone(),
                o.outcome.to_string(),
                o.expected.map_or(String::new(), |e| e.to_string()),
                o.matched.to_string(),
                o.report
                    .as_ref()
                    .map_or(String::new(), |r| r.max.to_string()),
            ])
            .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

fn run_corpus(action: &CorpusAction) -> ExitCode {
    match action {
        CorpusAction::List => {
            for id in corpus::ids() {
                println!("{id}");
            }
            ExitCode::SUCCESS
        }
        CorpusAction::Show { id } => match corpus::source(id) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => error_exit(&e),
        },
        CorpusAction::Run {
            id,
            tolerance,
            samples,
            seed,
            format,
            out,
        } => {
            let opts = RunOptions {
                tolerance: *tolerance,
                samples: *samples,
                seed: *seed,
            };
            let runs = if id == "all" {
                corpus::run_all(&opts)
            } else {
                corpus::run(id, &opts).map(|r| vec![r])
            };
            let runs = match runs {
                Ok(r) => r,
                Err(e) => return error_exit(&e),
            };
            let text = match format {
                Format::Text => Ok(render_corpus_text(&runs)),
                Format::Json => serde_json::to_string_pretty(&runs)
                    .map(|s| s + "\n")
                    .map_err(|e| Error::Io(e.to_string())),
                Format::Csv => render_corpus_csv(&runs),
            };
            if let Err(e) = text.and_then(|t| emit(out, &t)) {
                return error_exit(&e);
            }
            if runs.iter().all(|r| r.matched) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAIL)
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_integrate(
    common: &Common,
    field: &str,
    x0: &[f64],
    t_end: f64,
    method: IntegrateMethod,
    step: f64,
    integrator_tolerance: f64,
) -> ExitCode {
    let result = load_model(common).and_then(|m| {
        let sys = m.dynamical_system(field)?;
        let method = match method {
            IntegrateMethod::Rk45 => Method::Rk45 {
                tolerance: integrator_tolerance,
            },
            IntegrateMethod::Rk4 => Method::Rk4 { step },
        };
        let traj = integrate(&sys, x0, t_end, method)?;
        let text = match common.format {
            Format::Csv => traj.to_csv(sys.space().coords())?,
            Format::Json => {
                serde_json::to_string_pretty(&traj).map_err(|e| Error::Io(e.to_string()))? + "\n"
            }
            Format::Text => {
                let mut s = format!(
                    "{} from {:?} to t = {}: {} accepted, {} rejected steps\n",
                    traj.method,
                    x0,
                    traj.final_time(),
                    traj.accepted_steps,
                    traj.rejected_steps
                );
                s += &format!("final state {:?}\n", traj.last());
                if let Some(reason) = &traj.exited_domain {
                    s += &format!("stopped early: {reason}\n");
                }
                s
            }
        };
        emit(&common.out, &text)?;
        Ok(traj.completed())
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAIL),
        Err(e) => error_exit(&e),
    }
}

fn configure_threads() {
    if let Ok(v) = std::env::var("SLICEKIT_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                // only fails if a pool was already built, which cannot happen here
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => eprintln!("warning: ignoring SLICEKIT_THREADS={v:?}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    if let Some((common, spec)) = check_spec(&cli.command) {
        return run_check_command(common, &spec);
    }
    match &cli.command {
        Command::Corpus { action } => run_corpus(action),
        Command::Integrate {
            common,
            field,
            x0,
            t_end,
            method,
            step,
            integrator_tolerance,
        } => run_integrate(
            common,
            field,
            x0,
            *t_end,
            *method,
            *step,
            *integrator_tolerance,
        ),
        _ => unreachable!("check subcommands are handled above"),
    }
}
