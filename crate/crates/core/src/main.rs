use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dersite::config::{execute, prepare, read_case, write_outputs, ConfigError, RunError, StudyConfig};
use dersite::load::{cluster_profile, LoadError, LoadProfile};
use dersite::net::CaseError;
use dersite::opf::{kkt_residual, solve_opf, validity_range, OpfError, OpfOptions};
use dersite::placement::{DerMode, DerUnit, StudyError};

macro_rules! out {
    ($out:expr, $($arg:tt)*) => {
        $out.push_str(&format!($($arg)*))
    };
}

macro_rules! outln {
    ($out:expr, $($arg:tt)*) => {{
        $out.push_str(&format!($($arg)*));
        $out.push('\n');
    }};
}

#[derive(Parser)]
#[command(
    name = "dersite",
    version,
    about = "DER siting from sampled AC-OPF nodal prices"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the studies described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Parse a case, solve it at peak load and print residuals and prices.
    Validate { case: PathBuf },
    /// Largest injection at a bus that keeps the binding set unchanged.
    Range {
        case: PathBuf,
        #[arg(long)]
        bus: u32,
        /// Probe size, MW.
        #[arg(long)]
        cap: f64,
        /// Probe reactive size as a fraction of its active size.
        #[arg(long, default_value_t = 0.0)]
        q_ratio: f64,
        #[arg(long, value_enum, default_value_t = Dispatch::NonDispatchablePq)]
        mode: Dispatch,
    },
    /// Cluster a load profile and print the levels as CSV.
    Cluster {
        profile: PathBuf,
        #[arg(short, default_value_t = 50)]
        k: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Dispatch {
    NonDispatchablePq,
    DispatchableQ,
    DispatchablePq,
}

impl From<Dispatch> for DerMode {
    fn from(d: Dispatch) -> Self {
        match d {
            Dispatch::NonDispatchablePq => DerMode::NonDispatchablePq,
            Dispatch::DispatchableQ => DerMode::DispatchableQ,
            Dispatch::DispatchablePq => DerMode::DispatchablePq,
        }
    }
}

/// One-line failure: `error[<class>]: <message>`, and the exit code.
struct Failure {
    class: &'static str,
    message: String,
    code: u8,
}

impl Failure {
    fn input(class: &'static str, message: impl ToString) -> Self {
        Self {
            class,
            message: message.to_string(),
            code: 2,
        }
    }

    fn study(class: &'static str, message: impl ToString) -> Self {
        Self {
            class,
            message: message.to_string(),
            code: 1,
        }
    }
}

fn case_class(e: &CaseError) -> &'static str {
    match e {
        CaseError::Syntax { .. } => "case-syntax",
        CaseError::Semantic(_) => "case-semantic",
        CaseError::Unsupported(_) => "case-unsupported",
        CaseError::Schema { .. } => "case-schema",
        CaseError::InvalidArgument(_) => "case-argument",
    }
}

fn opf_class(e: &OpfError) -> &'static str {
    match e {
        OpfError::Case(c) => case_class(c),
        OpfError::Infeasible { .. } => "opf-infeasible",
        OpfError::IterationLimit { .. } => "opf-iteration-limit",
        OpfError::BindingSetChanged { .. } => "opf-binding-set-changed",
        OpfError::NoGenerator => "opf-no-generator",
        OpfError::UnknownBus(_) | OpfError::InvalidArgument(_) => "argument",
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let class = match &e {
            ConfigError::Io { .. } => "io",
            ConfigError::Parse { .. } | ConfigError::Invalid(_) => "config",
            ConfigError::Case { source, .. } => case_class(source),
            ConfigError::Profile { .. } => "profile",
        };
        Failure::input(class, e)
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => c.into(),
            RunError::Write { .. } => Failure::study("io", e),
            RunError::Study { ref source, .. } => {
                let class = match source {
                    StudyError::Mcs(_) => "study-mcs",
                    StudyError::Placement(_) => "study-placement",
                    StudyError::Mismatched(_) => "study",
                };
                Failure::study(class, e)
            }
            RunError::Compare(_) => Failure::study("study", e),
        }
    }
}

fn cmd_run(config: PathBuf, out: &mut String) -> Result<(), Failure> {
    let cfg = StudyConfig::load(&config)?;
    let prepared = prepare(&cfg)?;
    let outcome = execute(&cfg, &prepared)?;
    let files = write_outputs(&cfg, &prepared, &outcome)?;
    for run in &outcome.runs {
        out!(out, "{}", run.plan.to_table());
        out.push('\n');
    }
    if outcome.runs.len() > 1 {
        out!(out, "{}", outcome.comparison.to_text());
    }
    outln!(out, "wrote {} files to {}", files.len(), cfg.output_dir.display());
    Ok(())
}

fn cmd_validate(path: PathBuf, out: &mut String) -> Result<(), Failure> {
    let case = read_case(&path)?;
    let opts = OpfOptions::default();
    let sol = solve_opf(&case, &opts).map_err(opf_failure)?;
    sol.require_converged().map_err(opf_failure)?;
    let kkt = kkt_residual(&case, &sol).map_err(opf_failure)?;
    let ok = kkt.max() <= opts.kkt_tol;
    outln!(
        out,
        "{} {}: {} buses, {} branches, {} generators, {} load buses",
        if ok { "OK" } else { "WARN" },
        case.name,
        case.n_buses(),
        case.n_branches(),
        case.n_generators(),
        case.n_load_buses()
    );
    outln!(
        out,
        "objective {:.6} $/h, {} iterations",
        sol.objective,
        sol.iterations
    );
    outln!(
        out,
        "kkt residuals: stationarity {:.3e}, feasibility {:.3e}, complementarity {:.3e}",
        kkt.stationarity,
        kkt.feasibility,
        kkt.complementarity
    );
    let lam = sol
        .lambda_p
        .iter()
        .map(|l| format!("{l:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    outln!(out, "lambda_p = ({lam})");
    for (b, l) in case.buses.iter().zip(&sol.lambda_p) {
        outln!(out, "  bus {:>4}  {:>12.6} $/MWh", b.id, l);
    }
    if sol.binding_set.is_empty() {
        outln!(out, "binding: none");
    } else {
        let ids: Vec<String> = sol.binding_set.iter().map(ToString::to_string).collect();
        outln!(out, "binding: {}", ids.join("; "));
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::study(
            "opf-kkt",
            format!("KKT residual {:.3e} above tolerance", kkt.max()),
        ))
    }
}

fn opf_failure(e: OpfError) -> Failure {
    match opf_class(&e) {
        c @ ("argument" | "case-syntax" | "case-semantic" | "case-unsupported" | "case-schema"
        | "case-argument") => Failure::input(c, e),
        c => Failure::study(c, e),
    }
}

fn cmd_range(
    path: PathBuf,
    bus: u32,
    cap: f64,
    q_ratio: f64,
    mode: Dispatch,
    out: &mut String,
) -> Result<(), Failure> {
    let case = read_case(&path)?;
    let probe = DerUnit::new(cap, cap * q_ratio, mode.into());
    let r = validity_range(&case, bus, &probe, &OpfOptions::default()).map_err(opf_failure)?;
    outln!(
        out,
        "bus {}: delta_p_max = {:.3} MW (cap {} MW, {} solves)",
        r.bus,
        r.delta_p_max,
        r.cap,
        r.solves
    );
    if r.reached_cap() {
        outln!(out, "binding set unchanged up to the cap");
    }
    for c in &r.left {
        outln!(out, "{c} leaves binding set");
    }
    for c in &r.entered {
        outln!(out, "{c} enters binding set");
    }
    Ok(())
}

fn cmd_cluster(path: PathBuf, k: usize, output: Option<PathBuf>, out: &mut String) -> Result<(), Failure> {
    let profile_err = |e: LoadError| Failure::input("profile", format!("{}: {e}", path.display()));
    // peak is irrelevant for the levels
    let profile = LoadProfile::read_csv(&path, 1.0).map_err(profile_err)?;
    let model = cluster_profile(&profile, k).map_err(profile_err)?;
    let mut buf = Vec::new();
    model.write_csv(&mut buf).map_err(profile_err)?;
    match output {
        Some(out) => dersite::config::write_atomic(&out, &buf)
            .map_err(|e| Failure::study("io", format!("{}: {e}", out.display())))?,
        None => out!(out, "{}", String::from_utf8_lossy(&buf)),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = String::new();
    let result = match cli.command {
        Command::Run { config } => cmd_run(config, &mut out),
        Command::Validate { case } => cmd_validate(case, &mut out),
        Command::Range {
            case,
            bus,
            cap,
            q_ratio,
            mode,
        } => cmd_range(case, bus, cap, q_ratio, mode, &mut out),
        Command::Cluster { profile, k, output } => cmd_cluster(profile, k, output, &mut out),
    };
    // a closed pipe (`dersite ... | head`) is not an error
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout.write_all(out.as_bytes()).and_then(|_| stdout.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error[io]: stdout: {e}");
            return ExitCode::from(1);
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.class, f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
