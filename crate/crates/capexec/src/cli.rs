//! The `capexec` command line.
//!
//! Exit statuses:
//!
//! | status | meaning |
//! |---|---|
//! | 0 | success; `check` found no violations |
//! | 1 | `check` found violations |
//! | 64 | usage error |
//! | 65 | invalid or missing declaration, malformed edge, policy or fixture file |
//! | 66 | `check`: binary or edge file unreadable, or not an object file |
//! | 71 | sandbox setup failed |
//! | 73 | cannot create an output file |
//! | 74 | `bench`: scratch space unusable |
//! | 77 | binary does not match the declaration |
//! | other | `run`: the workload's own status, 128 + signal if it was killed |

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use capexec_core::declaration::{parse_declaration, validate_declaration, ServiceDeclaration};
use capexec_core::plan::{build_plan, Backend};
use capexec_core::ServiceKind;

use crate::bench::{self, BenchConfig, Scenario};
use crate::check::{check_binary, CheckOptions};
use crate::providers::Fixtures;
use crate::supervisor::{run_broker_process, SetupError, Supervisor};
use crate::trace::TraceSink;

pub const EX_USAGE: i32 = 64;
pub const EX_DATAERR: i32 = 65;
pub const EX_NOINPUT: i32 = 66;
pub const EX_OSERR: i32 = 71;
pub const EX_CANTCREAT: i32 = 73;
pub const EX_IOERR: i32 = 74;
pub const EX_NOPERM: i32 = 77;

#[derive(Parser, Debug)]
#[command(name = "capexec", version, about = "Run services in a capability sandbox")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a binary under a service declaration.
    Run(RunArgs),
    /// Parse and validate a declaration.
    Validate { declaration: PathBuf },
    /// Report call paths from a binary to syscalls denied in capability mode.
    Check(CheckArgs),
    /// Time sandboxed against unsandboxed runs.
    Bench(BenchArgs),
    #[command(hide = true)]
    Broker(BrokerArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackendArg {
    Simulation,
    Native,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Service declaration file.
    #[arg(long = "service", value_name = "PATH")]
    pub service: PathBuf,
    #[arg(long, value_enum, default_value = "simulation")]
    pub backend: BackendArg,
    /// Write trace events to this file, replacing its contents.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    /// Host and sysctl fixtures for the dns and sysctl brokers.
    #[arg(long, value_name = "PATH")]
    pub fixtures: Option<PathBuf>,
    /// Binary and its arguments.
    #[arg(last = true, required = true, num_args = 1..)]
    pub argv: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    pub binary: PathBuf,
    /// Additional edge files.
    #[arg(long, value_name = "FILE")]
    pub edges: Vec<PathBuf>,
    /// Policy overrides.
    #[arg(long, value_name = "FILE")]
    pub policy: Option<PathBuf>,
    /// Write a draft declaration here.
    #[arg(long, value_name = "PATH")]
    pub emit_declaration: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: ReportFormat,
    /// Library directories searched before the system ones.
    #[arg(long = "lib-path", value_name = "DIR")]
    pub lib_path: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_parser = ["single-file", "many-files", "setup-scaling"])]
    pub scenario: String,
    /// File sizes in MB (single-file).
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<u64>,
    /// File or limit counts (many-files, setup-scaling).
    #[arg(long, value_delimiter = ',')]
    pub counts: Vec<u64>,
    #[arg(long, default_value_t = 10)]
    pub repeat: usize,
    /// Results file; comma-separated with a header row.
    #[arg(long, value_name = "PATH", default_value = "bench-results.csv")]
    pub output: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub scratch: Option<PathBuf>,
    /// Client-linked cat to run; defaults to `capcat` next to this binary.
    #[arg(long, value_name = "PATH")]
    pub cat: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BrokerArgs {
    #[arg(long)]
    pub service: String,
    #[arg(long)]
    pub fd: i32,
    #[arg(long)]
    pub trace_fd: Option<i32>,
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
}

/// Parses the process arguments and runs; returns the exit status.
pub fn main() -> i32 {
    main_from(std::env::args_os())
}

pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EX_USAGE } else { 0 };
        }
    };
    match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Validate { declaration } => cmd_validate(&declaration),
        Command::Check(a) => cmd_check(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Broker(a) => cmd_broker(&a),
    }
}

/// Reads, parses and validates; prints diagnostics. Errors map to 65.
fn load_declaration(path: &Path) -> Result<ServiceDeclaration, i32> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("capexec: {}: {e}", path.display());
        EX_DATAERR
    })?;
    let decl = parse_declaration(&text).map_err(|e| {
        eprintln!("capexec: {}: {e}", path.display());
        EX_DATAERR
    })?;
    let diags = validate_declaration(&decl);
    for d in &diags {
        eprintln!("capexec: {}: {d}", path.display());
    }
    if diags.iter().any(|d| d.is_error()) {
        return Err(EX_DATAERR);
    }
    Ok(decl)
}

pub fn cmd_validate(path: &Path) -> i32 {
    match load_declaration(path) {
        Ok(_) => 0,
        Err(code) => code,
    }
}

pub fn setup_exit_code(err: &SetupError) -> i32 {
    match err {
        SetupError::BinaryMismatch { .. } => EX_NOPERM,
        _ => EX_OSERR,
    }
}

pub fn cmd_run(a: &RunArgs) -> i32 {
    let decl = match load_declaration(&a.service) {
        Ok(d) => d,
        Err(code) => return code,
    };
    let backend = match a.backend {
        BackendArg::Simulation => Backend::Simulation,
        BackendArg::Native => Backend::Native,
    };
    let plan = build_plan(&decl, backend);
    let mut sup = Supervisor::new();
    if let Some(path) = &a.trace {
        match TraceSink::create(path) {
            Ok(sink) => sup = sup.trace(sink),
            Err(e) => {
                eprintln!("capexec: {}: {e}", path.display());
                return EX_CANTCREAT;
            }
        }
    }
    if let Some(path) = &a.fixtures {
        sup = match sup.fixtures_file(path) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("capexec: {e}");
                return EX_DATAERR;
            }
        };
    }
    match sup.run(&plan, &a.argv) {
        Ok(outcome) => outcome.status,
        Err(e) => {
            eprintln!("capexec: {e}");
            setup_exit_code(&e)
        }
    }
}

pub fn cmd_check(a: &CheckArgs) -> i32 {
    let mut search = a.lib_path.clone();
    search.extend(crate::elf::default_search_path());
    let opts = CheckOptions { edges: a.edges.clone(), policy: a.policy.clone(), search_path: search };
    let report = match check_binary(&a.binary, &opts) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("capexec: {e}");
            return e.exit_code();
        }
    };
    match a.format {
        ReportFormat::Text => print!("{}", report.to_text()),
        ReportFormat::Json => print!("{}", report.to_json()),
    }
    if let Some(path) = &a.emit_declaration {
        if let Err(e) = std::fs::write(path, &report.draft.text) {
            eprintln!("capexec: {}: {e}", path.display());
            return EX_CANTCREAT;
        }
    }
    if report.violations.is_empty() {
        0
    } else {
        1
    }
}

pub fn cmd_bench(a: &BenchArgs) -> i32 {
    let scenario = Scenario::parse(&a.scenario).expect("clap restricts values");
    let given = match scenario {
        Scenario::SingleFile => &a.sizes,
        _ => &a.counts,
    };
    let cases = if given.is_empty() { scenario.default_cases() } else { given.clone() };
    if a.repeat == 0 {
        eprintln!("capexec: --repeat must be at least 1");
        return EX_USAGE;
    }
    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("capexec: cannot locate own executable: {e}");
            return EX_OSERR;
        }
    };
    let cat = a.cat.clone().unwrap_or_else(|| exe.with_file_name("capcat"));
    let cfg = BenchConfig {
        scenario,
        cases,
        repeat: a.repeat,
        scratch: a.scratch.clone().unwrap_or_else(std::env::temp_dir),
        broker_exe: exe,
        cat_exe: cat,
    };
    let samples = match bench::run_bench(&cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("capexec: {e}");
            return e.exit_code();
        }
    };
    let file = match std::fs::File::create(&a.output) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("capexec: {}: {e}", a.output.display());
            return EX_CANTCREAT;
        }
    };
    if let Err(e) = bench::write_csv(&samples, file) {
        eprintln!("capexec: {}: {e}", a.output.display());
        return EX_IOERR;
    }
    let summaries = bench::summarize(&samples);
    println!("{}", scenario.name());
    print!("{}", bench::format_table(&summaries));
    for (case, overhead) in bench::relative_overhead(&summaries) {
        println!("overhead {case}: {:.1}%", overhead * 100.0);
    }
    if scenario == Scenario::SetupScaling {
        if let Some(fit) = bench::setup_fit(&summaries) {
            println!("setup fit: {:.3e} s/limit + {:.3e} s, r^2 = {:.4}", fit.slope, fit.intercept, fit.r_squared);
        }
    }
    0
}

pub fn cmd_broker(a: &BrokerArgs) -> i32 {
    let Some(service) = ServiceKind::from_name(&a.service) else {
        eprintln!("capexec broker: unknown service {:?}", a.service);
        return EX_USAGE;
    };
    let fixtures = match &a.fixtures {
        Some(path) => {
            match std::fs::read_to_string(path).map_err(|e| e.to_string()).and_then(|t| Fixtures::parse(&t)) {
                Ok(fx) => Some(fx),
                Err(e) => {
                    eprintln!("capexec broker: {}: {e}", path.display());
                    return EX_DATAERR;
                }
            }
        }
        None => None,
    };
    run_broker_process(service, a.fd, a.trace_fd, fixtures)
}
