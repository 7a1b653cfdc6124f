//! Paired sandboxed/unsandboxed timing runs over generated inputs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use capexec_core::declaration::{
    parse_declaration, FileArgsGrant, FileOperation, OpenFlag, ResourceGrant, Right, ServiceDeclaration,
};
use capexec_core::plan::{build_plan, Backend};
use serde::Serialize;

use crate::client::{ENV_CHANNELS, ENV_MODE, ENV_TRACE_FD};
use crate::supervisor::{wait_rusage, SetupError, StdoutMode, Supervisor};

pub const CSV_HEADER: [&str; 6] = ["scenario", "case", "mode", "run", "seconds", "peak_rss_bytes"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scenario {
    SingleFile,
    ManyFiles,
    SetupScaling,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::SingleFile => "single-file",
            Scenario::ManyFiles => "many-files",
            Scenario::SetupScaling => "setup-scaling",
        }
    }

    pub fn parse(s: &str) -> Option<Scenario> {
        [Scenario::SingleFile, Scenario::ManyFiles, Scenario::SetupScaling].into_iter().find(|x| x.name() == s)
    }

    /// Sizes in MB, file counts, or limit counts.
    pub fn default_cases(self) -> Vec<u64> {
        match self {
            Scenario::SingleFile => vec![1, 10, 100],
            Scenario::ManyFiles => vec![10, 100, 1000],
            Scenario::SetupScaling => vec![1, 10, 100, 1000],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Unsandboxed,
    Sandboxed,
    /// Sandboxed setup only: launch until the workload starts.
    Setup,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Unsandboxed => "unsandboxed",
            Mode::Sandboxed => "sandboxed",
            Mode::Setup => "setup",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sample {
    pub scenario: &'static str,
    pub case: u64,
    pub mode: Mode,
    pub run: usize,
    pub seconds: f64,
    pub peak_rss_bytes: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("scratch space: {0}")]
    Scratch(std::io::Error),
    #[error("sandbox setup: {0}")]
    Setup(#[from] SetupError),
    #[error("cannot run {path}: {source}")]
    Spawn { path: PathBuf, source: std::io::Error },
    #[error("workload failed with status {0}")]
    WorkloadFailed(i32),
}

impl BenchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Scratch(_) => 74,
            _ => 71,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub scenario: Scenario,
    pub cases: Vec<u64>,
    pub repeat: usize,
    pub scratch: PathBuf,
    /// The `capexec` executable, for brokers.
    pub broker_exe: PathBuf,
    /// A client-linked cat (`capcat`).
    pub cat_exe: PathBuf,
}

/// Scratch directory that is removed when dropped.
struct Scratch(PathBuf);

impl Scratch {
    fn new(parent: &Path, tag: &str) -> std::io::Result<Scratch> {
        let dir = parent.join(format!("capexec-bench-{}-{tag}", std::process::id()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        Ok(Scratch(dir))
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn write_sized(path: &Path, bytes: u64) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let block: Vec<u8> = (0..65536u32).map(|i| (i.wrapping_mul(2654435761) >> 24) as u8).collect();
    let mut left = bytes;
    while left > 0 {
        let n = left.min(block.len() as u64) as usize;
        f.write_all(&block[..n])?;
        left -= n as u64;
    }
    f.flush()
}

fn make_files(dir: &Path, count: u64) -> std::io::Result<Vec<String>> {
    (0..count)
        .map(|i| {
            let p = dir.join(format!("f{i:05}"));
            std::fs::File::create(&p)?;
            Ok(p.to_string_lossy().into_owned())
        })
        .collect()
}

fn fileargs_declaration(binary: &Path, files: &[String]) -> ServiceDeclaration {
    let mut decl = ServiceDeclaration::new(binary.to_string_lossy());
    decl.set_grant(ResourceGrant::FileArgs(FileArgsGrant {
        operations: [FileOperation::Open].into_iter().collect(),
        flags: [OpenFlag::RdOnly].into_iter().collect(),
        rights: [Right::Read, Right::Fstat].into_iter().collect(),
        filenames: files.to_vec(),
    }));
    decl
}

/// One unsandboxed execution: (wall time, peak rss bytes).
pub fn run_plain(argv: &[String]) -> Result<(Duration, u64), BenchError> {
    let spawn_err = |source| BenchError::Spawn { path: PathBuf::from(&argv[0]), source };
    let start = Instant::now();
    let child = Command::new(&argv[0])
        .args(&argv[1..])
        .env_remove(ENV_CHANNELS)
        .env_remove(ENV_MODE)
        .env_remove(ENV_TRACE_FD)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .spawn()
        .map_err(spawn_err)?;
    let (status, _, rss) = wait_rusage(child.id() as i32).map_err(spawn_err)?;
    let elapsed = start.elapsed();
    if status != 0 {
        return Err(BenchError::WorkloadFailed(status));
    }
    Ok((elapsed, rss))
}

/// One sandboxed execution under the native backend:
/// (wall time, setup time, workload + broker peak rss).
pub fn run_sandboxed(
    decl: &ServiceDeclaration,
    argv: &[String],
    broker_exe: &Path,
) -> Result<(Duration, Duration, u64), BenchError> {
    let plan = build_plan(decl, Backend::Native);
    let sup = Supervisor::new().broker_exe(broker_exe).stdout(StdoutMode::Null);
    let out = sup.run(&plan, argv)?;
    if out.status != 0 {
        return Err(BenchError::WorkloadFailed(out.status));
    }
    Ok((out.wall_time, out.setup_time, out.peak_rss_total()))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<Sample>, BenchError> {
    let mut samples = Vec::new();
    for &case in &cfg.cases {
        let scratch =
            Scratch::new(&cfg.scratch, &format!("{}-{case}", cfg.scenario.name())).map_err(BenchError::Scratch)?;
        let files = match cfg.scenario {
            Scenario::SingleFile => {
                let p = scratch.0.join("input.bin");
                write_sized(&p, case * 1024 * 1024).map_err(BenchError::Scratch)?;
                vec![p.to_string_lossy().into_owned()]
            }
            Scenario::ManyFiles | Scenario::SetupScaling => {
                make_files(&scratch.0, case).map_err(BenchError::Scratch)?
            }
        };
        let decl = fileargs_declaration(&cfg.cat_exe, &files);
        let mut argv = vec![cfg.cat_exe.to_string_lossy().into_owned()];
        match cfg.scenario {
            Scenario::SetupScaling => argv.push(files[0].clone()),
            _ => argv.extend(files.iter().cloned()),
        }
        // One untimed pass of each to warm the page cache and the loader.
        run_plain(&argv)?;
        run_sandboxed(&decl, &argv, &cfg.broker_exe)?;
        for run in 0..cfg.repeat {
            let scenario = cfg.scenario.name();
            let (t, rss) = run_plain(&argv)?;
            samples.push(Sample {
                scenario,
                case,
                mode: Mode::Unsandboxed,
                run,
                seconds: t.as_secs_f64(),
                peak_rss_bytes: rss,
            });
            let (t, setup, rss) = run_sandboxed(&decl, &argv, &cfg.broker_exe)?;
            samples.push(Sample {
                scenario,
                case,
                mode: Mode::Sandboxed,
                run,
                seconds: t.as_secs_f64(),
                peak_rss_bytes: rss,
            });
            samples.push(Sample {
                scenario,
                case,
                mode: Mode::Setup,
                run,
                seconds: setup.as_secs_f64(),
                peak_rss_bytes: rss,
            });
        }
    }
    Ok(samples)
}

pub fn write_csv(samples: &[Sample], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for s in samples {
        w.write_record([
            s.scenario.to_string(),
            s.case.to_string(),
            s.mode.name().to_string(),
            s.run.to_string(),
            format!("{:.6}", s.seconds),
            s.peak_rss_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub case: u64,
    pub mode: Mode,
    pub mean: f64,
    pub stddev: f64,
    pub median: f64,
    pub mean_rss: f64,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

pub fn summarize(samples: &[Sample]) -> Vec<Summary> {
    let mut groups: BTreeMap<(u64, Mode), Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.case, s.mode)).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|((case, mode), group)| {
            let n = group.len() as f64;
            let mut secs: Vec<f64> = group.iter().map(|s| s.seconds).collect();
            let mean = secs.iter().sum::<f64>() / n;
            let var =
                if group.len() > 1 { secs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            let mean_rss = group.iter().map(|s| s.peak_rss_bytes as f64).sum::<f64>() / n;
            Summary { case, mode, mean, stddev: var.sqrt(), median: median(&mut secs), mean_rss }
        })
        .collect()
}

pub fn format_table(summaries: &[Summary]) -> String {
    let mut out = format!(
        "{:>8}  {:<12} {:>12} {:>12} {:>12} {:>14}\n",
        "case", "mode", "mean_s", "stddev_s", "median_s", "mean_rss_kb"
    );
    for s in summaries {
        out.push_str(&format!(
            "{:>8}  {:<12} {:>12.6} {:>12.6} {:>12.6} {:>14.0}\n",
            s.case,
            s.mode.name(),
            s.mean,
            s.stddev,
            s.median,
            s.mean_rss / 1024.0
        ));
    }
    out
}

/// Relative overhead of the sandboxed median over the unsandboxed median,
/// per case.
pub fn relative_overhead(summaries: &[Summary]) -> Vec<(u64, f64)> {
    let by: BTreeMap<(u64, Mode), f64> = summaries.iter().map(|s| ((s.case, s.mode), s.median)).collect();
    let cases: std::collections::BTreeSet<u64> = summaries.iter().map(|s| s.case).collect();
    cases
        .into_iter()
        .filter_map(|c| {
            let plain = by.get(&(c, Mode::Unsandboxed))?;
            let boxed = by.get(&(c, Mode::Sandboxed))?;
            Some((c, (boxed - plain) / plain))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<LinearFit> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Some(LinearFit { slope, intercept, r_squared })
}

/// Setup-time fit over per-case medians of the `setup` rows.
pub fn setup_fit(summaries: &[Summary]) -> Option<LinearFit> {
    let pts: Vec<(f64, f64)> =
        summaries.iter().filter(|s| s.mode == Mode::Setup).map(|s| (s.case as f64, s.median)).collect();
    linear_fit(&pts)
}

/// Peak memory of `workload` run plainly and with 1..=4 brokers
/// (fileargs, dns, net, sysctl in that order). Index 0 is the plain run.
pub fn memory_by_brokers(workload: &Path, broker_exe: &Path, repeat: usize) -> Result<Vec<u64>, BenchError> {
    let blocks = [
        "\"system.fileargs\": {operations: \"OPEN\", flags: \"RDONLY\", cap_rights: \"READ\", filename: \"/dev/null\"}",
        "\"system.dns\": {family: AF_INET}",
        "\"system.net\": {host: \"localhost\", family: AF_INET}",
        "\"system.sysctl\": {\"kernel.ostype\": {type: \"mib\", flag: \"CAP_SYSCTL_READ\"}}",
    ];
    let argv = vec![workload.to_string_lossy().into_owned()];
    let mean = |xs: Vec<u64>| xs.iter().sum::<u64>() / xs.len().max(1) as u64;
    let mut out = Vec::new();
    let plain: Result<Vec<u64>, _> = (0..repeat.max(1)).map(|_| run_plain(&argv).map(|r| r.1)).collect();
    out.push(mean(plain?));
    for k in 1..=blocks.len() {
        let text = format!("{{ binary: \"{}\"\n{}\n}}", argv[0], blocks[..k].join("\n"));
        let decl = parse_declaration(&text).expect("memory declarations parse");
        let runs: Result<Vec<u64>, _> =
            (0..repeat.max(1)).map(|_| run_sandboxed(&decl, &argv, broker_exe).map(|r| r.2)).collect();
        out.push(mean(runs?));
    }
    Ok(out)
}
