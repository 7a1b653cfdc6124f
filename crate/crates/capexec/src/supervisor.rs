//! Launching a sandboxed run: one broker per granted service, limits
//! installed over each channel, then the workload started in capability
//! mode with the channels as its only route to global namespaces.

use std::collections::BTreeMap;
use std::io::{self, Read};
use std::os::fd::RawFd;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use capexec_core::plan::{Backend, SandboxPlan};
use capexec_core::{ResourceGrant, ServiceKind};

use crate::broker::{describe, limit_message, Broker, PREOPEN_DETAIL};
use crate::channel::{Channel, ChannelError, DEFAULT_TIMEOUT};
use crate::client::{format_channel_spec, ChannelSpec, ClientContext, ENV_CHANNELS, ENV_MODE, ENV_TRACE_FD};
use crate::gateway::{describe_code, Gateway};
use crate::providers::{FixtureSysctl, Fixtures, Resolver, SysctlProvider, SystemResolver, SystemSysctl};
use crate::trace::{ProcessRole, TraceEvent, TraceKind, TraceSink, Tracer};
use crate::workloads::{self, SharedBuffer, Workload, WorkloadIo};

/// Executable used for native brokers when none is configured.
pub const ENV_BROKER_EXE: &str = "CAPEXEC_BROKER_EXE";

#[derive(Debug, thiserror::Error)]
pub enum SetupError {
    #[error("binary {given:?} does not match declared binary {declared:?}")]
    BinaryMismatch { declared: String, given: String },
    #[error("empty command line")]
    EmptyArgv,
    #[error("cannot spawn broker for {service}: {source}")]
    SpawnFailed { service: ServiceKind, source: io::Error },
    #[error("{service} cannot pre-open {name}: {}", describe_code(*code))]
    PreopenFailed { service: ServiceKind, name: String, code: i32 },
    #[error("{service} rejected its limits: {detail}")]
    LimitRejected { service: ServiceKind, detail: String },
    #[error("cannot execute {binary}: {source}")]
    WorkloadExecFailed { binary: String, source: io::Error },
    #[error("no simulated workload for {0:?}")]
    NoSimWorkload(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StdoutMode {
    #[default]
    Inherit,
    Capture,
    Null,
}

/// Whether `given` names the declared binary. Paths must match exactly
/// unless one side is a bare name, in which case basenames are compared.
pub fn binary_matches(declared: &str, given: &str) -> bool {
    let base = |s: &str| s.rsplit('/').next().unwrap_or(s).to_string();
    declared == given || ((!declared.contains('/') || !given.contains('/')) && base(declared) == base(given))
}

pub struct Supervisor {
    trace: TraceSink,
    resolver: Arc<dyn Resolver>,
    sysctl: Arc<dyn SysctlProvider>,
    fixtures_path: Option<PathBuf>,
    broker_exe: Option<PathBuf>,
    stdout: StdoutMode,
    workloads: BTreeMap<String, Arc<dyn Workload>>,
}

impl Default for Supervisor {
    fn default() -> Self {
        Supervisor::new()
    }
}

impl Supervisor {
    pub fn new() -> Self {
        Supervisor {
            trace: TraceSink::null(),
            resolver: Arc::new(SystemResolver),
            sysctl: Arc::new(SystemSysctl::default()),
            fixtures_path: None,
            broker_exe: None,
            stdout: StdoutMode::Inherit,
            workloads: BTreeMap::new(),
        }
    }

    pub fn trace(mut self, sink: TraceSink) -> Self {
        self.trace = sink;
        self
    }

    pub fn providers(mut self, resolver: Arc<dyn Resolver>, sysctl: Arc<dyn SysctlProvider>) -> Self {
        self.resolver = resolver;
        self.sysctl = sysctl;
        self
    }

    /// Uses fixture providers from `path` in every broker.
    pub fn fixtures_file(mut self, path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let fx = Fixtures::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        self.resolver = Arc::new(fx.resolver);
        self.sysctl = Arc::new(FixtureSysctl::new(fx.sysctl));
        self.fixtures_path = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn broker_exe(mut self, path: impl Into<PathBuf>) -> Self {
        self.broker_exe = Some(path.into());
        self
    }

    pub fn stdout(mut self, mode: StdoutMode) -> Self {
        self.stdout = mode;
        self
    }

    /// Registers a simulated workload under a binary basename.
    pub fn workload(mut self, name: &str, workload: Arc<dyn Workload>) -> Self {
        self.workloads.insert(name.to_string(), workload);
        self
    }

    fn tracer(&self) -> Tracer {
        Tracer::new(self.trace.clone(), ProcessRole::Supervisor, "capexec")
    }

    fn check_binary(plan: &SandboxPlan, argv: &[String]) -> Result<(), SetupError> {
        let given = argv.first().ok_or(SetupError::EmptyArgv)?;
        match &plan.declaration.binary {
            Some(declared) if !binary_matches(declared, given) => {
                Err(SetupError::BinaryMismatch { declared: declared.clone(), given: given.clone() })
            }
            _ => Ok(()),
        }
    }

    /// Starts the run described by `plan`. Simulation runs look the workload
    /// up by the basename of `argv[0]`.
    pub fn launch(&self, plan: &SandboxPlan, argv: &[String]) -> Result<RunningService, SetupError> {
        Supervisor::check_binary(plan, argv)?;
        match plan.backend {
            Backend::Native => self.launch_native(plan, argv),
            Backend::Simulation => {
                let base = argv[0].rsplit('/').next().unwrap_or(&argv[0]);
                let workload = self
                    .workloads
                    .get(base)
                    .cloned()
                    .or_else(|| workloads::builtin(base))
                    .ok_or_else(|| SetupError::NoSimWorkload(argv[0].clone()))?;
                self.launch_sim(plan, argv, workload)
            }
        }
    }

    /// Simulation launch with an explicit workload.
    pub fn launch_with(
        &self,
        plan: &SandboxPlan,
        argv: &[String],
        workload: Arc<dyn Workload>,
    ) -> Result<RunningService, SetupError> {
        Supervisor::check_binary(plan, argv)?;
        self.launch_sim(plan, argv, workload)
    }

    pub fn run(&self, plan: &SandboxPlan, argv: &[String]) -> Result<RunOutcome, SetupError> {
        Ok(self.launch(plan, argv)?.wait())
    }

    /// Sends the limit message and waits for the acknowledgement.
    fn install_limits(&self, ch: &mut Channel, grant: &ResourceGrant) -> Result<(), SetupError> {
        let service = grant.service();
        let sup = self.tracer();
        let msg = limit_message(ch.next_sequence(), grant);
        sup.emit(TraceKind::ChannelSend, None, None, format!("{} {}", service.name(), describe(&msg)));
        let reply = ch
            .call(&msg, DEFAULT_TIMEOUT)
            .map_err(|e: ChannelError| SetupError::LimitRejected { service, detail: e.to_string() })?;
        let code = reply.message.error_code();
        sup.emit(TraceKind::ChannelRecv, None, code, format!("{} {}", service.name(), describe(&reply.message)));
        let Some(code) = code else { return Ok(()) };
        let detail = reply.message.get_str("detail").unwrap_or("").to_string();
        Err(match detail.strip_prefix(PREOPEN_DETAIL) {
            Some(name) => SetupError::PreopenFailed { service, name: name.to_string(), code },
            None => SetupError::LimitRejected { service, detail: format!("{} {detail}", describe_code(code)) },
        })
    }

    fn launch_sim(
        &self,
        plan: &SandboxPlan,
        argv: &[String],
        workload: Arc<dyn Workload>,
    ) -> Result<RunningService, SetupError> {
        let started = Instant::now();
        let sup = self.tracer();
        let mut channels = BTreeMap::new();
        let mut brokers = BTreeMap::new();
        for grant in &plan.declaration.grants {
            let service = grant.service();
            let id = sup.call(format!("spawn_broker({})", service.name()));
            let (mut client, mut server) = Channel::sim_pair();
            let kill = Arc::new(AtomicBool::new(false));
            let mut broker = Broker::new(
                service,
                self.resolver.clone(),
                self.sysctl.clone(),
                Broker::tracer_for(service, self.trace.clone()),
            )
            .with_kill_switch(kill.clone());
            let handle = std::thread::Builder::new()
                .name(format!("broker-{}", service.short_name()))
                .spawn(move || {
                    let _ = broker.serve(&mut server);
                })
                .map_err(|source| SetupError::SpawnFailed { service, source })?;
            sup.ret(id, None, format!("spawn_broker task {}", service.short_name()));
            brokers.insert(service, SimBroker { kill, handle });
            self.install_limits(&mut client, grant)?;
            channels.insert(service, client);
        }
        let setup_time = started.elapsed();

        let process = argv[0].rsplit('/').next().unwrap_or(&argv[0]).to_string();
        let tracer = Tracer::new(self.trace.clone(), ProcessRole::Workload, process);
        let gateway = Gateway::with_providers(tracer, self.resolver.clone(), self.sysctl.clone());
        let ctx = ClientContext::new(channels, gateway);
        let capture = SharedBuffer::default();
        let mut io = match self.stdout {
            StdoutMode::Inherit => WorkloadIo::inherit(),
            StdoutMode::Capture => WorkloadIo {
                stdin: Box::new(io::empty()),
                stdout: Box::new(capture.clone()),
                stderr: Box::new(io::stderr()),
            },
            StdoutMode::Null => WorkloadIo {
                stdin: Box::new(io::empty()),
                stdout: Box::new(io::sink()),
                stderr: Box::new(io::stderr()),
            },
        };
        let id = sup.call(format!("spawn_workload({})", argv.join(" ")));
        let argv_owned = argv.to_vec();
        let handle = std::thread::Builder::new()
            .name("workload".into())
            .spawn(move || {
                let _ = ctx.gateway().enter_capability_mode();
                workload.run(&ctx, &argv_owned, &mut io)
            })
            .map_err(|source| SetupError::WorkloadExecFailed { binary: argv[0].clone(), source })?;
        sup.ret(id, None, "spawn_workload task");
        Ok(RunningService {
            workload_pid: std::process::id(),
            services: brokers.keys().copied().collect(),
            trace: self.trace.clone(),
            tracer: sup,
            setup_time,
            started,
            inner: Inner::Sim {
                workload: handle,
                brokers,
                stdout: (self.stdout == StdoutMode::Capture).then_some(capture),
            },
        })
    }

    fn broker_command(&self) -> PathBuf {
        self.broker_exe
            .clone()
            .or_else(|| std::env::var_os(ENV_BROKER_EXE).map(PathBuf::from))
            .or_else(|| std::env::current_exe().ok())
            .unwrap_or_else(|| PathBuf::from("capexec"))
    }

    fn launch_native(&self, plan: &SandboxPlan, argv: &[String]) -> Result<RunningService, SetupError> {
        let started = Instant::now();
        let sup = self.tracer();
        let trace_fd = self.trace.raw_fd();
        let exe = self.broker_command();
        let mut brokers: BTreeMap<ServiceKind, NativeBroker> = BTreeMap::new();
        let mut channels: Vec<(ServiceKind, Channel)> = Vec::new();
        let abort = |brokers: BTreeMap<ServiceKind, NativeBroker>, channels: Vec<(ServiceKind, Channel)>| {
            drop(channels);
            for (_, mut b) in brokers {
                let _ = b.child.kill();
                let _ = b.child.wait();
            }
        };
        for grant in &plan.declaration.grants {
            let service = grant.service();
            let id = sup.call(format!("spawn_broker({})", service.name()));
            let (mut client, server) = match Channel::unix_pair() {
                Ok(pair) => pair,
                Err(source) => {
                    abort(brokers, channels);
                    return Err(SetupError::SpawnFailed { service, source });
                }
            };
            let server_fd = server.as_raw_fd().expect("unix channel");
            let mut cmd = Command::new(&exe);
            cmd.args(["broker", "--service", service.name(), "--fd", &server_fd.to_string()]);
            if let Some(fd) = trace_fd {
                cmd.args(["--trace-fd", &fd.to_string()]);
            }
            if let Some(path) = &self.fixtures_path {
                cmd.arg("--fixtures").arg(path);
            }
            cmd.stdin(Stdio::null()).stdout(Stdio::null());
            inherit_fds(&mut cmd, [Some(server_fd), trace_fd].into_iter().flatten().collect());
            let child = match cmd.spawn() {
                Ok(c) => c,
                Err(source) => {
                    sup.ret(id, Some(source.raw_os_error().unwrap_or(libc::EIO)), "spawn_broker -1");
                    abort(brokers, channels);
                    return Err(SetupError::SpawnFailed { service, source });
                }
            };
            drop(server);
            sup.ret(id, None, format!("spawn_broker pid {}", child.id()));
            brokers.insert(service, NativeBroker { child });
            if let Err(e) = self.install_limits(&mut client, grant) {
                abort(brokers, channels);
                return Err(e);
            }
            channels.push((service, client));
        }
        let setup_time = started.elapsed();

        let specs: Vec<ChannelSpec> = channels
            .iter()
            .map(|(s, c)| ChannelSpec { service: s.name().to_string(), fd: c.as_raw_fd().expect("unix channel") })
            .collect();
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..]).env(ENV_CHANNELS, format_channel_spec(&specs)).env(ENV_MODE, "capability");
        match trace_fd {
            Some(fd) => cmd.env(ENV_TRACE_FD, fd.to_string()),
            None => cmd.env_remove(ENV_TRACE_FD),
        };
        cmd.stdout(match self.stdout {
            StdoutMode::Inherit => Stdio::inherit(),
            StdoutMode::Capture => Stdio::piped(),
            StdoutMode::Null => Stdio::null(),
        });
        let mut fds: Vec<RawFd> = specs.iter().map(|s| s.fd).collect();
        fds.extend(trace_fd);
        inherit_fds(&mut cmd, fds);
        let id = sup.call(format!("spawn_workload({})", argv.join(" ")));
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(source) => {
                sup.ret(id, Some(source.raw_os_error().unwrap_or(libc::EIO)), "spawn_workload -1");
                abort(brokers, channels);
                return Err(SetupError::WorkloadExecFailed { binary: argv[0].clone(), source });
            }
        };
        sup.ret(id, None, format!("spawn_workload pid {}", child.id()));
        let stdout = child.stdout.take().map(|mut pipe| {
            std::thread::spawn(move || {
                let mut buf = Vec::new();
                let _ = pipe.read_to_end(&mut buf);
                buf
            })
        });
        Ok(RunningService {
            workload_pid: child.id(),
            services: brokers.keys().copied().collect(),
            trace: self.trace.clone(),
            tracer: sup,
            setup_time,
            started,
            // The supervisor keeps its copies of the workload's channel ends
            // so brokers outlive the workload until their memory is sampled.
            inner: Inner::Native { child, brokers, keepalive: channels, stdout },
        })
    }
}

/// Clears close-on-exec on `fds` in the child only.
fn inherit_fds(cmd: &mut Command, fds: Vec<RawFd>) {
    // SAFETY: fcntl is async-signal-safe and touches only the child's table.
    unsafe {
        cmd.pre_exec(move || {
            for &fd in &fds {
                if libc::fcntl(fd, libc::F_SETFD, 0) == -1 {
                    return Err(io::Error::last_os_error());
                }
            }
            Ok(())
        });
    }
}

struct SimBroker {
    kill: Arc<AtomicBool>,
    handle: JoinHandle<()>,
}

struct NativeBroker {
    child: Child,
}

enum Inner {
    Sim {
        workload: JoinHandle<i32>,
        brokers: BTreeMap<ServiceKind, SimBroker>,
        stdout: Option<SharedBuffer>,
    },
    Native {
        child: Child,
        brokers: BTreeMap<ServiceKind, NativeBroker>,
        keepalive: Vec<(ServiceKind, Channel)>,
        stdout: Option<JoinHandle<Vec<u8>>>,
    },
}

pub struct RunningService {
    /// The workload's pid; for simulation runs this is our own.
    pub workload_pid: u32,
    pub services: Vec<ServiceKind>,
    trace: TraceSink,
    tracer: Tracer,
    setup_time: Duration,
    started: Instant,
    inner: Inner,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Exit status, or 128 + signal number when the workload was killed.
    pub status: i32,
    pub signal: Option<i32>,
    pub stdout: Vec<u8>,
    pub trace: Vec<TraceEvent>,
    /// From launch until the workload was started.
    pub setup_time: Duration,
    pub wall_time: Duration,
    /// Native runs only: peak resident bytes of the workload and of each
    /// broker still alive at exit.
    pub workload_peak_rss: u64,
    pub broker_peak_rss: BTreeMap<ServiceKind, u64>,
}

impl RunOutcome {
    pub fn peak_rss_total(&self) -> u64 {
        self.workload_peak_rss + self.broker_peak_rss.values().sum::<u64>()
    }
}

impl RunningService {
    pub fn setup_time(&self) -> Duration {
        self.setup_time
    }

    /// Kills the broker for `service` as if it had crashed. Returns false if
    /// there is no such broker.
    pub fn kill_broker(&mut self, service: ServiceKind) -> bool {
        let id = self.tracer.call(format!("kill_broker({})", service.name()));
        let found = match &mut self.inner {
            Inner::Sim { brokers, .. } => brokers.get(&service).map(|b| b.kill.store(true, Ordering::SeqCst)).is_some(),
            Inner::Native { brokers, .. } => brokers.get_mut(&service).map(|b| b.child.kill()).is_some(),
        };
        self.tracer.ret(id, (!found).then_some(libc::ESRCH), if found { "kill_broker 0" } else { "kill_broker -1" });
        found
    }

    pub fn wait(self) -> RunOutcome {
        let mut outcome = RunOutcome {
            status: 0,
            signal: None,
            stdout: Vec::new(),
            trace: Vec::new(),
            setup_time: self.setup_time,
            wall_time: Duration::ZERO,
            workload_peak_rss: 0,
            broker_peak_rss: BTreeMap::new(),
        };
        match self.inner {
            Inner::Sim { workload, brokers, stdout } => {
                outcome.status = workload.join().unwrap_or(101);
                outcome.wall_time = self.started.elapsed();
                for (_, b) in brokers {
                    let _ = b.handle.join();
                }
                outcome.stdout = stdout.map(|b| b.contents()).unwrap_or_default();
            }
            Inner::Native { child, brokers, keepalive, stdout } => {
                let (status, signal, rss) = match wait_rusage(child.id() as i32) {
                    Ok(r) => r,
                    Err(_) => (71, None, 0),
                };
                outcome.wall_time = self.started.elapsed();
                outcome.status = status;
                outcome.signal = signal;
                outcome.workload_peak_rss = rss;
                for (service, b) in &brokers {
                    if let Some(hwm) = vm_hwm(b.child.id()) {
                        outcome.broker_peak_rss.insert(*service, hwm);
                    }
                }
                drop(keepalive);
                for (_, mut b) in brokers {
                    reap_within(&mut b.child, Duration::from_secs(2));
                }
                outcome.stdout = stdout.and_then(|h| h.join().ok()).unwrap_or_default();
            }
        }
        let id = self.tracer.call("wait_workload");
        self.tracer.ret(id, None, format!("exit {}", outcome.status));
        outcome.trace = self.trace.events().unwrap_or_default();
        outcome
    }
}

/// Waits for `pid`, returning (exit code, signal, peak rss bytes).
pub fn wait_rusage(pid: i32) -> io::Result<(i32, Option<i32>, u64)> {
    let mut status = 0;
    // SAFETY: rusage is plain data; wait4 fills it in.
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    loop {
        // SAFETY: valid pointers to locals.
        let rc = unsafe { libc::wait4(pid, &mut status, 0, &mut usage) };
        if rc == pid {
            break;
        }
        let err = io::Error::last_os_error();
        if err.kind() != io::ErrorKind::Interrupted {
            return Err(err);
        }
    }
    let rss = (usage.ru_maxrss.max(0) as u64) * 1024;
    if libc::WIFSIGNALED(status) {
        let sig = libc::WTERMSIG(status);
        Ok((128 + sig, Some(sig), rss))
    } else {
        Ok((libc::WEXITSTATUS(status), None, rss))
    }
}

/// Peak resident set of a live process, from `/proc`.
pub fn vm_hwm(pid: u32) -> Option<u64> {
    let status = std::fs::read_to_string(format!("/proc/{pid}/status")).ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn reap_within(child: &mut Child, limit: Duration) {
    let deadline = Instant::now() + limit;
    loop {
        match child.try_wait() {
            Ok(Some(_)) | Err(_) => return,
            Ok(None) if Instant::now() >= deadline => {
                let _ = child.kill();
                let _ = child.wait();
                return;
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(2)),
        }
    }
}

/// Body of the `broker` subcommand: serve `service` on the inherited
/// channel `fd` until the peer goes away.
pub fn run_broker_process(service: ServiceKind, fd: RawFd, trace_fd: Option<RawFd>, fixtures: Option<Fixtures>) -> i32 {
    let Some(owned) = crate::client::adopt_fd(fd) else {
        eprintln!("capexec broker: descriptor {fd} is not open");
        return 71;
    };
    let sink = match trace_fd.and_then(crate::client::adopt_fd) {
        Some(t) => TraceSink::from_owned(t),
        None => TraceSink::null(),
    };
    let (resolver, sysctl): (Arc<dyn Resolver>, Arc<dyn SysctlProvider>) = match fixtures {
        Some(fx) => (Arc::new(fx.resolver), Arc::new(FixtureSysctl::new(fx.sysctl))),
        None => (Arc::new(SystemResolver), Arc::new(SystemSysctl::default())),
    };
    let mut ch = Channel::from_unix(std::os::unix::net::UnixStream::from(owned));
    let mut broker = Broker::new(service, resolver, sysctl, Broker::tracer_for(service, sink));
    match broker.serve(&mut ch) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("capexec broker {}: {e}", service.name());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::FixtureResolver;
    use crate::trace::{assert_clean_trace, check_call_pairing};
    use capexec_core::declaration::parse_declaration;
    use capexec_core::plan::build_plan;

    fn sim(text: &str) -> SandboxPlan {
        build_plan(&parse_declaration(text).unwrap(), Backend::Simulation)
    }

    fn argv(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn binary_matching() {
        assert!(binary_matches("/bin/cat", "/bin/cat"));
        assert!(binary_matches("/bin/cat", "cat"));
        assert!(binary_matches("cat", "/usr/bin/cat"));
        assert!(!binary_matches("/bin/cat", "/usr/bin/cat"));
        assert!(!binary_matches("/bin/cat", "ls"));
    }

    #[test]
    fn sim_cat_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("in.txt");
        std::fs::write(&file, b"line one\nline two\n").unwrap();
        let name = file.to_str().unwrap();
        let decl = format!(
            "{{\"binary\": \"/bin/cat\", \"system.fileargs\": {{\"operations\": [\"OPEN\"], \"flags\": [\"RDONLY\"], \"cap_rights\": [\"READ\", \"FSTAT\"], \"filename\": [\"{name}\"]}}}}"
        );
        let sink = TraceSink::memory();
        let sup = Supervisor::new().trace(sink).stdout(StdoutMode::Capture);
        let out = sup.run(&sim(&decl), &argv(&["/bin/cat", name])).unwrap();
        assert_eq!(out.status, 0);
        assert_eq!(out.stdout, b"line one\nline two\n");
        assert!(assert_clean_trace(&out.trace));
        assert!(check_call_pairing(&out.trace).is_ok());
        assert!(out.trace.iter().any(|e| e.kind == TraceKind::ChannelSend
            && e.role == ProcessRole::Workload
            && e.detail.contains("cmd=open")
            && e.detail.contains(&format!("name={name}"))));
    }

    #[test]
    fn setup_errors() {
        let sup = Supervisor::new();
        let cat = sim("{\"binary\": \"/bin/cat\"}");
        assert!(matches!(sup.launch(&cat, &argv(&["/bin/ls"])), Err(SetupError::BinaryMismatch { .. })));
        let any = sim("{}");
        assert!(matches!(sup.launch(&any, &argv(&["frobnicate"])), Err(SetupError::NoSimWorkload(_))));
        let missing = sim(
            "{\"system.fileargs\": {\"operations\": [\"OPEN\"], \"flags\": [\"RDONLY\"], \"cap_rights\": [\"READ\"], \"filename\": [\"/nonexistent/f\"]}}",
        );
        match sup.launch(&missing, &argv(&["true"])) {
            Err(SetupError::PreopenFailed { name, code, .. }) => {
                assert_eq!(name, "/nonexistent/f");
                assert_eq!(code, libc::ENOENT);
            }
            Err(other) => panic!("unexpected {other}"),
            Ok(_) => panic!("launch succeeded"),
        }
    }

    #[test]
    fn sim_dns_kill_is_contained() {
        let plan = sim("{\"system.dns\": {\"family\": [\"AF_INET\"]}}");
        let (to_test, from_workload) = std::sync::mpsc::channel();
        let (to_workload, killed) = std::sync::mpsc::channel::<()>();
        let killed = std::sync::Mutex::new(killed);
        let w = move |ctx: &ClientContext, _: &[String], _: &mut WorkloadIo| {
            let first = ctx.c_gethostbyaddr(&[127, 0, 0, 1], capexec_core::declaration::Family::Inet).map(|_| ());
            to_test.send(first).unwrap();
            killed.lock().unwrap().recv().unwrap();
            let second = ctx.c_gethostbyaddr(&[127, 0, 0, 1], capexec_core::declaration::Family::Inet);
            if second.map_err(|e| e.code()) == Err(94) {
                0
            } else {
                1
            }
        };
        let sup = Supervisor::new().providers(Arc::new(FixtureResolver::loopback()), Arc::new(FixtureSysctl::new([])));
        let mut running = sup.launch_with(&plan, &argv(&["w"]), Arc::new(w)).unwrap();
        assert_eq!(from_workload.recv().unwrap(), Ok(()));
        assert!(running.kill_broker(ServiceKind::Dns));
        assert!(!running.kill_broker(ServiceKind::Net));
        to_workload.send(()).unwrap();
        assert_eq!(running.wait().status, 0);
    }
}
