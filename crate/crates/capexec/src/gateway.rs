//! The single mediation point for ambient operations in the simulation
//! backend. Before capability mode is entered operations run directly;
//! afterwards anything naming a global namespace is refused with 94.

use std::fmt;
use std::fs::File;
use std::net::{TcpListener, TcpStream};
use std::os::fd::{FromRawFd, OwnedFd};
use std::sync::{Arc, Mutex};

use capexec_core::capmode::{AlreadyEntered, AmbientOp, CapabilityMode, DirRef};
use capexec_core::errno::{self, ECAPMODE, ENOTCAPABLE, KEY_UNAVAILABLE, RESOLUTION_FAILED};
use capexec_core::limits::flags_to_string;
use capexec_core::CapabilityError;

use crate::providers::{HostEntry, Resolver, SysctlProvider, SystemResolver, SystemSysctl};
use crate::trace::Tracer;

/// Error from a mediated or redirected call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallError {
    /// Refused by capability mode (94) or a broker whitelist (93).
    Capability(CapabilityError),
    /// The operation itself failed; `code` is an errno value or one of the
    /// broker codes from [`capexec_core::errno`].
    Failed { code: i32, detail: Option<String> },
}

impl CallError {
    pub fn code(&self) -> i32 {
        match self {
            CallError::Capability(e) => e.code,
            CallError::Failed { code, .. } => *code,
        }
    }

    pub fn from_code(code: i32, detail: Option<String>) -> Self {
        if CapabilityError::is_capability_code(code) {
            CallError::Capability(CapabilityError { code })
        } else {
            CallError::Failed { code, detail }
        }
    }

    pub fn from_io(err: &std::io::Error) -> Self {
        CallError::Failed { code: err.raw_os_error().unwrap_or(libc::EIO), detail: None }
    }
}

/// Text for an error code: the capability labels, the broker codes, or the
/// host's `strerror`.
pub fn describe_code(code: i32) -> String {
    match code {
        ECAPMODE | ENOTCAPABLE => errno::label(code).to_string(),
        RESOLUTION_FAILED => "Name does not resolve".to_string(),
        KEY_UNAVAILABLE => "Sysctl key unavailable".to_string(),
        errno::EPROTO => "Protocol error".to_string(),
        _ => {
            let text = std::io::Error::from_raw_os_error(code).to_string();
            text.split(" (os error").next().unwrap_or(&text).to_string()
        }
    }
}

impl fmt::Display for CallError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&describe_code(self.code()))?;
        if let CallError::Failed { detail: Some(d), .. } = self {
            write!(f, " ({d})")?;
        }
        Ok(())
    }
}

impl std::error::Error for CallError {}

/// Result of an ambient operation that was allowed to run.
#[derive(Debug)]
pub enum Ambient {
    File(File),
    Host(HostEntry),
    Stream(TcpStream),
    Listener(TcpListener),
    Value(String),
    Done,
}

pub struct Gateway {
    mode: Mutex<CapabilityMode>,
    tracer: Tracer,
    resolver: Arc<dyn Resolver>,
    sysctl: Arc<dyn SysctlProvider>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("entered", &self.is_entered()).finish()
    }
}

impl Gateway {
    pub fn new(tracer: Tracer) -> Self {
        Gateway::with_providers(tracer, Arc::new(SystemResolver), Arc::new(SystemSysctl::default()))
    }

    pub fn with_providers(tracer: Tracer, resolver: Arc<dyn Resolver>, sysctl: Arc<dyn SysctlProvider>) -> Self {
        Gateway { mode: Mutex::new(CapabilityMode::new()), tracer, resolver, sysctl }
    }

    pub fn tracer(&self) -> &Tracer {
        &self.tracer
    }

    pub fn is_entered(&self) -> bool {
        self.mode.lock().unwrap_or_else(|e| e.into_inner()).is_entered()
    }

    pub fn enter_capability_mode(&self) -> Result<(), AlreadyEntered> {
        let id = self.tracer.call("cap_enter");
        let result = self.mode.lock().unwrap_or_else(|e| e.into_inner()).enter();
        match result {
            Ok(()) => self.tracer.ret(id, None, "cap_enter 0"),
            Err(_) => self.tracer.ret(id, Some(libc::EPERM), "cap_enter -1"),
        }
        result
    }

    /// Runs `op` if capability mode allows it, tracing the call.
    pub fn op(&self, op: AmbientOp) -> Result<Ambient, CallError> {
        let id = self.tracer.call(call_text(&op));
        let mode = *self.mode.lock().unwrap_or_else(|e| e.into_inner());
        if let Err((err, ns)) = mode.check(&op) {
            self.tracer.denied(
                id,
                err.code,
                format!("{} -1 errno {} {} ({})", op.name(), err.code, err.label(), ns.restriction()),
            );
            return Err(CallError::Capability(err));
        }
        let result = self.perform(&op);
        match &result {
            Ok(out) => self.tracer.ret(id, None, format!("{} {}", op.name(), ret_text(out))),
            Err(e) => self.tracer.ret(id, Some(e.code()), format!("{} -1 errno {} {e}", op.name(), e.code())),
        }
        result
    }

    fn perform(&self, op: &AmbientOp) -> Result<Ambient, CallError> {
        match op {
            AmbientOp::OpenAt { dir, path, flags } => {
                let opts = crate::broker::open_options(flags);
                let file = match dir {
                    DirRef::Cwd => opts.open(path).map_err(|e| CallError::from_io(&e))?,
                    DirRef::Held(dirfd) => openat(*dirfd, path, flags)?,
                };
                Ok(Ambient::File(file))
            }
            AmbientOp::ResolveName { hostname, family } => self
                .resolver
                .resolve_name(hostname, *family)
                .map(Ambient::Host)
                .map_err(|_| CallError::Failed { code: RESOLUTION_FAILED, detail: None }),
            AmbientOp::ResolveAddr { address, family } => self
                .resolver
                .resolve_addr(address, *family)
                .map(Ambient::Host)
                .map_err(|_| CallError::Failed { code: RESOLUTION_FAILED, detail: None }),
            AmbientOp::Connect { host, port, family } => {
                let addrs = crate::broker::endpoints(host, *port, *family)
                    .map_err(|code| CallError::Failed { code, detail: None })?;
                TcpStream::connect(&addrs[..]).map(Ambient::Stream).map_err(|e| CallError::from_io(&e))
            }
            AmbientOp::Bind { host, port, family } => {
                let addrs = crate::broker::endpoints(host, *port, *family)
                    .map_err(|code| CallError::Failed { code, detail: None })?;
                TcpListener::bind(&addrs[..]).map(Ambient::Listener).map_err(|e| CallError::from_io(&e))
            }
            AmbientOp::SysctlRead { key } => self
                .sysctl
                .read(key)
                .map(Ambient::Value)
                .map_err(|_| CallError::Failed { code: KEY_UNAVAILABLE, detail: None }),
            AmbientOp::SysctlWrite { .. } => Err(CallError::Failed { code: libc::EPERM, detail: None }),
            AmbientOp::Kill { pid } => {
                // SAFETY: signal 0 only probes for existence.
                let rc = unsafe { libc::kill(*pid, 0) };
                if rc == 0 {
                    Ok(Ambient::Done)
                } else {
                    Err(CallError::from_io(&std::io::Error::last_os_error()))
                }
            }
            AmbientOp::Read { .. }
            | AmbientOp::Write { .. }
            | AmbientOp::Close { .. }
            | AmbientOp::Fstat { .. }
            | AmbientOp::Seek { .. } => Ok(Ambient::Done),
        }
    }
}

fn openat(
    dirfd: i32,
    path: &str,
    flags: &std::collections::BTreeSet<capexec_core::declaration::OpenFlag>,
) -> Result<File, CallError> {
    use nix::fcntl::OFlag;
    use nix::sys::stat::Mode;
    let oflags = OFlag::from_bits_truncate(crate::broker::libc_flags(flags) | libc::O_CLOEXEC);
    let fd = nix::fcntl::openat(Some(dirfd), path, oflags, Mode::from_bits_truncate(0o644))
        .map_err(|e| CallError::Failed { code: e as i32, detail: None })?;
    // SAFETY: openat returned a fresh descriptor that nothing else owns.
    Ok(File::from(unsafe { OwnedFd::from_raw_fd(fd) }))
}

fn call_text(op: &AmbientOp) -> String {
    match op {
        AmbientOp::OpenAt { dir, path, flags } => {
            let dir = match dir {
                DirRef::Cwd => "AT_FDCWD".to_string(),
                DirRef::Held(fd) => fd.to_string(),
            };
            format!("openat({dir},{path:?},{})", flags_to_string(flags))
        }
        AmbientOp::Read { fd } => format!("read({fd})"),
        AmbientOp::Write { fd } => format!("write({fd})"),
        AmbientOp::Close { fd } => format!("close({fd})"),
        AmbientOp::Fstat { fd } => format!("fstat({fd})"),
        AmbientOp::Seek { fd } => format!("lseek({fd})"),
        AmbientOp::ResolveName { hostname, family } => format!("gethostbyname({hostname:?},{family})"),
        AmbientOp::ResolveAddr { address, family } => {
            let shown = crate::providers::ip_from_bytes(address).map_or("?".into(), |ip| ip.to_string());
            format!("gethostbyaddr({shown},{family})")
        }
        AmbientOp::Connect { host, port, family } => format!("connect({host:?},{port},{family})"),
        AmbientOp::Bind { host, port, family } => format!("bind({host:?},{port},{family})"),
        AmbientOp::SysctlRead { key } => format!("sysctlbyname({key:?},read)"),
        AmbientOp::SysctlWrite { key } => format!("sysctlbyname({key:?},write)"),
        AmbientOp::Kill { pid } => format!("kill({pid},0)"),
    }
}

fn ret_text(out: &Ambient) -> String {
    use std::os::fd::AsRawFd;
    match out {
        Ambient::File(f) => f.as_raw_fd().to_string(),
        Ambient::Stream(s) => s.as_raw_fd().to_string(),
        Ambient::Listener(l) => l.as_raw_fd().to_string(),
        Ambient::Host(h) => h.to_string(),
        Ambient::Value(v) => v.clone(),
        Ambient::Done => "0".to_string(),
    }
}
