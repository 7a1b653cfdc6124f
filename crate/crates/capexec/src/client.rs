//! Workload-side library. Calls that need a global namespace go to the
//! broker for their service when a channel exists; otherwise they fall
//! through to the gateway, which refuses them once capability mode is on.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::net::{TcpListener, TcpStream};
use std::os::fd::{FromRawFd, OwnedFd, RawFd};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use capexec_core::capmode::{AmbientOp, DirRef};
use capexec_core::declaration::{Family, OpenFlag, Right};
use capexec_core::errno::{ECAPMODE, ENOTCAPABLE, EPROTO};
use capexec_core::limits::{flags_to_string, BrokerRequest};
use capexec_core::{CapabilityError, ServiceKind};

use crate::broker::describe;
use crate::channel::{Channel, Received, DEFAULT_TIMEOUT};
use crate::gateway::{describe_code, Ambient, CallError, Gateway};
use crate::providers::{ip_from_bytes, HostEntry, Resolver, SysctlProvider};
use crate::trace::{ProcessRole, TraceKind, TraceSink, Tracer};

pub const ENV_CHANNELS: &str = "CAPEXEC_CHANNELS";
pub const ENV_MODE: &str = "CAPEXEC_MODE";
pub const ENV_TRACE_FD: &str = "CAPEXEC_TRACE_FD";

#[derive(Debug, thiserror::Error)]
pub enum ClientInitError {
    #[error("malformed channel spec {0:?}")]
    MalformedChannelSpec(String),
    #[error("bad {ENV_TRACE_FD} value {0:?}")]
    BadTraceFd(String),
}

/// One `service=fd` entry of the channel spec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelSpec {
    pub service: String,
    pub fd: RawFd,
}

/// Parses `system.fileargs=5;system.dns=7`. Empty entries are ignored.
pub fn parse_channel_spec(text: &str) -> Result<Vec<ChannelSpec>, ClientInitError> {
    let mut out: Vec<ChannelSpec> = Vec::new();
    for entry in text.split(';').map(str::trim).filter(|e| !e.is_empty()) {
        let bad = || ClientInitError::MalformedChannelSpec(entry.to_string());
        let (service, fd) = entry.split_once('=').ok_or_else(bad)?;
        let fd: RawFd = fd.trim().parse().map_err(|_| bad())?;
        if fd < 0 || out.iter().any(|s| s.fd == fd) || service.trim().is_empty() {
            return Err(bad());
        }
        out.push(ChannelSpec { service: service.trim().to_string(), fd });
    }
    Ok(out)
}

pub fn format_channel_spec(specs: &[ChannelSpec]) -> String {
    specs.iter().map(|s| format!("{}={}", s.service, s.fd)).collect::<Vec<_>>().join(";")
}

/// A descriptor handed out by `c_open`. `rights` is `None` for ambient
/// opens, which carry whatever the host grants.
#[derive(Debug)]
pub struct OpenedFile {
    pub file: File,
    pub rights: Option<BTreeSet<Right>>,
}

pub struct ClientContext {
    channels: BTreeMap<ServiceKind, Mutex<Channel>>,
    gateway: Gateway,
    tracer: Tracer,
    timeout: Duration,
    warnings: Vec<String>,
}

impl std::fmt::Debug for ClientContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientContext")
            .field("services", &self.channels.keys().collect::<Vec<_>>())
            .field("gateway", &self.gateway)
            .finish()
    }
}

impl ClientContext {
    pub fn new(channels: BTreeMap<ServiceKind, Channel>, gateway: Gateway) -> Self {
        let tracer = gateway.tracer().clone();
        ClientContext {
            channels: channels.into_iter().map(|(k, c)| (k, Mutex::new(c))).collect(),
            gateway,
            tracer,
            timeout: DEFAULT_TIMEOUT,
            warnings: Vec::new(),
        }
    }

    /// A context with no channels: every call is ambient.
    pub fn ambient(tracer: Tracer) -> Self {
        ClientContext::new(BTreeMap::new(), Gateway::new(tracer))
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Builds the context a supervised process inherits through its
    /// environment. Unknown service names are skipped with a warning.
    pub fn from_env(process: &str) -> Result<Self, ClientInitError> {
        let sink = match std::env::var(ENV_TRACE_FD) {
            Ok(v) if !v.is_empty() => {
                let fd: RawFd = v.parse().map_err(|_| ClientInitError::BadTraceFd(v.clone()))?;
                if !fd_is_open(fd) {
                    return Err(ClientInitError::BadTraceFd(v));
                }
                // SAFETY: the supervisor passed this descriptor to us alone.
                unsafe { TraceSink::from_raw_fd(fd) }
            }
            _ => TraceSink::null(),
        };
        let tracer = Tracer::new(sink, ProcessRole::Workload, process);
        let specs = parse_channel_spec(&std::env::var(ENV_CHANNELS).unwrap_or_default())?;
        let mut channels = BTreeMap::new();
        let mut warnings = Vec::new();
        for spec in specs {
            let Some(kind) = ServiceKind::from_name(&spec.service) else {
                warnings.push(format!("ignoring channel for unknown service {:?}", spec.service));
                continue;
            };
            if !fd_is_open(spec.fd) {
                warnings.push(format!("channel descriptor {} for {} is not open", spec.fd, spec.service));
                continue;
            }
            // SAFETY: the descriptor is open and was inherited for this purpose.
            channels.insert(kind, unsafe { Channel::from_raw_fd(spec.fd) });
        }
        let gateway = Gateway::new(tracer);
        let mut ctx = ClientContext::new(channels, gateway);
        ctx.warnings = warnings;
        if std::env::var(ENV_MODE).is_ok_and(|m| m == "capability") {
            let _ = ctx.gateway.enter_capability_mode();
        }
        Ok(ctx)
    }

    pub fn with_providers(mut self, resolver: Arc<dyn Resolver>, sysctl: Arc<dyn SysctlProvider>) -> Self {
        let entered = self.gateway.is_entered();
        self.gateway = Gateway::with_providers(self.tracer.clone(), resolver, sysctl);
        if entered {
            let _ = self.gateway.enter_capability_mode();
        }
        self
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn tracer(&self) -> &Tracer {
        &self.tracer
    }

    pub fn has_channel(&self, service: ServiceKind) -> bool {
        self.channels.contains_key(&service)
    }

    pub fn services(&self) -> impl Iterator<Item = ServiceKind> + '_ {
        self.channels.keys().copied()
    }

    /// Sends `req` to its broker, tracing the exchange under a fresh call.
    /// `Ok(None)` means there is no channel and the caller should go
    /// ambient.
    fn redirect(&self, call: String, req: BrokerRequest) -> Option<Result<(u64, Received), CallError>> {
        let service = req.service();
        let channel = self.channels.get(&service)?;
        let id = self.tracer.call(call);
        let mut ch = channel.lock().unwrap_or_else(|e| e.into_inner());
        let msg = req.to_message(ch.next_sequence());
        self.tracer.emit(TraceKind::ChannelSend, Some(id), None, format!("{} {}", service.name(), describe(&msg)));
        let reply = ch.call(&msg, self.timeout);
        drop(ch);
        Some(match reply {
            Ok(received) => {
                let code = received.message.error_code();
                self.tracer.emit(TraceKind::ChannelRecv, Some(id), code, describe(&received.message));
                match code {
                    Some(ENOTCAPABLE) => {
                        self.tracer.denied(
                            id,
                            ENOTCAPABLE,
                            format!("{} {}", service.name(), describe_code(ENOTCAPABLE)),
                        );
                        Err(CallError::Capability(CapabilityError::RIGHTS_EXCEEDED))
                    }
                    Some(code) => {
                        let detail = received.message.get_str("detail").map(str::to_string);
                        self.tracer.ret(id, Some(code), format!("-1 errno {code} {}", describe_code(code)));
                        Err(CallError::Failed { code, detail })
                    }
                    None => Ok((id, received)),
                }
            }
            Err(err) => {
                self.tracer.denied(
                    id,
                    ECAPMODE,
                    format!("{} channel {err}: {}", service.name(), describe_code(ECAPMODE)),
                );
                Err(CallError::Capability(CapabilityError::CAPABILITY_MODE))
            }
        })
    }

    fn protocol_error(&self, id: u64, what: &str) -> CallError {
        self.tracer.ret(id, Some(EPROTO), format!("-1 errno {EPROTO} reply without {what}"));
        CallError::Failed { code: EPROTO, detail: Some(format!("reply without {what}")) }
    }

    pub fn c_open(&self, name: &str, flags: &BTreeSet<OpenFlag>) -> Result<OpenedFile, CallError> {
        let req = BrokerRequest::Open { name: name.to_string(), flags: flags.clone() };
        let call = format!("open({name:?},{})", flags_to_string(flags));
        match self.redirect(call, req) {
            Some(Ok((id, mut received))) => {
                let Some(fd) = received.take_descriptor("fd") else {
                    return Err(self.protocol_error(id, "fd"));
                };
                let rights = received.message.get_int("rights").map(|m| Right::from_mask(m as u8));
                self.tracer.ret(id, None, format!("open {}", std::os::fd::AsRawFd::as_raw_fd(&fd)));
                Ok(OpenedFile { file: File::from(fd), rights })
            }
            Some(Err(e)) => Err(e),
            None => {
                let op = AmbientOp::OpenAt { dir: DirRef::Cwd, path: name.to_string(), flags: flags.clone() };
                match self.gateway.op(op)? {
                    Ambient::File(file) => Ok(OpenedFile { file, rights: None }),
                    _ => unreachable!("openat yields a file"),
                }
            }
        }
    }

    pub fn c_gethostbyname(&self, hostname: &str, family: Family) -> Result<HostEntry, CallError> {
        let req = BrokerRequest::ResolveName { hostname: hostname.to_string(), family };
        let call = format!("gethostbyname({hostname:?},{family})");
        self.resolve(call, req, AmbientOp::ResolveName { hostname: hostname.to_string(), family })
    }

    pub fn c_gethostbyaddr(&self, address: &[u8], family: Family) -> Result<HostEntry, CallError> {
        let req = BrokerRequest::ResolveAddr { address: address.to_vec(), family };
        let shown = ip_from_bytes(address).map_or("?".to_string(), |ip| ip.to_string());
        let call = format!("gethostbyaddr({shown},{family})");
        self.resolve(call, req, AmbientOp::ResolveAddr { address: address.to_vec(), family })
    }

    fn resolve(&self, call: String, req: BrokerRequest, ambient: AmbientOp) -> Result<HostEntry, CallError> {
        match self.redirect(call, req) {
            Some(Ok((id, received))) => match HostEntry::from_message(&received.message) {
                Some(entry) => {
                    self.tracer.ret(id, None, entry.to_string());
                    Ok(entry)
                }
                None => Err(self.protocol_error(id, "host entry")),
            },
            Some(Err(e)) => Err(e),
            None => match self.gateway.op(ambient)? {
                Ambient::Host(h) => Ok(h),
                _ => unreachable!("resolution yields a host entry"),
            },
        }
    }

    pub fn c_connect(&self, host: &str, port: u16, family: Family) -> Result<TcpStream, CallError> {
        let req = BrokerRequest::Connect { host: host.to_string(), port, family };
        match self.redirect(format!("connect({host:?},{port},{family})"), req) {
            Some(Ok((id, mut received))) => {
                let Some(fd) = received.take_descriptor("fd") else {
                    return Err(self.protocol_error(id, "fd"));
                };
                self.tracer.ret(id, None, "connect 0");
                Ok(TcpStream::from(fd))
            }
            Some(Err(e)) => Err(e),
            None => match self.gateway.op(AmbientOp::Connect { host: host.to_string(), port, family })? {
                Ambient::Stream(s) => Ok(s),
                _ => unreachable!("connect yields a stream"),
            },
        }
    }

    /// Binds a listening socket; port 0 asks for any free port.
    pub fn c_bind(&self, host: &str, port: u16, family: Family) -> Result<TcpListener, CallError> {
        let req = BrokerRequest::Bind { host: host.to_string(), port, family };
        match self.redirect(format!("bind({host:?},{port},{family})"), req) {
            Some(Ok((id, mut received))) => {
                let Some(fd) = received.take_descriptor("fd") else {
                    return Err(self.protocol_error(id, "fd"));
                };
                let port = received.message.get_int("port").unwrap_or(0);
                self.tracer.ret(id, None, format!("bind 0 port {port}"));
                Ok(TcpListener::from(fd))
            }
            Some(Err(e)) => Err(e),
            None => match self.gateway.op(AmbientOp::Bind { host: host.to_string(), port, family })? {
                Ambient::Listener(l) => Ok(l),
                _ => unreachable!("bind yields a listener"),
            },
        }
    }

    pub fn c_sysctl_read(&self, key: &str) -> Result<String, CallError> {
        let req = BrokerRequest::SysctlRead { key: key.to_string() };
        match self.redirect(format!("sysctlbyname({key:?},read)"), req) {
            Some(Ok((id, received))) => match received.message.get_str("value") {
                Some(v) => {
                    self.tracer.ret(id, None, v.to_string());
                    Ok(v.to_string())
                }
                None => Err(self.protocol_error(id, "value")),
            },
            Some(Err(e)) => Err(e),
            None => match self.gateway.op(AmbientOp::SysctlRead { key: key.to_string() })? {
                Ambient::Value(v) => Ok(v),
                _ => unreachable!("sysctl read yields a value"),
            },
        }
    }

    pub fn c_sysctl_write(&self, key: &str, value: &str) -> Result<(), CallError> {
        let req = BrokerRequest::SysctlWrite { key: key.to_string(), value: value.into() };
        match self.redirect(format!("sysctlbyname({key:?},write)"), req) {
            Some(Ok((id, _))) => {
                self.tracer.ret(id, None, "0");
                Ok(())
            }
            Some(Err(e)) => Err(e),
            None => self.gateway.op(AmbientOp::SysctlWrite { key: key.to_string() }).map(|_| ()),
        }
    }
}

fn fd_is_open(fd: RawFd) -> bool {
    nix::fcntl::fcntl(fd, nix::fcntl::FcntlArg::F_GETFD).is_ok()
}

/// Takes ownership of an inherited descriptor if it is open.
pub fn adopt_fd(fd: RawFd) -> Option<OwnedFd> {
    // SAFETY: only called on descriptors the supervisor handed over.
    fd_is_open(fd).then(|| unsafe { OwnedFd::from_raw_fd(fd) })
}
