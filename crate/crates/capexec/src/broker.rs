//! Broker side of the capability services.
//!
//! A broker serves one service over one channel. The first request must be
//! `cmd=limit` carrying the service name and its grant; after that the
//! whitelist can only be narrowed. Requests are handled strictly in order.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::os::fd::{AsFd, OwnedFd};
use std::os::unix::fs::OpenOptionsExt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use capexec_core::declaration::{grant_from_text, Family, OpenFlag, Right};
use capexec_core::errno::{EINVAL, ENOTCAPABLE, EPROTO, KEY_UNAVAILABLE, RESOLUTION_FAILED};
use capexec_core::limits::{
    flags_to_string, normalize_path, request_flags, BrokerLimits, BrokerRequest, CMD_LIMIT, CMD_NARROW, CMD_PING,
};
use capexec_core::wire::DescriptorRef;
use capexec_core::{AttrValue, ChannelMessage, MessageKind, ResourceGrant, ServiceKind};

use crate::channel::{Channel, ChannelError};
use crate::providers::{Resolver, SysctlProvider};
use crate::trace::{ProcessRole, TraceKind, Tracer};

/// A reply and the descriptors it references.
#[derive(Debug)]
pub struct Reply {
    pub message: ChannelMessage,
    pub fds: Vec<OwnedFd>,
}

impl Reply {
    fn ok(message: ChannelMessage) -> Self {
        Reply { message, fds: Vec::new() }
    }

    fn error(sequence: u64, code: i32) -> Self {
        Reply::ok(ChannelMessage::error(sequence, code))
    }

    fn error_detail(sequence: u64, code: i32, detail: &str) -> Self {
        Reply::ok(ChannelMessage::error(sequence, code).with("detail", detail))
    }

    fn with_fd(message: ChannelMessage, fd: OwnedFd) -> Self {
        Reply { message: message.with("fd", AttrValue::Descriptor(DescriptorRef(0))), fds: vec![fd] }
    }
}

fn io_code(err: &io::Error) -> i32 {
    err.raw_os_error().unwrap_or(libc::EIO)
}

/// Requested access mode for a flag set.
fn access(flags: &std::collections::BTreeSet<OpenFlag>) -> (bool, bool) {
    let rdwr =
        flags.contains(&OpenFlag::RdWr) || (flags.contains(&OpenFlag::RdOnly) && flags.contains(&OpenFlag::WrOnly));
    let write = rdwr || flags.contains(&OpenFlag::WrOnly);
    let read = rdwr || !write;
    (read, write)
}

pub(crate) fn open_options(flags: &std::collections::BTreeSet<OpenFlag>) -> OpenOptions {
    let (read, write) = access(flags);
    let mut opts = OpenOptions::new();
    opts.read(read).write(write);
    let mut custom = 0;
    for f in flags {
        match f {
            OpenFlag::Append => {
                opts.append(true);
            }
            // Passed raw: std refuses O_CREAT without write access.
            OpenFlag::Creat => custom |= libc::O_CREAT,
            OpenFlag::Excl => {
                if flags.contains(&OpenFlag::Creat) {
                    custom |= libc::O_EXCL;
                }
            }
            OpenFlag::Trunc => {
                opts.truncate(true);
            }
            OpenFlag::NonBlock => custom |= libc::O_NONBLOCK,
            OpenFlag::NoFollow => custom |= libc::O_NOFOLLOW,
            OpenFlag::Directory => custom |= libc::O_DIRECTORY,
            OpenFlag::Sync => custom |= libc::O_SYNC,
            OpenFlag::RdOnly | OpenFlag::WrOnly | OpenFlag::RdWr | OpenFlag::Cloexec => {}
        }
    }
    opts.custom_flags(custom).mode(0o644);
    opts
}

/// Raw `open(2)` flags for a flag set, as used by `openat`.
pub(crate) fn libc_flags(flags: &std::collections::BTreeSet<OpenFlag>) -> i32 {
    let mut out = match access(flags) {
        (true, true) => libc::O_RDWR,
        (false, true) => libc::O_WRONLY,
        _ => libc::O_RDONLY,
    };
    for f in flags {
        out |= match f {
            OpenFlag::Append => libc::O_APPEND,
            OpenFlag::Creat => libc::O_CREAT,
            OpenFlag::Trunc => libc::O_TRUNC,
            OpenFlag::Excl => libc::O_EXCL,
            OpenFlag::NonBlock => libc::O_NONBLOCK,
            OpenFlag::NoFollow => libc::O_NOFOLLOW,
            OpenFlag::Directory => libc::O_DIRECTORY,
            OpenFlag::Sync => libc::O_SYNC,
            OpenFlag::Cloexec => libc::O_CLOEXEC,
            OpenFlag::RdOnly | OpenFlag::WrOnly | OpenFlag::RdWr => 0,
        };
    }
    out
}

/// Whether a pre-opened handle can stand in for a fresh open with `flags`.
fn reusable(flags: &std::collections::BTreeSet<OpenFlag>, preopen_access: (bool, bool)) -> bool {
    access(flags) == preopen_access && flags.iter().all(|f| f.is_access_mode() || *f == OpenFlag::Cloexec)
}

/// Prefix of the `detail` attr when a pre-open fails; the file name follows.
pub const PREOPEN_DETAIL: &str = "cannot pre-open ";

/// Failure to apply the initial limits.
#[derive(Debug, thiserror::Error)]
pub enum LimitError {
    #[error("cannot pre-open {name}: {source}")]
    PreopenFailed { name: String, source: io::Error },
}

pub struct Broker {
    service: ServiceKind,
    limits: Option<BrokerLimits>,
    preopened: BTreeMap<String, ((bool, bool), File)>,
    resolver: Arc<dyn Resolver>,
    sysctl: Arc<dyn SysctlProvider>,
    tracer: Tracer,
    kill: Option<Arc<AtomicBool>>,
}

impl Broker {
    pub fn new(
        service: ServiceKind,
        resolver: Arc<dyn Resolver>,
        sysctl: Arc<dyn SysctlProvider>,
        tracer: Tracer,
    ) -> Self {
        Broker { service, limits: None, preopened: BTreeMap::new(), resolver, sysctl, tracer, kill: None }
    }

    /// Tracer for a broker of `service` writing to `sink`.
    pub fn tracer_for(service: ServiceKind, sink: crate::trace::TraceSink) -> Tracer {
        Tracer::new(sink, ProcessRole::Broker, service.short_name())
    }

    /// Once `flag` is set the broker stops at its next request without
    /// replying, as if it had crashed.
    pub fn with_kill_switch(mut self, flag: Arc<AtomicBool>) -> Self {
        self.kill = Some(flag);
        self
    }

    pub fn service(&self) -> ServiceKind {
        self.service
    }

    pub fn limits(&self) -> Option<&BrokerLimits> {
        self.limits.as_ref()
    }

    /// Installs the initial whitelist; fileargs pre-opens every listed file.
    pub fn apply_limits(&mut self, grant: ResourceGrant) -> Result<(), LimitError> {
        if let ResourceGrant::FileArgs(g) = &grant {
            let mode = access(&g.flags);
            let mut opts = OpenOptions::new();
            opts.read(mode.0).write(mode.1);
            for name in &g.filenames {
                let key = normalize_path(name);
                if self.preopened.contains_key(&key) {
                    continue;
                }
                match opts.open(name) {
                    Ok(f) => {
                        self.preopened.insert(key, (mode, f));
                    }
                    Err(e) if e.kind() == io::ErrorKind::NotFound && g.flags.contains(&OpenFlag::Creat) => {}
                    Err(source) => return Err(LimitError::PreopenFailed { name: name.clone(), source }),
                }
            }
        }
        self.limits = Some(BrokerLimits::new(grant));
        Ok(())
    }

    /// Serves until the peer closes the channel or the kill switch trips.
    pub fn serve(&mut self, ch: &mut Channel) -> Result<(), ChannelError> {
        loop {
            let received = match ch.recv(None) {
                Ok(r) => r,
                Err(ChannelError::Closed) => return Ok(()),
                Err(e) => return Err(e),
            };
            if self.kill.as_ref().is_some_and(|k| k.load(Ordering::SeqCst)) {
                return Ok(());
            }
            let msg = received.message;
            self.tracer.emit(TraceKind::ChannelRecv, None, None, describe(&msg));
            let reply = self.handle(&msg);
            let fds: Vec<_> = reply.fds.iter().map(|f| f.as_fd()).collect();
            self.tracer.emit(TraceKind::ChannelSend, None, reply.message.error_code(), describe(&reply.message));
            match ch.send(&reply.message, &fds) {
                Ok(()) => {}
                Err(ChannelError::Closed) => return Ok(()),
                Err(e) => return Err(e),
            }
        }
    }

    pub fn handle(&mut self, msg: &ChannelMessage) -> Reply {
        let seq = msg.sequence;
        if msg.kind != MessageKind::Request {
            return Reply::error(seq, EPROTO);
        }
        match msg.cmd() {
            Some(CMD_PING) => return Reply::ok(ChannelMessage::response(seq).with("pong", 1i64)),
            Some(CMD_LIMIT) => return self.handle_limit(msg),
            Some(CMD_NARROW) => return self.handle_narrow(msg),
            _ => {}
        }
        let Some(limits) = &self.limits else {
            return Reply::error_detail(seq, EPROTO, "limits not set");
        };
        let req = match BrokerRequest::from_message(msg) {
            Ok(r) => r,
            Err(e) => return Reply::error_detail(seq, e.code(), &e.to_string()),
        };
        if let Err(refusal) = limits.authorize(&req) {
            return Reply::error(seq, refusal.code());
        }
        let rights = match limits.grant() {
            ResourceGrant::FileArgs(g) => Right::mask(&g.rights),
            _ => 0,
        };
        self.perform(seq, req, rights)
    }

    fn handle_limit(&mut self, msg: &ChannelMessage) -> Reply {
        let seq = msg.sequence;
        if self.limits.is_some() {
            return Reply::error_detail(seq, EPROTO, "limits already set; use narrow");
        }
        if msg.get_str("service") != Some(self.service.name()) {
            return Reply::error_detail(seq, EPROTO, "limit for another service");
        }
        let grant = match msg.get_str("grant").map(|t| grant_from_text(self.service, t)) {
            Some(Ok(g)) => g,
            Some(Err(e)) => return Reply::error_detail(seq, EINVAL, &e.to_string()),
            None => return Reply::error_detail(seq, EINVAL, "missing grant"),
        };
        match self.apply_limits(grant) {
            Ok(()) => Reply::ok(ChannelMessage::response(seq)),
            Err(LimitError::PreopenFailed { name, source }) => {
                Reply::error_detail(seq, io_code(&source), &format!("{PREOPEN_DETAIL}{name}"))
            }
        }
    }

    fn handle_narrow(&mut self, msg: &ChannelMessage) -> Reply {
        let seq = msg.sequence;
        let Some(limits) = &mut self.limits else {
            return Reply::error_detail(seq, EPROTO, "limits not set");
        };
        let grant = match msg.get_str("grant").map(|t| grant_from_text(self.service, t)) {
            Some(Ok(g)) => g,
            Some(Err(e)) => return Reply::error_detail(seq, EINVAL, &e.to_string()),
            None => return Reply::error_detail(seq, EINVAL, "missing grant"),
        };
        match limits.narrow(grant) {
            Ok(()) => {
                if let ResourceGrant::FileArgs(g) = limits.grant() {
                    let keep: Vec<String> = g.filenames.iter().map(|n| normalize_path(n)).collect();
                    self.preopened.retain(|k, _| keep.contains(k));
                }
                Reply::ok(ChannelMessage::response(seq))
            }
            Err(r) => Reply::error(seq, r.code()),
        }
    }

    fn perform(&mut self, seq: u64, req: BrokerRequest, rights: u8) -> Reply {
        let ok = ChannelMessage::response(seq);
        match req {
            BrokerRequest::Open { name, flags } => {
                let flags = request_flags(&flags);
                let id = self.tracer.call(format!("openat(AT_FDCWD,{name:?},{})", flags_to_string(&flags)));
                let key = normalize_path(&name);
                let cached = match self.preopened.get(&key) {
                    Some((mode, _)) if reusable(&flags, *mode) => self.preopened.remove(&key),
                    _ => None,
                };
                let file = match cached {
                    Some((_, f)) => Ok(f),
                    None => open_options(&flags).open(&name),
                };
                match file {
                    Ok(f) => {
                        let fd = OwnedFd::from(f);
                        self.tracer.ret(id, None, format!("openat {}", std::os::fd::AsRawFd::as_raw_fd(&fd)));
                        Reply::with_fd(ok.with("rights", i64::from(rights)), fd)
                    }
                    Err(e) => {
                        self.tracer.ret(id, Some(io_code(&e)), "openat -1");
                        Reply::error(seq, io_code(&e))
                    }
                }
            }
            BrokerRequest::ResolveName { hostname, family } => match self.resolver.resolve_name(&hostname, family) {
                Ok(entry) => Reply::ok(entry.add_to(ok)),
                Err(_) => Reply::error(seq, RESOLUTION_FAILED),
            },
            BrokerRequest::ResolveAddr { address, family } => match self.resolver.resolve_addr(&address, family) {
                Ok(entry) => Reply::ok(entry.add_to(ok)),
                Err(_) => Reply::error(seq, RESOLUTION_FAILED),
            },
            BrokerRequest::Connect { host, port, family } => match endpoints(&host, port, family) {
                Ok(addrs) => match TcpStream::connect(&addrs[..]) {
                    Ok(s) => Reply::with_fd(ok, OwnedFd::from(s)),
                    Err(e) => Reply::error(seq, io_code(&e)),
                },
                Err(code) => Reply::error(seq, code),
            },
            BrokerRequest::Bind { host, port, family } => match endpoints(&host, port, family) {
                Ok(addrs) => match TcpListener::bind(&addrs[..]) {
                    Ok(l) => {
                        let port = l.local_addr().map_or(0, |a| a.port());
                        Reply::with_fd(ok.with("port", i64::from(port)), OwnedFd::from(l))
                    }
                    Err(e) => Reply::error(seq, io_code(&e)),
                },
                Err(code) => Reply::error(seq, code),
            },
            BrokerRequest::SysctlRead { key } => match self.sysctl.read(&key) {
                Ok(v) => Reply::ok(ok.with("value", v)),
                Err(_) => Reply::error(seq, KEY_UNAVAILABLE),
            },
            BrokerRequest::SysctlWrite { key, value } => {
                let text = match value {
                    AttrValue::String(s) => s,
                    other => other.to_string(),
                };
                match self.sysctl.write(&key, &text) {
                    Ok(()) => Reply::ok(ok),
                    Err(_) => Reply::error(seq, KEY_UNAVAILABLE),
                }
            }
        }
    }
}

pub(crate) fn endpoints(host: &str, port: u16, family: Family) -> Result<Vec<SocketAddr>, i32> {
    let addrs: Vec<SocketAddr> = (host, port)
        .to_socket_addrs()
        .map_err(|_| RESOLUTION_FAILED)?
        .filter(|a| a.is_ipv4() == (family == Family::Inet))
        .collect();
    if addrs.is_empty() {
        Err(RESOLUTION_FAILED)
    } else {
        Ok(addrs)
    }
}

/// Short text of a message for trace lines: `cmd=open name=test/0 flags=RDONLY`.
pub fn describe(msg: &ChannelMessage) -> String {
    let mut parts = Vec::new();
    if let Some(cmd) = msg.cmd() {
        parts.push(format!("cmd={cmd}"));
    }
    for (k, v) in &msg.attrs {
        if k == "cmd" || k == "grant" {
            continue;
        }
        let shown = match v {
            AttrValue::String(s) => s.clone(),
            AttrValue::Bytes(b) if b.len() > 32 => format!("<{} bytes>", b.len()),
            other => other.to_string(),
        };
        parts.push(format!("{k}={shown}"));
    }
    parts.join(" ")
}

/// The message that installs `grant` on a fresh broker.
pub fn limit_message(sequence: u64, grant: &ResourceGrant) -> ChannelMessage {
    ChannelMessage::request(sequence, CMD_LIMIT)
        .with("service", grant.service().name())
        .with("grant", capexec_core::declaration::grant_to_text(grant))
}

pub fn narrow_message(sequence: u64, grant: &ResourceGrant) -> ChannelMessage {
    ChannelMessage::request(sequence, CMD_NARROW).with("grant", capexec_core::declaration::grant_to_text(grant))
}

/// Whether an error code is a whitelist refusal.
pub fn is_refusal(code: i32) -> bool {
    code == ENOTCAPABLE
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{FixtureResolver, FixtureSysctl};
    use crate::trace::TraceSink;
    use capexec_core::declaration::{parse_declaration, DnsGrant, FileArgsGrant, FileOperation};
    use capexec_core::limits::BrokerRequest as Req;
    use std::io::Read;

    fn broker(service: ServiceKind) -> Broker {
        Broker::new(
            service,
            Arc::new(FixtureResolver::loopback()),
            Arc::new(FixtureSysctl::new([("vm.overcommit".to_string(), "0".to_string())])),
            Broker::tracer_for(service, TraceSink::null()),
        )
    }

    fn files_grant(names: &[&str], flags: &[OpenFlag]) -> ResourceGrant {
        ResourceGrant::FileArgs(FileArgsGrant {
            operations: [FileOperation::Open].into_iter().collect(),
            flags: flags.iter().copied().collect(),
            rights: [Right::Read, Right::Fstat].into_iter().collect(),
            filenames: names.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn open(name: &str, flags: &[OpenFlag]) -> ChannelMessage {
        Req::Open { name: name.into(), flags: flags.iter().copied().collect() }.to_message(9)
    }

    #[test]
    fn limits_come_first_and_only_once() {
        let mut b = broker(ServiceKind::Dns);
        let req = Req::ResolveName { hostname: "localhost".into(), family: Family::Inet }.to_message(1);
        assert_eq!(b.handle(&req).message.error_code(), Some(EPROTO));
        let grant =
            ResourceGrant::Dns(DnsGrant { families: [Family::Inet].into_iter().collect(), types: Default::default() });
        assert_eq!(b.handle(&limit_message(2, &grant)).message.error_code(), None);
        assert_eq!(b.handle(&limit_message(3, &grant)).message.error_code(), Some(EPROTO));
        let reply = b.handle(&req).message;
        assert_eq!(reply.get_str("name"), Some("localhost"));
    }

    #[test]
    fn limit_for_another_service_is_refused() {
        let mut b = broker(ServiceKind::Net);
        let grant = files_grant(&["x"], &[OpenFlag::RdOnly]);
        assert_eq!(b.handle(&limit_message(1, &grant)).message.error_code(), Some(EPROTO));
    }

    #[test]
    fn fileargs_hands_out_readable_descriptors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.txt");
        std::fs::write(&path, "hello broker\n").unwrap();
        let name = path.to_str().unwrap();
        let mut b = broker(ServiceKind::FileArgs);
        b.apply_limits(files_grant(&[name], &[OpenFlag::RdOnly])).unwrap();
        for _ in 0..2 {
            let mut reply = b.handle(&open(name, &[OpenFlag::RdOnly]));
            assert_eq!(reply.message.get_int("rights"), Some(i64::from(Right::Read.bit() | Right::Fstat.bit())));
            let mut text = String::new();
            File::from(reply.fds.remove(0)).read_to_string(&mut text).unwrap();
            assert_eq!(text, "hello broker\n");
        }
        assert_eq!(b.handle(&open("/etc/passwd", &[])).message.error_code(), Some(ENOTCAPABLE));
        assert_eq!(b.handle(&open(name, &[OpenFlag::WrOnly])).message.error_code(), Some(ENOTCAPABLE));
    }

    #[test]
    fn read_only_create() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("new.txt");
        let name = path.to_str().unwrap();
        let mut b = broker(ServiceKind::FileArgs);
        b.apply_limits(files_grant(&[name], &[OpenFlag::RdOnly, OpenFlag::Creat])).unwrap();
        let reply = b.handle(&open(name, &[OpenFlag::Creat]));
        assert_eq!(reply.message.error_code(), None);
        assert!(path.exists());
    }

    #[test]
    fn preopen_failure_names_the_file() {
        let mut b = broker(ServiceKind::FileArgs);
        let err = b.apply_limits(files_grant(&["nope.txt"], &[OpenFlag::RdOnly])).unwrap_err();
        let LimitError::PreopenFailed { name, .. } = err;
        assert_eq!(name, "nope.txt");
        let mut b = broker(ServiceKind::FileArgs);
        let reply = b.handle(&limit_message(1, &files_grant(&["nope.txt"], &[OpenFlag::RdOnly]))).message;
        assert_eq!(reply.error_code(), Some(libc::ENOENT));
        assert_eq!(reply.get_str("detail"), Some("cannot pre-open nope.txt"));
    }

    #[test]
    fn creatable_files_may_be_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("new.log");
        let name = path.to_str().unwrap();
        let mut b = broker(ServiceKind::FileArgs);
        let flags = [OpenFlag::WrOnly, OpenFlag::Creat];
        b.apply_limits(files_grant(&[name], &flags)).unwrap();
        let reply = b.handle(&open(name, &flags));
        assert_eq!(reply.message.error_code(), None);
        assert!(path.exists());
    }

    #[test]
    fn narrowing_only_shrinks() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let bpath = dir.path().join("b");
        std::fs::write(&a, "a").unwrap();
        std::fs::write(&bpath, "b").unwrap();
        let (a, bn) = (a.to_str().unwrap(), bpath.to_str().unwrap());
        let mut b = broker(ServiceKind::FileArgs);
        b.apply_limits(files_grant(&[a, bn], &[OpenFlag::RdOnly])).unwrap();
        let narrow = narrow_message(1, &files_grant(&[a], &[OpenFlag::RdOnly]));
        assert_eq!(b.handle(&narrow).message.error_code(), None);
        assert_eq!(b.handle(&open(bn, &[])).message.error_code(), Some(ENOTCAPABLE));
        assert_eq!(b.handle(&open(a, &[])).message.error_code(), None);
        let widen = narrow_message(2, &files_grant(&[a, bn], &[OpenFlag::RdOnly]));
        assert_eq!(b.handle(&widen).message.error_code(), Some(ENOTCAPABLE));
        let empty = narrow_message(3, &files_grant(&[], &[OpenFlag::RdOnly]));
        assert_eq!(b.handle(&empty).message.error_code(), None);
        assert_eq!(b.handle(&open(a, &[])).message.error_code(), Some(ENOTCAPABLE));
    }

    #[test]
    fn other_service_commands_are_protocol_errors() {
        let decl = parse_declaration(include_str!("../../core/fixtures/traceroute.svc")).unwrap();
        let mut b = broker(ServiceKind::Sysctl);
        b.apply_limits(decl.grant(ServiceKind::Sysctl).unwrap().clone()).unwrap();
        let reply = b.handle(&open("x", &[]));
        assert_eq!(reply.message.error_code(), Some(EPROTO));
        let read = Req::SysctlRead { key: "vm.overcommit".into() }.to_message(4);
        assert_eq!(b.handle(&read).message.get_str("value"), Some("0"));
        let write = Req::SysctlWrite { key: "vm.overcommit".into(), value: "1".into() }.to_message(5);
        assert_eq!(b.handle(&write).message.error_code(), Some(ENOTCAPABLE));
        let bogus = ChannelMessage::request(6, "frobnicate");
        assert_eq!(b.handle(&bogus).message.error_code(), Some(EPROTO));
    }

    #[test]
    fn net_binds_and_connects_on_loopback() {
        let decl = parse_declaration("binary: /bin/x\nsystem.net { host: \"127.0.0.1\"; family: AF_INET }").unwrap();
        let mut b = broker(ServiceKind::Net);
        b.apply_limits(decl.grant(ServiceKind::Net).unwrap().clone()).unwrap();
        let bind = Req::Bind { host: "127.0.0.1".into(), port: 0, family: Family::Inet }.to_message(1);
        let mut reply = b.handle(&bind);
        let port = reply.message.get_int("port").unwrap() as u16;
        assert_ne!(port, 0);
        let listener = TcpListener::from(reply.fds.remove(0));
        let connect = Req::Connect { host: "127.0.0.1".into(), port, family: Family::Inet }.to_message(2);
        let mut reply = b.handle(&connect);
        let mut client = TcpStream::from(reply.fds.remove(0));
        let (mut server, _) = listener.accept().unwrap();
        use std::io::Write;
        client.write_all(b"ping").unwrap();
        let mut buf = [0u8; 4];
        server.read_exact(&mut buf).unwrap();
        assert_eq!(&buf, b"ping");
        let evil = Req::Connect { host: "evil.example".into(), port: 80, family: Family::Inet }.to_message(3);
        assert_eq!(b.handle(&evil).message.error_code(), Some(ENOTCAPABLE));
        let v6 = Req::Bind { host: "127.0.0.1".into(), port: 0, family: Family::Inet6 }.to_message(4);
        assert_eq!(b.handle(&v6).message.error_code(), Some(ENOTCAPABLE));
    }

    #[test]
    fn describe_is_compact() {
        let msg = open("test/0", &[OpenFlag::RdOnly]);
        assert_eq!(describe(&msg), "cmd=open flags=RDONLY name=test/0");
    }
}
