//! Broker requests and the whitelist decisions brokers make about them.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::declaration::{DnsType, Family, FileOperation, OpenFlag, ResourceGrant, ServiceKind};
use crate::errno::{EINVAL, ENOTCAPABLE, EPROTO};
use crate::wire::{AttrValue, ChannelMessage, MessageKind};

/// Commands a broker serves, one set per service.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Command {
    Open,
    ResolveName,
    ResolveAddr,
    Connect,
    Bind,
    Read,
    Write,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Open,
        Command::ResolveName,
        Command::ResolveAddr,
        Command::Connect,
        Command::Bind,
        Command::Read,
        Command::Write,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Open => "open",
            Command::ResolveName => "resolve_name",
            Command::ResolveAddr => "resolve_addr",
            Command::Connect => "connect",
            Command::Bind => "bind",
            Command::Read => "read",
            Command::Write => "write",
        }
    }

    pub fn service(self) -> ServiceKind {
        match self {
            Command::Open => ServiceKind::FileArgs,
            Command::ResolveName | Command::ResolveAddr => ServiceKind::Dns,
            Command::Connect | Command::Bind => ServiceKind::Net,
            Command::Read | Command::Write => ServiceKind::Sysctl,
        }
    }

    pub fn from_name(name: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Control commands understood by every broker.
pub const CMD_LIMIT: &str = "limit";
pub const CMD_NARROW: &str = "narrow";
pub const CMD_PING: &str = "ping";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BrokerRequest {
    Open { name: String, flags: BTreeSet<OpenFlag> },
    ResolveName { hostname: String, family: Family },
    ResolveAddr { address: Vec<u8>, family: Family },
    Connect { host: String, port: u16, family: Family },
    Bind { host: String, port: u16, family: Family },
    SysctlRead { key: String },
    SysctlWrite { key: String, value: AttrValue },
}

/// Why a request message could not be turned into a [`BrokerRequest`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RequestError {
    /// Not a request, or `cmd` is not a data command.
    UnknownCommand(String),
    /// Required attribute missing or of the wrong type or shape.
    BadArgument(&'static str),
}

impl RequestError {
    pub fn code(&self) -> i32 {
        match self {
            RequestError::UnknownCommand(_) => EPROTO,
            RequestError::BadArgument(_) => EINVAL,
        }
    }
}

impl fmt::Display for RequestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RequestError::UnknownCommand(cmd) => write!(f, "unknown command {cmd:?}"),
            RequestError::BadArgument(what) => write!(f, "bad argument: {what}"),
        }
    }
}

/// Renders a flag set as `RDONLY|CLOEXEC`.
pub fn flags_to_string(flags: &BTreeSet<OpenFlag>) -> String {
    let mut out = String::new();
    for (i, f) in flags.iter().enumerate() {
        if i > 0 {
            out.push('|');
        }
        out.push_str(f.name());
    }
    out
}

pub fn flags_from_string(text: &str) -> Option<BTreeSet<OpenFlag>> {
    text.split('|').filter(|s| !s.is_empty()).map(OpenFlag::parse).collect()
}

impl BrokerRequest {
    pub fn command(&self) -> Command {
        match self {
            BrokerRequest::Open { .. } => Command::Open,
            BrokerRequest::ResolveName { .. } => Command::ResolveName,
            BrokerRequest::ResolveAddr { .. } => Command::ResolveAddr,
            BrokerRequest::Connect { .. } => Command::Connect,
            BrokerRequest::Bind { .. } => Command::Bind,
            BrokerRequest::SysctlRead { .. } => Command::Read,
            BrokerRequest::SysctlWrite { .. } => Command::Write,
        }
    }

    pub fn service(&self) -> ServiceKind {
        self.command().service()
    }

    pub fn to_message(&self, sequence: u64) -> ChannelMessage {
        let msg = ChannelMessage::request(sequence, self.command().name());
        match self {
            BrokerRequest::Open { name, flags } => {
                msg.with("name", name.as_str()).with("flags", flags_to_string(flags))
            }
            BrokerRequest::ResolveName { hostname, family } => {
                msg.with("name", hostname.as_str()).with("family", family.name())
            }
            BrokerRequest::ResolveAddr { address, family } => {
                msg.with("addr", address.clone()).with("family", family.name())
            }
            BrokerRequest::Connect { host, port, family } | BrokerRequest::Bind { host, port, family } => {
                msg.with("host", host.as_str()).with("port", i64::from(*port)).with("family", family.name())
            }
            BrokerRequest::SysctlRead { key } => msg.with("key", key.as_str()),
            BrokerRequest::SysctlWrite { key, value } => msg.with("key", key.as_str()).with("value", value.clone()),
        }
    }

    pub fn from_message(msg: &ChannelMessage) -> Result<BrokerRequest, RequestError> {
        let cmd = match (msg.kind, msg.cmd()) {
            (MessageKind::Request, Some(cmd)) => cmd,
            _ => return Err(RequestError::UnknownCommand(String::new())),
        };
        let command = Command::from_name(cmd).ok_or_else(|| RequestError::UnknownCommand(cmd.to_string()))?;
        let string = |name: &'static str| msg.get_str(name).map(str::to_string).ok_or(RequestError::BadArgument(name));
        let family = || msg.get_str("family").and_then(Family::parse).ok_or(RequestError::BadArgument("family"));
        let port = || msg.get_int("port").and_then(|p| u16::try_from(p).ok()).ok_or(RequestError::BadArgument("port"));
        Ok(match command {
            Command::Open => BrokerRequest::Open {
                name: string("name")?,
                flags: msg.get_str("flags").and_then(flags_from_string).ok_or(RequestError::BadArgument("flags"))?,
            },
            Command::ResolveName => BrokerRequest::ResolveName { hostname: string("name")?, family: family()? },
            Command::ResolveAddr => {
                let family = family()?;
                let address = msg.get_bytes("addr").ok_or(RequestError::BadArgument("addr"))?;
                if address.len() != family.address_len() {
                    return Err(RequestError::BadArgument("addr"));
                }
                BrokerRequest::ResolveAddr { address: address.to_vec(), family }
            }
            Command::Connect => BrokerRequest::Connect { host: string("host")?, port: port()?, family: family()? },
            Command::Bind => BrokerRequest::Bind { host: string("host")?, port: port()?, family: family()? },
            Command::Read => BrokerRequest::SysctlRead { key: string("key")? },
            Command::Write => BrokerRequest::SysctlWrite {
                key: string("key")?,
                value: msg.get("value").cloned().ok_or(RequestError::BadArgument("value"))?,
            },
        })
    }
}

/// Lexically normalizes a path for whitelist comparison: repeated slashes
/// and `.` components are dropped, as is a trailing slash. `..` is kept
/// and symlinks are not resolved.
pub fn normalize_path(path: &str) -> String {
    let absolute = path.starts_with('/');
    let parts: Vec<&str> = path.split('/').filter(|p| !p.is_empty() && *p != ".").collect();
    let mut out = String::new();
    if absolute {
        out.push('/');
    }
    out.push_str(&parts.join("/"));
    if out.is_empty() {
        out.push('.');
    }
    out
}

/// A broker's refusal of a request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Refusal {
    /// The request belongs to another service.
    WrongService,
    /// Outside the whitelist.
    NotCapable,
}

impl Refusal {
    pub fn code(self) -> i32 {
        match self {
            Refusal::WrongService => EPROTO,
            Refusal::NotCapable => ENOTCAPABLE,
        }
    }
}

/// The whitelist one broker enforces. Set once from a grant; afterwards it
/// can only shrink through [`BrokerLimits::narrow`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrokerLimits {
    grant: ResourceGrant,
    /// Normalized fileargs names, so lookups do not rescan the grant.
    files: BTreeSet<String>,
}

impl BrokerLimits {
    pub fn new(grant: ResourceGrant) -> Self {
        let files = match &grant {
            ResourceGrant::FileArgs(g) => g.filenames.iter().map(|f| normalize_path(f)).collect(),
            _ => BTreeSet::new(),
        };
        BrokerLimits { grant, files }
    }

    pub fn service(&self) -> ServiceKind {
        self.grant.service()
    }

    pub fn grant(&self) -> &ResourceGrant {
        &self.grant
    }

    /// Replaces the limits with `narrowed` if it is entry-wise contained in
    /// the current limits.
    pub fn narrow(&mut self, narrowed: ResourceGrant) -> Result<(), Refusal> {
        if narrowed.service() != self.service() {
            return Err(Refusal::WrongService);
        }
        if !grant_is_subset(&narrowed, &self.grant) {
            return Err(Refusal::NotCapable);
        }
        *self = BrokerLimits::new(narrowed);
        Ok(())
    }

    pub fn authorize(&self, req: &BrokerRequest) -> Result<(), Refusal> {
        let allowed = match (&self.grant, req) {
            (ResourceGrant::FileArgs(g), BrokerRequest::Open { name, flags }) => {
                g.operations.contains(&FileOperation::Open)
                    && self.files.contains(&normalize_path(name))
                    && request_flags(flags).is_subset(&g.flags)
            }
            (ResourceGrant::Dns(g), BrokerRequest::ResolveName { family, .. }) => {
                g.families.contains(family) && g.effective_types().contains(&DnsType::Name)
            }
            (ResourceGrant::Dns(g), BrokerRequest::ResolveAddr { family, .. }) => {
                g.families.contains(family) && g.effective_types().contains(&DnsType::Addr)
            }
            (ResourceGrant::Net(g), BrokerRequest::Connect { host, family, .. })
            | (ResourceGrant::Net(g), BrokerRequest::Bind { host, family, .. }) => {
                g.families.contains(family) && g.hosts.iter().any(|h| h == host)
            }
            (ResourceGrant::Sysctl(g), BrokerRequest::SysctlRead { key }) => {
                g.entries.get(key).is_some_and(|e| e.flags.contains(&crate::declaration::SysctlFlag::Read))
            }
            (ResourceGrant::Sysctl(g), BrokerRequest::SysctlWrite { key, .. }) => {
                g.entries.get(key).is_some_and(|e| e.flags.contains(&crate::declaration::SysctlFlag::Write))
            }
            _ => return Err(Refusal::WrongService),
        };
        if allowed {
            Ok(())
        } else {
            Err(Refusal::NotCapable)
        }
    }
}

/// Flags of an open request with the implicit `RDONLY` access mode made
/// explicit.
pub fn request_flags(flags: &BTreeSet<OpenFlag>) -> BTreeSet<OpenFlag> {
    let mut out = flags.clone();
    if !out.iter().any(|f| f.is_access_mode()) {
        out.insert(OpenFlag::RdOnly);
    }
    out
}

/// True when every whitelist entry of `inner` is also in `outer`.
pub fn grant_is_subset(inner: &ResourceGrant, outer: &ResourceGrant) -> bool {
    fn names(list: &[String]) -> BTreeSet<String> {
        list.iter().map(|n| normalize_path(n)).collect()
    }
    match (inner, outer) {
        (ResourceGrant::FileArgs(a), ResourceGrant::FileArgs(b)) => {
            a.operations.is_subset(&b.operations)
                && a.flags.is_subset(&b.flags)
                && a.rights.is_subset(&b.rights)
                && names(&a.filenames).is_subset(&names(&b.filenames))
        }
        (ResourceGrant::Dns(a), ResourceGrant::Dns(b)) => {
            a.families.is_subset(&b.families) && a.effective_types().is_subset(&b.effective_types())
        }
        (ResourceGrant::Net(a), ResourceGrant::Net(b)) => {
            let hosts = |l: &[String]| l.iter().cloned().collect::<BTreeSet<_>>();
            a.families.is_subset(&b.families) && hosts(&a.hosts).is_subset(&hosts(&b.hosts))
        }
        (ResourceGrant::Sysctl(a), ResourceGrant::Sysctl(b)) => a
            .entries
            .iter()
            .all(|(k, e)| b.entries.get(k).is_some_and(|o| o.key_type == e.key_type && e.flags.is_subset(&o.flags))),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::declaration::{
        parse_declaration, DnsGrant, FileArgsGrant, NetGrant, Right, SysctlEntry, SysctlFlag, SysctlGrant,
        SysctlKeyType,
    };
    use alloc::collections::BTreeMap;
    use alloc::vec;
    use proptest::prelude::*;

    fn fileargs(names: &[&str], flags: &[OpenFlag]) -> ResourceGrant {
        ResourceGrant::FileArgs(FileArgsGrant {
            operations: [FileOperation::Open].into_iter().collect(),
            flags: flags.iter().copied().collect(),
            rights: [Right::Read].into_iter().collect(),
            filenames: names.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn open(name: &str, flags: &[OpenFlag]) -> BrokerRequest {
        BrokerRequest::Open { name: name.into(), flags: flags.iter().copied().collect() }
    }

    #[test]
    fn fileargs_whitelist() {
        let limits = BrokerLimits::new(fileargs(&["test/0"], &[OpenFlag::RdOnly]));
        assert_eq!(limits.authorize(&open("test/0", &[OpenFlag::RdOnly])), Ok(()));
        assert_eq!(limits.authorize(&open("./test//0", &[])), Ok(()));
        assert_eq!(limits.authorize(&open("/etc/passwd", &[OpenFlag::RdOnly])), Err(Refusal::NotCapable));
        assert_eq!(limits.authorize(&open("test/0", &[OpenFlag::WrOnly])), Err(Refusal::NotCapable));
        assert_eq!(Refusal::NotCapable.code(), 93);
    }

    #[test]
    fn wrong_service_is_a_protocol_error() {
        let limits = BrokerLimits::new(fileargs(&["a"], &[OpenFlag::RdOnly]));
        let req = BrokerRequest::SysctlRead { key: "kern.hostname".into() };
        assert_eq!(limits.authorize(&req), Err(Refusal::WrongService));
        assert_eq!(Refusal::WrongService.code(), EPROTO);
    }

    #[test]
    fn dns_type_restriction() {
        let decl = parse_declaration(include_str!("../fixtures/dns.svc")).unwrap();
        let limits = BrokerLimits::new(decl.grants[0].clone());
        let by_name = BrokerRequest::ResolveName { hostname: "localhost".into(), family: Family::Inet };
        let by_addr = BrokerRequest::ResolveAddr { address: vec![127, 0, 0, 1], family: Family::Inet };
        assert_eq!(limits.authorize(&by_name), Err(Refusal::NotCapable));
        assert_eq!(limits.authorize(&by_addr), Ok(()));
    }

    #[test]
    fn narrowing_is_monotone() {
        let mut limits = BrokerLimits::new(fileargs(&["a", "b"], &[OpenFlag::RdOnly]));
        limits.narrow(fileargs(&["a"], &[OpenFlag::RdOnly])).unwrap();
        assert_eq!(limits.authorize(&open("b", &[])), Err(Refusal::NotCapable));
        assert_eq!(limits.authorize(&open("a", &[])), Ok(()));
        assert_eq!(limits.narrow(fileargs(&["a", "b"], &[OpenFlag::RdOnly])), Err(Refusal::NotCapable));
        limits.narrow(fileargs(&[], &[OpenFlag::RdOnly])).unwrap();
        assert_eq!(limits.authorize(&open("a", &[])), Err(Refusal::NotCapable));
    }

    #[test]
    fn dns_types_cannot_widen_through_empty_set() {
        let outer = ResourceGrant::Dns(DnsGrant {
            families: [Family::Inet].into_iter().collect(),
            types: [DnsType::Addr].into_iter().collect(),
        });
        let inner =
            ResourceGrant::Dns(DnsGrant { families: [Family::Inet].into_iter().collect(), types: BTreeSet::new() });
        assert!(!grant_is_subset(&inner, &outer));
        assert!(grant_is_subset(&outer, &inner));
    }

    #[test]
    fn requests_round_trip_through_messages() {
        let reqs = vec![
            open("test/0", &[OpenFlag::RdOnly, OpenFlag::Cloexec]),
            BrokerRequest::ResolveName { hostname: "localhost".into(), family: Family::Inet6 },
            BrokerRequest::ResolveAddr { address: vec![10, 0, 0, 1], family: Family::Inet },
            BrokerRequest::Connect { host: "example.com".into(), port: 80, family: Family::Inet },
            BrokerRequest::Bind { host: "127.0.0.1".into(), port: 0, family: Family::Inet },
            BrokerRequest::SysctlRead { key: "vm.overcommit".into() },
            BrokerRequest::SysctlWrite { key: "vm.overcommit".into(), value: AttrValue::Integer(1) },
        ];
        for req in reqs {
            let msg = req.to_message(7);
            assert_eq!(msg.cmd(), Some(req.command().name()));
            assert_eq!(BrokerRequest::from_message(&msg).unwrap(), req);
        }
        let short_addr =
            ChannelMessage::request(1, "resolve_addr").with("addr", vec![1u8, 2]).with("family", "AF_INET");
        assert_eq!(BrokerRequest::from_message(&short_addr), Err(RequestError::BadArgument("addr")));
        let unknown = ChannelMessage::request(1, "unlink");
        assert_eq!(BrokerRequest::from_message(&unknown).unwrap_err().code(), EPROTO);
    }

    #[test]
    fn path_normalization() {
        assert_eq!(normalize_path("/a//b/./c/"), "/a/b/c");
        assert_eq!(normalize_path("./x"), "x");
        assert_eq!(normalize_path("a/../b"), "a/../b");
        assert_eq!(normalize_path("/"), "/");
        assert_eq!(normalize_path("."), ".");
    }

    fn sysctl(entries: &[(&str, &[SysctlFlag])]) -> ResourceGrant {
        let entries: BTreeMap<_, _> = entries
            .iter()
            .map(|(k, f)| {
                (k.to_string(), SysctlEntry { key_type: SysctlKeyType::Mib, flags: f.iter().copied().collect() })
            })
            .collect();
        ResourceGrant::Sysctl(SysctlGrant { entries })
    }

    #[test]
    fn sysctl_flags_gate_operations() {
        let limits = BrokerLimits::new(sysctl(&[("vm.overcommit", &[SysctlFlag::Read])]));
        let read = BrokerRequest::SysctlRead { key: "vm.overcommit".into() };
        let write = BrokerRequest::SysctlWrite { key: "vm.overcommit".into(), value: AttrValue::Integer(0) };
        let other = BrokerRequest::SysctlRead { key: "kern.hostname".into() };
        assert_eq!(limits.authorize(&read), Ok(()));
        assert_eq!(limits.authorize(&write), Err(Refusal::NotCapable));
        assert_eq!(limits.authorize(&other), Err(Refusal::NotCapable));
    }

    #[test]
    fn net_host_and_family() {
        let limits = BrokerLimits::new(ResourceGrant::Net(NetGrant {
            hosts: vec!["example.com".into()],
            families: [Family::Inet].into_iter().collect(),
        }));
        let ok = BrokerRequest::Connect { host: "example.com".into(), port: 80, family: Family::Inet };
        let evil = BrokerRequest::Connect { host: "evil.example".into(), port: 80, family: Family::Inet };
        let v6 = BrokerRequest::Bind { host: "example.com".into(), port: 0, family: Family::Inet6 };
        assert_eq!(limits.authorize(&ok), Ok(()));
        assert_eq!(limits.authorize(&evil), Err(Refusal::NotCapable));
        assert_eq!(limits.authorize(&v6), Err(Refusal::NotCapable));
    }

    const NAMES: [&str; 4] = ["a", "b", "c", "d"];
    const FLAGS: [OpenFlag; 3] = [OpenFlag::RdOnly, OpenFlag::WrOnly, OpenFlag::Cloexec];

    proptest! {
        // Narrowing never makes a previously refused request grantable.
        #[test]
        fn narrowing_never_widens(
            outer_names in proptest::sample::subsequence(NAMES.to_vec(), 0..=4),
            inner_names in proptest::sample::subsequence(NAMES.to_vec(), 0..=4),
            outer_flags in proptest::sample::subsequence(FLAGS.to_vec(), 0..=3),
            inner_flags in proptest::sample::subsequence(FLAGS.to_vec(), 0..=3),
        ) {
            let mut limits = BrokerLimits::new(fileargs(&outer_names, &outer_flags));
            let before = limits.clone();
            let narrowed = limits.narrow(fileargs(&inner_names, &inner_flags)).is_ok();
            if !narrowed {
                prop_assert_eq!(&limits, &before);
            }
            for name in NAMES {
                for mask in 0u8..8 {
                    let flags: Vec<_> = FLAGS.iter().enumerate()
                        .filter(|(i, _)| mask & (1 << i) != 0).map(|(_, f)| *f).collect();
                    let req = open(name, &flags);
                    if limits.authorize(&req).is_ok() {
                        prop_assert!(before.authorize(&req).is_ok());
                    }
                }
            }
        }
    }
}
