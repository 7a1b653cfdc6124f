//! Pluggable back ends for the dns and sysctl brokers.
//!
//! Tests and fixtures use the map-based providers; the system ones go to the
//! host resolver and `/proc/sys`.

use std::collections::BTreeMap;
use std::ffi::CStr;
use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use capexec_core::declaration::Family;
use capexec_core::ChannelMessage;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostEntry {
    pub name: String,
    pub family: Family,
    /// Raw addresses, each `family.address_len()` bytes.
    pub addresses: Vec<Vec<u8>>,
}

impl HostEntry {
    pub fn ip_addrs(&self) -> Vec<IpAddr> {
        self.addresses.iter().filter_map(|a| ip_from_bytes(a)).collect()
    }

    pub fn add_to(&self, msg: ChannelMessage) -> ChannelMessage {
        msg.with("name", self.name.as_str()).with("family", self.family.name()).with("addrs", self.addresses.concat())
    }

    pub fn from_message(msg: &ChannelMessage) -> Option<HostEntry> {
        let family = Family::parse(msg.get_str("family")?)?;
        let raw = msg.get_bytes("addrs")?;
        let width = family.address_len();
        if raw.len() % width != 0 {
            return None;
        }
        Some(HostEntry {
            name: msg.get_str("name")?.to_string(),
            family,
            addresses: raw.chunks(width).map(<[u8]>::to_vec).collect(),
        })
    }
}

impl fmt::Display for HostEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.name, self.family)?;
        for a in self.ip_addrs() {
            write!(f, " {a}")?;
        }
        Ok(())
    }
}

pub fn ip_to_bytes(ip: IpAddr) -> (Family, Vec<u8>) {
    match ip {
        IpAddr::V4(v4) => (Family::Inet, v4.octets().to_vec()),
        IpAddr::V6(v6) => (Family::Inet6, v6.octets().to_vec()),
    }
}

pub fn ip_from_bytes(raw: &[u8]) -> Option<IpAddr> {
    match raw.len() {
        4 => Some(IpAddr::V4(Ipv4Addr::from(<[u8; 4]>::try_from(raw).ok()?))),
        16 => Some(IpAddr::V6(Ipv6Addr::from(<[u8; 16]>::try_from(raw).ok()?))),
        _ => None,
    }
}

fn family_of(ip: &IpAddr) -> Family {
    if ip.is_ipv4() {
        Family::Inet
    } else {
        Family::Inet6
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResolutionFailed;

pub trait Resolver: Send + Sync {
    fn resolve_name(&self, hostname: &str, family: Family) -> Result<HostEntry, ResolutionFailed>;
    fn resolve_addr(&self, address: &[u8], family: Family) -> Result<HostEntry, ResolutionFailed>;
}

/// Asks the host's resolver (`getaddrinfo`/`getnameinfo`).
#[derive(Clone, Copy, Debug, Default)]
pub struct SystemResolver;

impl Resolver for SystemResolver {
    fn resolve_name(&self, hostname: &str, family: Family) -> Result<HostEntry, ResolutionFailed> {
        let addrs = (hostname, 0).to_socket_addrs().map_err(|_| ResolutionFailed)?;
        let mut addresses: Vec<Vec<u8>> = Vec::new();
        for a in addrs {
            let (f, raw) = ip_to_bytes(a.ip());
            if f == family && !addresses.contains(&raw) {
                addresses.push(raw);
            }
        }
        if addresses.is_empty() {
            return Err(ResolutionFailed);
        }
        Ok(HostEntry { name: hostname.to_string(), family, addresses })
    }

    fn resolve_addr(&self, address: &[u8], family: Family) -> Result<HostEntry, ResolutionFailed> {
        let ip = ip_from_bytes(address).filter(|ip| family_of(ip) == family).ok_or(ResolutionFailed)?;
        let name = reverse_lookup(ip).ok_or(ResolutionFailed)?;
        Ok(HostEntry { name, family, addresses: vec![address.to_vec()] })
    }
}

fn reverse_lookup(ip: IpAddr) -> Option<String> {
    let sa: nix::sys::socket::SockaddrStorage = SocketAddr::new(ip, 0).into();
    let mut host = [0 as libc::c_char; libc::NI_MAXHOST as usize];
    use nix::sys::socket::SockaddrLike;
    // SAFETY: `sa` is a valid socket address of the reported length and
    // `host` is a writable buffer of the size passed.
    let rc = unsafe {
        libc::getnameinfo(
            sa.as_ptr(),
            sa.len(),
            host.as_mut_ptr(),
            host.len() as libc::socklen_t,
            std::ptr::null_mut(),
            0,
            libc::NI_NAMEREQD,
        )
    };
    if rc != 0 {
        return None;
    }
    // SAFETY: getnameinfo NUL-terminates on success.
    let name = unsafe { CStr::from_ptr(host.as_ptr()) };
    Some(name.to_string_lossy().into_owned())
}

/// Host table for hermetic runs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FixtureResolver {
    hosts: BTreeMap<String, Vec<IpAddr>>,
}

impl FixtureResolver {
    pub fn new() -> Self {
        FixtureResolver::default()
    }

    pub fn with_host(mut self, name: &str, addrs: &[IpAddr]) -> Self {
        self.hosts.entry(name.to_string()).or_default().extend_from_slice(addrs);
        self
    }

    /// `localhost` with both loopback addresses.
    pub fn loopback() -> Self {
        FixtureResolver::new()
            .with_host("localhost", &[IpAddr::V4(Ipv4Addr::LOCALHOST), IpAddr::V6(Ipv6Addr::LOCALHOST)])
    }
}

impl Resolver for FixtureResolver {
    fn resolve_name(&self, hostname: &str, family: Family) -> Result<HostEntry, ResolutionFailed> {
        let addresses: Vec<Vec<u8>> = match hostname.parse::<IpAddr>() {
            Ok(ip) => vec![ip],
            Err(_) => self.hosts.get(hostname).cloned().unwrap_or_default(),
        }
        .into_iter()
        .filter(|ip| family_of(ip) == family)
        .map(|ip| ip_to_bytes(ip).1)
        .collect();
        if addresses.is_empty() {
            return Err(ResolutionFailed);
        }
        Ok(HostEntry { name: hostname.to_string(), family, addresses })
    }

    fn resolve_addr(&self, address: &[u8], family: Family) -> Result<HostEntry, ResolutionFailed> {
        let ip = ip_from_bytes(address).filter(|ip| family_of(ip) == family).ok_or(ResolutionFailed)?;
        let name = self
            .hosts
            .iter()
            .find(|(_, addrs)| addrs.contains(&ip))
            .map(|(name, _)| name.clone())
            .ok_or(ResolutionFailed)?;
        Ok(HostEntry { name, family, addresses: vec![address.to_vec()] })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyUnavailable;

pub trait SysctlProvider: Send + Sync {
    fn read(&self, key: &str) -> Result<String, KeyUnavailable>;
    fn write(&self, key: &str, value: &str) -> Result<(), KeyUnavailable>;
}

/// Reads dotted keys from `/proc/sys` (`vm.overcommit_memory` is
/// `/proc/sys/vm/overcommit_memory`).
#[derive(Clone, Debug)]
pub struct SystemSysctl {
    root: PathBuf,
}

impl Default for SystemSysctl {
    fn default() -> Self {
        SystemSysctl { root: PathBuf::from("/proc/sys") }
    }
}

impl SystemSysctl {
    pub fn with_root(root: &Path) -> Self {
        SystemSysctl { root: root.to_path_buf() }
    }

    fn path(&self, key: &str) -> Result<PathBuf, KeyUnavailable> {
        if key.split('.').any(|c| c.is_empty() || c == ".." || c.contains('/')) {
            return Err(KeyUnavailable);
        }
        Ok(key.split('.').fold(self.root.clone(), |p, c| p.join(c)))
    }
}

impl SysctlProvider for SystemSysctl {
    fn read(&self, key: &str) -> Result<String, KeyUnavailable> {
        let text = std::fs::read_to_string(self.path(key)?).map_err(|_| KeyUnavailable)?;
        Ok(text.trim_end().to_string())
    }

    fn write(&self, key: &str, value: &str) -> Result<(), KeyUnavailable> {
        std::fs::write(self.path(key)?, value).map_err(|_| KeyUnavailable)
    }
}

#[derive(Debug, Default)]
pub struct FixtureSysctl {
    values: Mutex<BTreeMap<String, String>>,
}

impl FixtureSysctl {
    pub fn new(values: impl IntoIterator<Item = (String, String)>) -> Self {
        FixtureSysctl { values: Mutex::new(values.into_iter().collect()) }
    }
}

impl SysctlProvider for FixtureSysctl {
    fn read(&self, key: &str) -> Result<String, KeyUnavailable> {
        self.values.lock().unwrap().get(key).cloned().ok_or(KeyUnavailable)
    }

    fn write(&self, key: &str, value: &str) -> Result<(), KeyUnavailable> {
        match self.values.lock().unwrap().get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(KeyUnavailable),
        }
    }
}

/// Fixture file for broker processes:
///
/// ```text
/// host localhost 127.0.0.1 ::1
/// sysctl vm.overcommit 0
/// ```
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Fixtures {
    pub resolver: FixtureResolver,
    pub sysctl: BTreeMap<String, String>,
}

impl Fixtures {
    pub fn parse(text: &str) -> Result<Fixtures, String> {
        let mut fx = Fixtures::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.as_slice() {
                [] => {}
                ["host", name, addrs @ ..] if !addrs.is_empty() => {
                    let ips = addrs
                        .iter()
                        .map(|a| a.parse::<IpAddr>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| format!("line {}: {e}", i + 1))?;
                    fx.resolver = std::mem::take(&mut fx.resolver).with_host(name, &ips);
                }
                ["sysctl", key, value @ ..] if !value.is_empty() => {
                    fx.sysctl.insert(key.to_string(), value.join(" "));
                }
                _ => return Err(format!("line {}: expected 'host NAME ADDR...' or 'sysctl KEY VALUE'", i + 1)),
            }
        }
        Ok(fx)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, addrs) in &self.resolver.hosts {
            let addrs: Vec<String> = addrs.iter().map(IpAddr::to_string).collect();
            out.push_str(&format!("host {name} {}\n", addrs.join(" ")));
        }
        for (k, v) in &self.sysctl {
            out.push_str(&format!("sysctl {k} {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_resolver_maps_both_ways() {
        let r = FixtureResolver::new().with_host("fixture.host", &["10.0.0.1".parse().unwrap()]);
        let e = r.resolve_addr(&[10, 0, 0, 1], Family::Inet).unwrap();
        assert_eq!(e.name, "fixture.host");
        assert_eq!(r.resolve_name("fixture.host", Family::Inet).unwrap().addresses, [vec![10, 0, 0, 1]]);
        assert_eq!(r.resolve_name("fixture.host", Family::Inet6), Err(ResolutionFailed));
        assert_eq!(r.resolve_addr(&[10, 0, 0, 2], Family::Inet), Err(ResolutionFailed));
        let literal = r.resolve_name("127.0.0.1", Family::Inet).unwrap();
        assert_eq!(literal.addresses, [vec![127, 0, 0, 1]]);
    }

    #[test]
    fn host_entry_travels_in_a_message() {
        let e = FixtureResolver::loopback().resolve_name("localhost", Family::Inet6).unwrap();
        let msg = e.add_to(ChannelMessage::response(4));
        assert_eq!(HostEntry::from_message(&msg), Some(e.clone()));
        assert_eq!(e.to_string(), "localhost AF_INET6 ::1");
    }

    #[test]
    fn fixtures_file_round_trip() {
        let fx = Fixtures::parse("# f\nhost localhost 127.0.0.1 ::1\nsysctl vm.overcommit 0\n").unwrap();
        assert_eq!(fx.sysctl["vm.overcommit"], "0");
        assert_eq!(Fixtures::parse(&fx.to_text()).unwrap(), fx);
        assert!(Fixtures::parse("host onlyname").is_err());
        assert!(Fixtures::parse("host h notanip").is_err());
    }

    #[test]
    fn fixture_sysctl_reads_and_writes() {
        let s = FixtureSysctl::new([("kern.hostname".to_string(), "box".to_string())]);
        assert_eq!(s.read("kern.hostname").unwrap(), "box");
        s.write("kern.hostname", "other").unwrap();
        assert_eq!(s.read("kern.hostname").unwrap(), "other");
        assert_eq!(s.read("vm.nope"), Err(KeyUnavailable));
    }

    #[test]
    fn system_sysctl_maps_dots_to_directories() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("vm")).unwrap();
        std::fs::write(dir.path().join("vm/overcommit"), "1\n").unwrap();
        let s = SystemSysctl::with_root(dir.path());
        assert_eq!(s.read("vm.overcommit").unwrap(), "1");
        assert_eq!(s.read("vm..x"), Err(KeyUnavailable));
        assert_eq!(s.read("vm.missing"), Err(KeyUnavailable));
    }

    #[test]
    fn system_resolver_handles_literals() {
        let e = SystemResolver.resolve_name("127.0.0.1", Family::Inet).unwrap();
        assert_eq!(e.addresses, [vec![127, 0, 0, 1]]);
    }
}
