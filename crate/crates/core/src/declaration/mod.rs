//! Service declarations: which binary to run and which brokered resources
//! it may use.
//!
//! The accepted syntax is a relaxed superset of JSON: keys may be bare
//! words, separators between members are optional, `#`, `//` and `/* */`
//! comments are skipped, and a key repeated inside a block accumulates its
//! values into a list:
//!
//! ```text
//! {
//!     binary: "/bin/cat"
//!     "system.fileargs": {
//!         operations: "OPEN",
//!         flags: "O_RDONLY",
//!         cap_rights: "READ",
//!         filename: "test.txt"
//!     }
//! }
//! ```
//!
//! Strict JSON is accepted unchanged, and [`canonicalize`] always emits
//! strict JSON.

mod canonical;
mod schema;
mod syntax;
mod validate;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub use canonical::{canonicalize, grant_to_text, write_json_string};
pub use schema::{grant_from_text, parse_declaration};
pub use validate::validate_declaration;

/// Largest declaration text accepted by [`parse_declaration`].
pub const MAX_DECLARATION_BYTES: usize = 1024 * 1024;
/// Largest number of `filename` entries in one fileargs grant.
pub const MAX_FILENAMES: usize = 4096;
/// Value that drafted declarations use where the analyzer cannot know the
/// real filename, host or key. [`validate_declaration`] warns about it.
pub const PLACEHOLDER: &str = "CHANGEME";

/// The four brokered services.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ServiceKind {
    FileArgs,
    Dns,
    Net,
    Sysctl,
}

impl ServiceKind {
    pub const ALL: [ServiceKind; 4] = [ServiceKind::FileArgs, ServiceKind::Dns, ServiceKind::Net, ServiceKind::Sysctl];

    pub fn name(self) -> &'static str {
        match self {
            ServiceKind::FileArgs => "system.fileargs",
            ServiceKind::Dns => "system.dns",
            ServiceKind::Net => "system.net",
            ServiceKind::Sysctl => "system.sysctl",
        }
    }

    /// Name used in diagnostic paths (`grants.<short>.<field>`).
    pub fn short_name(self) -> &'static str {
        match self {
            ServiceKind::FileArgs => "fileargs",
            ServiceKind::Dns => "dns",
            ServiceKind::Net => "net",
            ServiceKind::Sysctl => "sysctl",
        }
    }

    pub fn from_name(name: &str) -> Option<ServiceKind> {
        ServiceKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Operations a fileargs broker may perform. Only `OPEN` is served; any
/// other name is kept so validation can report it.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FileOperation {
    Open,
    Unsupported(String),
}

impl FileOperation {
    pub fn parse(raw: &str) -> FileOperation {
        let upper = raw.to_ascii_uppercase();
        match upper.as_str() {
            "OPEN" => FileOperation::Open,
            _ => FileOperation::Unsupported(upper),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            FileOperation::Open => "OPEN",
            FileOperation::Unsupported(name) => name,
        }
    }
}

/// Removes `prefix` from an already-uppercased name if present.
fn strip<'a>(name: &'a str, prefix: &str) -> &'a str {
    name.strip_prefix(prefix).unwrap_or(name)
}

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            #[allow(dead_code)]
            fn from_canonical(name: &str) -> Option<$name> {
                match name {
                    $($text => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(
    /// `open(2)` flags a fileargs grant may allow.
    OpenFlag {
        RdOnly => "RDONLY",
        WrOnly => "WRONLY",
        RdWr => "RDWR",
        Append => "APPEND",
        Creat => "CREAT",
        Trunc => "TRUNC",
        Excl => "EXCL",
        NonBlock => "NONBLOCK",
        Cloexec => "CLOEXEC",
        NoFollow => "NOFOLLOW",
        Directory => "DIRECTORY",
        Sync => "SYNC",
    }
);

impl OpenFlag {
    /// Accepts `RDONLY`, `O_RDONLY` and any case variation of either.
    pub fn parse(raw: &str) -> Option<OpenFlag> {
        let upper = raw.to_ascii_uppercase();
        OpenFlag::from_canonical(strip(&upper, "O_"))
    }

    pub fn is_access_mode(self) -> bool {
        matches!(self, OpenFlag::RdOnly | OpenFlag::WrOnly | OpenFlag::RdWr)
    }

    pub fn allows_write(self) -> bool {
        matches!(self, OpenFlag::WrOnly | OpenFlag::RdWr)
    }

    pub fn allows_read(self) -> bool {
        matches!(self, OpenFlag::RdOnly | OpenFlag::RdWr)
    }
}

named_enum!(
    /// Capability rights attached to descriptors handed out by fileargs.
    Right {
        Read => "READ",
        Write => "WRITE",
        Fcntl => "FCNTL",
        Fstat => "FSTAT",
        Seek => "SEEK",
    }
);

impl Right {
    /// Accepts `READ`, `CAP_READ` and any case variation of either.
    pub fn parse(raw: &str) -> Option<Right> {
        let upper = raw.to_ascii_uppercase();
        Right::from_canonical(strip(&upper, "CAP_"))
    }

    pub fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn mask(rights: &BTreeSet<Right>) -> u8 {
        rights.iter().fold(0, |acc, r| acc | r.bit())
    }

    pub fn from_mask(mask: u8) -> BTreeSet<Right> {
        Right::ALL.iter().copied().filter(|r| mask & r.bit() != 0).collect()
    }
}

named_enum!(
    /// Address families a dns or net grant may allow.
    Family {
        Inet => "AF_INET",
        Inet6 => "AF_INET6",
    }
);

impl Family {
    pub fn parse(raw: &str) -> Option<Family> {
        Family::from_canonical(&raw.to_ascii_uppercase())
    }

    /// Length in bytes of an address of this family.
    pub fn address_len(self) -> usize {
        match self {
            Family::Inet => 4,
            Family::Inet6 => 16,
        }
    }
}

named_enum!(
    /// Lookup directions a dns grant may allow.
    DnsType {
        Name => "NAME",
        Addr => "ADDR",
    }
);

impl DnsType {
    pub fn parse(raw: &str) -> Option<DnsType> {
        DnsType::from_canonical(&raw.to_ascii_uppercase())
    }
}

named_enum!(
    SysctlFlag {
        Read => "CAP_SYSCTL_READ",
        Write => "CAP_SYSCTL_WRITE",
    }
);

impl SysctlFlag {
    /// Accepts `CAP_SYSCTL_READ`, `SYSCTL_READ`, `READ` and the `RDWR`
    /// forms, which expand to both flags.
    pub fn parse(raw: &str) -> Option<&'static [SysctlFlag]> {
        let upper = raw.to_ascii_uppercase();
        let bare = strip(strip(&upper, "CAP_"), "SYSCTL_");
        match bare {
            "READ" => Some(&[SysctlFlag::Read]),
            "WRITE" => Some(&[SysctlFlag::Write]),
            "RDWR" => Some(&[SysctlFlag::Read, SysctlFlag::Write]),
            _ => None,
        }
    }
}

/// How a sysctl key is addressed. Only MIB-style names exist today.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SysctlKeyType {
    Mib,
}

impl SysctlKeyType {
    pub fn name(self) -> &'static str {
        "mib"
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SysctlEntry {
    pub key_type: SysctlKeyType,
    pub flags: BTreeSet<SysctlFlag>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FileArgsGrant {
    pub operations: BTreeSet<FileOperation>,
    pub flags: BTreeSet<OpenFlag>,
    pub rights: BTreeSet<Right>,
    pub filenames: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DnsGrant {
    pub families: BTreeSet<Family>,
    /// Empty means both `NAME` and `ADDR`.
    pub types: BTreeSet<DnsType>,
}

impl DnsGrant {
    pub fn effective_types(&self) -> BTreeSet<DnsType> {
        if self.types.is_empty() {
            DnsType::ALL.iter().copied().collect()
        } else {
            self.types.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NetGrant {
    pub hosts: Vec<String>,
    pub families: BTreeSet<Family>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SysctlGrant {
    pub entries: BTreeMap<String, SysctlEntry>,
}

/// One service block of a declaration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ResourceGrant {
    FileArgs(FileArgsGrant),
    Dns(DnsGrant),
    Net(NetGrant),
    Sysctl(SysctlGrant),
}

impl ResourceGrant {
    pub fn service(&self) -> ServiceKind {
        match self {
            ResourceGrant::FileArgs(_) => ServiceKind::FileArgs,
            ResourceGrant::Dns(_) => ServiceKind::Dns,
            ResourceGrant::Net(_) => ServiceKind::Net,
            ResourceGrant::Sysctl(_) => ServiceKind::Sysctl,
        }
    }

    /// Number of individual whitelist entries, used to size setup work.
    pub fn limit_entries(&self) -> usize {
        match self {
            ResourceGrant::FileArgs(g) => g.filenames.len(),
            ResourceGrant::Dns(g) => g.families.len() * g.effective_types().len(),
            ResourceGrant::Net(g) => g.hosts.len() * g.families.len(),
            ResourceGrant::Sysctl(g) => g.entries.len(),
        }
    }
}

/// A parsed declaration. Grants are kept in [`ServiceKind`] order with at
/// most one grant per service.
///
/// `binary` may be absent in a fragment that only lists services; such a
/// declaration parses but does not validate.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ServiceDeclaration {
    pub binary: Option<String>,
    pub grants: Vec<ResourceGrant>,
}

impl ServiceDeclaration {
    pub fn new(binary: impl Into<String>) -> Self {
        ServiceDeclaration { binary: Some(binary.into()), grants: Vec::new() }
    }

    pub fn grant(&self, service: ServiceKind) -> Option<&ResourceGrant> {
        self.grants.iter().find(|g| g.service() == service)
    }

    pub fn services(&self) -> impl Iterator<Item = ServiceKind> + '_ {
        self.grants.iter().map(ResourceGrant::service)
    }

    /// Adds or replaces the grant for its service, keeping service order.
    pub fn set_grant(&mut self, grant: ResourceGrant) {
        let service = grant.service();
        self.grants.retain(|g| g.service() != service);
        let at = self.grants.iter().position(|g| g.service() > service).unwrap_or(self.grants.len());
        self.grants.insert(at, grant);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Severity {
    Error,
    Warning,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    /// Field locator such as `grants.fileargs.flags`.
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    pub fn error(path: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Error, path: path.into(), message: message.into() }
    }

    pub fn warning(path: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Warning, path: path.into(), message: message.into() }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.severity, self.path, self.message)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DeclarationError {
    TooLarge { size: usize },
    Syntax { line: usize, column: usize, message: String },
    UnknownService { name: String, diagnostic: Diagnostic },
    Schema { path: String, message: String },
}

impl fmt::Display for DeclarationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeclarationError::TooLarge { size } => {
                write!(f, "declaration is {size} bytes, limit is {MAX_DECLARATION_BYTES}")
            }
            DeclarationError::Syntax { line, column, message } => {
                write!(f, "syntax error at {line}:{column}: {message}")
            }
            DeclarationError::UnknownService { diagnostic, .. } => write!(f, "{diagnostic}"),
            DeclarationError::Schema { path, message } => write!(f, "{path}: {message}"),
        }
    }
}

impl core::error::Error for DeclarationError {}
