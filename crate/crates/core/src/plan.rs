//! Launch plans and the call-redirection table.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::declaration::{Diagnostic, ServiceDeclaration, ServiceKind};
use crate::limits::Command;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Backend {
    /// Brokers run as tasks and enforcement is done by the in-process
    /// gateway.
    #[default]
    Simulation,
    /// Brokers run as separate processes and the workload is exec'd with
    /// inherited channel sockets.
    Native,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Simulation => "simulation",
            Backend::Native => "native",
        }
    }

    pub fn parse(s: &str) -> Option<Backend> {
        match s {
            "simulation" => Some(Backend::Simulation),
            "native" => Some(Backend::Native),
            _ => None,
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RedirectTarget {
    pub service: ServiceKind,
    pub command: Command,
}

/// Ambient calls that are rerouted to a broker.
pub const DEFAULT_REDIRECTS: [(&str, Command); 6] = [
    ("open", Command::Open),
    ("gethostbyname", Command::ResolveName),
    ("gethostbyaddr", Command::ResolveAddr),
    ("connect", Command::Connect),
    ("bind", Command::Bind),
    ("sysctlbyname", Command::Read),
];

pub fn default_redirects() -> BTreeMap<String, RedirectTarget> {
    DEFAULT_REDIRECTS
        .iter()
        .map(|(call, command)| (call.to_string(), RedirectTarget { service: command.service(), command: *command }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SandboxPlan {
    pub declaration: ServiceDeclaration,
    pub redirects: BTreeMap<String, RedirectTarget>,
    pub backend: Backend,
    /// One warning per redirect dropped because its service is not granted.
    pub warnings: Vec<Diagnostic>,
}

impl SandboxPlan {
    pub fn redirect(&self, call: &str) -> Option<RedirectTarget> {
        self.redirects.get(call).copied()
    }

    /// Total whitelist entries across grants; setup work scales with it.
    pub fn limit_entries(&self) -> usize {
        self.declaration.grants.iter().map(|g| g.limit_entries()).sum()
    }
}

/// Keeps only the redirects whose service has a grant.
pub fn build_plan(decl: &ServiceDeclaration, backend: Backend) -> SandboxPlan {
    let mut redirects = BTreeMap::new();
    let mut warnings = Vec::new();
    for (call, target) in default_redirects() {
        if decl.grant(target.service).is_some() {
            redirects.insert(call, target);
        } else {
            warnings.push(Diagnostic::warning(
                format!("redirects.{call}"),
                format!("dropped: {} is not granted", target.service),
            ));
        }
    }
    SandboxPlan { declaration: decl.clone(), redirects, backend, warnings }
}
