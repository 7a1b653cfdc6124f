use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use super::{symbol_of, Violation};
use crate::declaration::{grant_to_text, write_json_string};
use crate::declaration::{
    DnsGrant, Family, FileArgsGrant, FileOperation, NetGrant, OpenFlag, ResourceGrant, Right, ServiceDeclaration,
    ServiceKind, SysctlEntry, SysctlFlag, SysctlGrant, SysctlKeyType, PLACEHOLDER,
};

/// Which broker could serve a violating call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServiceMapping {
    pub by_syscall: BTreeMap<String, ServiceKind>,
    /// Checked first: a resolver symbol on the path means the syscall is
    /// part of a name lookup.
    pub by_symbol: BTreeMap<String, ServiceKind>,
}

impl Default for ServiceMapping {
    fn default() -> Self {
        let by_syscall = [
            ("open", ServiceKind::FileArgs),
            ("openat", ServiceKind::FileArgs),
            ("connect", ServiceKind::Net),
            ("bind", ServiceKind::Net),
            ("sysctl", ServiceKind::Sysctl),
        ];
        let by_symbol = ["gethostbyname", "gethostbyaddr", "getaddrinfo", "getnameinfo", "res_query"];
        ServiceMapping {
            by_syscall: by_syscall.iter().map(|(s, k)| (s.to_string(), *k)).collect(),
            by_symbol: by_symbol.iter().map(|s| (s.to_string(), ServiceKind::Dns)).collect(),
        }
    }
}

impl ServiceMapping {
    pub fn service_for(&self, path: &[String], syscall: &str) -> Option<ServiceKind> {
        path.iter()
            .find_map(|n| self.by_symbol.get(symbol_of(n)).copied())
            .or_else(|| self.by_syscall.get(syscall).copied())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DraftDeclaration {
    pub declaration: ServiceDeclaration,
    /// Violations no service can mediate.
    pub residual: Vec<Violation>,
    /// Declaration text with explanatory comments; parses back to
    /// `declaration`.
    pub text: String,
}

fn placeholder_grant(service: ServiceKind) -> ResourceGrant {
    match service {
        ServiceKind::FileArgs => ResourceGrant::FileArgs(FileArgsGrant {
            operations: [FileOperation::Open].into_iter().collect(),
            flags: [OpenFlag::RdOnly].into_iter().collect(),
            rights: [Right::Read].into_iter().collect(),
            filenames: [PLACEHOLDER.to_string()].into(),
        }),
        ServiceKind::Dns => ResourceGrant::Dns(DnsGrant {
            families: [Family::Inet, Family::Inet6].into_iter().collect(),
            types: BTreeSet::new(),
        }),
        ServiceKind::Net => ResourceGrant::Net(NetGrant {
            hosts: [PLACEHOLDER.to_string()].into(),
            families: [Family::Inet].into_iter().collect(),
        }),
        ServiceKind::Sysctl => ResourceGrant::Sysctl(SysctlGrant {
            entries: [(
                PLACEHOLDER.to_string(),
                SysctlEntry { key_type: SysctlKeyType::Mib, flags: [SysctlFlag::Read].into_iter().collect() },
            )]
            .into(),
        }),
    }
}

fn hint(service: ServiceKind) -> &'static str {
    match service {
        ServiceKind::FileArgs => "list the files the program opens and narrow flags and rights",
        ServiceKind::Dns => "drop the address families the program does not resolve",
        ServiceKind::Net => "list the hosts the program connects to or binds",
        ServiceKind::Sysctl => "list the sysctl keys the program reads",
    }
}

/// Drafts a declaration with one placeholder grant per implicated service.
pub fn suggest_declaration(binary: Option<&str>, violations: &[Violation]) -> DraftDeclaration {
    let mut declaration = ServiceDeclaration { binary: binary.map(str::to_string), grants: Vec::new() };
    let mut reasons: BTreeMap<ServiceKind, BTreeSet<&str>> = BTreeMap::new();
    let mut residual = Vec::new();
    for v in violations {
        match v.suggested_service {
            Some(s) => {
                reasons.entry(s).or_default().insert(&v.syscall);
            }
            None => residual.push(v.clone()),
        }
    }
    for service in reasons.keys() {
        declaration.set_grant(placeholder_grant(*service));
    }

    let mut text = String::from("# Draft service declaration written by capexec check.\n");
    if residual.is_empty() {
        text.push_str("# Every reported violation maps to a service.\n");
    } else {
        text.push_str("# Residual violations (no service can mediate these):\n");
        for v in &residual {
            let _ = writeln!(text, "#   {v}");
        }
    }
    text.push_str("{\n");
    let mut first = true;
    if let Some(b) = &declaration.binary {
        text.push_str("  \"binary\": ");
        write_json_string(&mut text, b);
        first = false;
    }
    for grant in &declaration.grants {
        let service = grant.service();
        if !first {
            text.push_str(",\n");
        } else {
            first = false;
        }
        let syscalls: Vec<&str> = reasons[&service].iter().copied().collect();
        let _ = writeln!(text, "\n  # reached: {}", syscalls.join(", "));
        let _ = writeln!(text, "  # {}", hint(service));
        text.push_str("  ");
        write_json_string(&mut text, service.name());
        let _ = write!(text, ": {}", grant_to_text(grant));
    }
    text.push_str(if first { "}\n" } else { "\n}\n" });
    DraftDeclaration { declaration, residual, text }
}
