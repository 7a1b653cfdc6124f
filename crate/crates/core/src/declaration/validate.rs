use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use super::schema::is_sysctl_key;
use super::{Diagnostic, FileOperation, OpenFlag, ResourceGrant, Right, ServiceDeclaration, PLACEHOLDER};

/// Returns every problem found; an empty list means the declaration is
/// usable. Error-severity diagnostics mean it must be rejected.
pub fn validate_declaration(decl: &ServiceDeclaration) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    if decl.binary.is_none() {
        diags.push(Diagnostic::error("binary", "missing required field"));
    }
    for grant in &decl.grants {
        let base = format!("grants.{}", grant.service().short_name());
        let path = |field: &str| format!("{base}.{field}");
        match grant {
            ResourceGrant::FileArgs(g) => {
                if g.operations.is_empty() {
                    diags.push(Diagnostic::error(path("operations"), "no operations granted"));
                }
                for op in &g.operations {
                    if let FileOperation::Unsupported(name) = op {
                        diags.push(Diagnostic::error(
                            path("operations"),
                            format!("unsupported operation {name:?}; only OPEN is served"),
                        ));
                    }
                }
                if g.flags.is_empty() {
                    diags.push(Diagnostic::error(path("flags"), "empty flag set grants nothing"));
                }
                if g.rights.contains(&Right::Write) && !g.flags.iter().any(|f| f.allows_write()) {
                    diags.push(Diagnostic::warning(path("flags"), "WRITE right granted but no flag opens for writing"));
                }
                let read_only_rights = g.rights.contains(&Right::Read) && !g.flags.iter().any(|f| f.allows_read());
                if read_only_rights && g.flags.contains(&OpenFlag::WrOnly) {
                    diags.push(Diagnostic::warning(
                        path("flags"),
                        "READ right granted but files can only be opened write-only",
                    ));
                }
                if g.filenames.is_empty() {
                    diags.push(Diagnostic::error(path("filename"), "no filenames granted"));
                }
                let mut seen = BTreeSet::new();
                for name in &g.filenames {
                    if !seen.insert(name.as_str()) {
                        diags.push(Diagnostic::warning(path("filename"), format!("duplicate filename {name:?}")));
                    }
                    if name.starts_with(PLACEHOLDER) {
                        diags.push(placeholder(path("filename")));
                    }
                }
            }
            ResourceGrant::Dns(g) => {
                if g.families.is_empty() {
                    diags.push(Diagnostic::error(path("families"), "empty family set grants nothing"));
                }
            }
            ResourceGrant::Net(g) => {
                if g.hosts.is_empty() {
                    diags.push(Diagnostic::error(path("hosts"), "no hosts granted"));
                }
                for host in g.hosts.iter().filter(|h| h.is_empty() || h.contains(char::is_whitespace)) {
                    diags.push(Diagnostic::error(path("hosts"), format!("invalid host {host:?}")));
                }
                if g.hosts.iter().any(|h| h.starts_with(PLACEHOLDER)) {
                    diags.push(placeholder(path("hosts")));
                }
                if g.families.is_empty() {
                    diags.push(Diagnostic::error(path("families"), "empty family set grants nothing"));
                }
            }
            ResourceGrant::Sysctl(g) => {
                if g.entries.is_empty() {
                    diags.push(Diagnostic::error(path("entries"), "no sysctl keys granted"));
                }
                for (key, entry) in &g.entries {
                    let p = format!("{base}.entries.{key}");
                    if !is_sysctl_key(key) {
                        diags.push(Diagnostic::error(p.clone(), "sysctl key must be dot-separated identifiers"));
                    }
                    if entry.flags.is_empty() {
                        diags.push(Diagnostic::error(format!("{p}.flag"), "no access flag granted"));
                    }
                    if key.starts_with(PLACEHOLDER) {
                        diags.push(placeholder(p));
                    }
                }
            }
        }
    }
    diags
}

fn placeholder(path: alloc::string::String) -> Diagnostic {
    Diagnostic::warning(path, format!("placeholder {PLACEHOLDER:?} must be replaced"))
}
