//! Maps the syntax tree onto [`ServiceDeclaration`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::syntax::{parse_document, Member, Node, Value};
use super::{
    DeclarationError, Diagnostic, DnsGrant, DnsType, Family, FileArgsGrant, FileOperation, NetGrant, OpenFlag,
    ResourceGrant, Right, ServiceDeclaration, ServiceKind, SysctlEntry, SysctlFlag, SysctlGrant, SysctlKeyType,
    MAX_DECLARATION_BYTES, MAX_FILENAMES,
};

/// Parses declaration text.
///
/// Repeated keys inside a block accumulate, so `k: a, k: b` is the same as
/// `k: [a, b]`. Grants come back sorted by service.
pub fn parse_declaration(text: &str) -> Result<ServiceDeclaration, DeclarationError> {
    if text.len() > MAX_DECLARATION_BYTES {
        return Err(DeclarationError::TooLarge { size: text.len() });
    }
    let members = parse_document(text)?;
    let mut binary = None;
    let mut decl = ServiceDeclaration::default();
    for (key, nodes) in group(&members) {
        if key == "binary" {
            binary = Some(single_string(&nodes, "binary")?);
            continue;
        }
        let Some(service) = ServiceKind::from_name(key) else {
            return Err(DeclarationError::UnknownService {
                name: key.to_string(),
                diagnostic: Diagnostic::error(
                    format!("grants.{key}"),
                    format!(
                        "unknown service {key:?}; expected one of system.fileargs, system.dns, system.net, system.sysctl"
                    ),
                ),
            });
        };
        let [node] = nodes.as_slice() else {
            return Err(schema(grant_path(service), "service block given more than once"));
        };
        decl.set_grant(grant_from_node(service, node)?);
    }
    if let Some(binary) = &binary {
        if !binary.starts_with('/') {
            return Err(schema("binary", "must be an absolute path"));
        }
        check_path("binary", binary)?;
    }
    decl.binary = binary;
    Ok(decl)
}

/// Parses a single service block body (the object after the service name),
/// as produced by [`super::grant_to_text`].
pub fn grant_from_text(service: ServiceKind, text: &str) -> Result<ResourceGrant, DeclarationError> {
    if text.len() > MAX_DECLARATION_BYTES {
        return Err(DeclarationError::TooLarge { size: text.len() });
    }
    let members = parse_document(text)?;
    grant_from_members(service, &members)
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> DeclarationError {
    DeclarationError::Schema { path: path.into(), message: message.into() }
}

fn grant_path(service: ServiceKind) -> String {
    format!("grants.{}", service.short_name())
}

/// Groups members by key in first-seen order, flattening arrays.
fn group(members: &[Member]) -> Vec<(&str, Vec<&Node>)> {
    let mut out: Vec<(&str, Vec<&Node>)> = Vec::new();
    for m in members {
        let slot = match out.iter().position(|(k, _)| *k == m.key) {
            Some(i) => &mut out[i].1,
            None => {
                out.push((m.key.as_str(), Vec::new()));
                &mut out.last_mut().unwrap().1
            }
        };
        flatten_into(&m.value, slot);
    }
    out
}

fn flatten_into<'a>(node: &'a Node, out: &mut Vec<&'a Node>) {
    match &node.value {
        Value::Array(items) => items.iter().for_each(|n| flatten_into(n, out)),
        _ => out.push(node),
    }
}

fn string<'a>(node: &'a Node, path: &str) -> Result<&'a str, DeclarationError> {
    match &node.value {
        Value::Str(s) => Ok(s),
        other => {
            Err(schema(path, format!("expected string at {}:{}, found {}", node.line, node.column, other.type_name())))
        }
    }
}

fn single_string(nodes: &[&Node], path: &str) -> Result<String, DeclarationError> {
    match nodes {
        [node] => Ok(string(node, path)?.to_string()),
        [] => Err(schema(path, "expected a value")),
        _ => Err(schema(path, "given more than once")),
    }
}

fn check_path(path: &str, value: &str) -> Result<(), DeclarationError> {
    if value.is_empty() {
        return Err(schema(path, "path must not be empty"));
    }
    if value.contains('\0') {
        return Err(schema(path, "path must not contain NUL"));
    }
    Ok(())
}

/// `kern.hostname`, `vm.overcommit`: identifiers joined by dots.
pub(crate) fn is_sysctl_key(key: &str) -> bool {
    !key.is_empty()
        && key.split('.').all(|part| {
            part.starts_with(|c: char| c.is_ascii_alphabetic() || c == '_')
                && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        })
}

fn names<T: Ord>(
    nodes: &[&Node],
    path: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<BTreeSet<T>, DeclarationError> {
    nodes
        .iter()
        .map(|n| {
            let raw = string(n, path)?;
            parse(raw).ok_or_else(|| schema(path, format!("unknown value {raw:?}")))
        })
        .collect()
}

fn grant_from_node(service: ServiceKind, node: &Node) -> Result<ResourceGrant, DeclarationError> {
    match &node.value {
        Value::Object(members) => grant_from_members(service, members),
        other => Err(schema(grant_path(service), format!("expected object, found {}", other.type_name()))),
    }
}

fn grant_from_members(service: ServiceKind, members: &[Member]) -> Result<ResourceGrant, DeclarationError> {
    let base = grant_path(service);
    let field = |name: &str| format!("{base}.{name}");
    match service {
        ServiceKind::FileArgs => {
            let mut g = FileArgsGrant::default();
            for (key, nodes) in group(members) {
                let path = field(key);
                match key {
                    "operations" => {
                        for n in &nodes {
                            g.operations.insert(FileOperation::parse(string(n, &path)?));
                        }
                    }
                    "flags" => g.flags.extend(names(&nodes, &path, OpenFlag::parse)?),
                    "cap_rights" => g.rights.extend(names(&nodes, &path, Right::parse)?),
                    "filename" => {
                        for n in &nodes {
                            let name = string(n, &path)?;
                            check_path(&path, name)?;
                            g.filenames.push(name.to_string());
                        }
                        if g.filenames.len() > MAX_FILENAMES {
                            return Err(schema(path, format!("more than {MAX_FILENAMES} filenames")));
                        }
                    }
                    _ => return Err(schema(path, "unknown field")),
                }
            }
            Ok(ResourceGrant::FileArgs(g))
        }
        ServiceKind::Dns => {
            let mut g = DnsGrant::default();
            for (key, nodes) in group(members) {
                let path = field(key);
                match key {
                    "family" => g.families.extend(names(&nodes, &path, Family::parse)?),
                    "type" => g.types.extend(names(&nodes, &path, DnsType::parse)?),
                    _ => return Err(schema(path, "unknown field")),
                }
            }
            Ok(ResourceGrant::Dns(g))
        }
        ServiceKind::Net => {
            let mut g = NetGrant::default();
            for (key, nodes) in group(members) {
                let path = field(key);
                match key {
                    "family" => g.families.extend(names(&nodes, &path, Family::parse)?),
                    "host" => {
                        for n in &nodes {
                            let host = string(n, &path)?;
                            if host.is_empty() || host.contains(char::is_whitespace) {
                                return Err(schema(path, format!("invalid host {host:?}")));
                            }
                            g.hosts.push(host.to_string());
                        }
                    }
                    _ => return Err(schema(path, "unknown field")),
                }
            }
            Ok(ResourceGrant::Net(g))
        }
        ServiceKind::Sysctl => {
            let mut entries = BTreeMap::new();
            for (key, nodes) in group(members) {
                let path = format!("{base}.entries.{key}");
                if !is_sysctl_key(key) {
                    return Err(schema(path, "sysctl key must be dot-separated identifiers"));
                }
                let [node] = nodes.as_slice() else {
                    return Err(schema(path, "sysctl key given more than once"));
                };
                let Value::Object(body) = &node.value else {
                    return Err(schema(path, format!("expected object, found {}", node.value.type_name())));
                };
                entries.insert(key.to_string(), sysctl_entry(&path, body)?);
            }
            Ok(ResourceGrant::Sysctl(SysctlGrant { entries }))
        }
    }
}

fn sysctl_entry(base: &str, body: &[Member]) -> Result<SysctlEntry, DeclarationError> {
    let mut key_type = None;
    let mut flags = BTreeSet::new();
    for (key, nodes) in group(body) {
        let path = format!("{base}.{key}");
        match key {
            "type" => {
                let raw = single_string(&nodes, &path)?;
                if !raw.eq_ignore_ascii_case("mib") {
                    return Err(schema(path, format!("unsupported key type {raw:?}")));
                }
                key_type = Some(SysctlKeyType::Mib);
            }
            "flag" => {
                for n in &nodes {
                    let raw = string(n, &path)?;
                    let parsed =
                        SysctlFlag::parse(raw).ok_or_else(|| schema(&path, format!("unknown value {raw:?}")))?;
                    flags.extend(parsed.iter().copied());
                }
            }
            _ => return Err(schema(path, "unknown field")),
        }
    }
    Ok(SysctlEntry { key_type: key_type.unwrap_or(SysctlKeyType::Mib), flags })
}
