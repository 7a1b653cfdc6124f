//! Text edge lists: intra-object call edges and syscall sinks.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

/// The edges and sinks one section contributes, with names as written.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeSection {
    pub edges: Vec<(String, String)>,
    /// `(symbol, syscall)` pairs.
    pub sinks: Vec<(String, String)>,
}

/// Supplies intra-object edges for the call graph builder.
pub trait EdgeSource {
    /// Every section that applies to the object called `object`.
    fn sections_for(&self, object: &str) -> Vec<&EdgeSection>;
}

/// Parsed edge-list file.
///
/// ```text
/// [libc.so.*]
/// fgets -> __srefill
/// __srefill -> _open
/// _open => syscall:open
/// ```
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeList {
    sections: Vec<(Vec<String>, EdgeSection)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for EdgeParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl core::error::Error for EdgeParseError {}

fn is_symbol(s: &str) -> bool {
    !s.is_empty() && !s.contains(char::is_whitespace)
}

/// `name` matches `pattern` exactly, or by prefix when the pattern ends in `*`.
pub(crate) fn object_matches(pattern: &str, name: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => name.starts_with(prefix),
        None => pattern == name,
    }
}

impl EdgeList {
    pub fn parse(text: &str) -> Result<EdgeList, EdgeParseError> {
        let mut list = EdgeList::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| EdgeParseError { line: line_no, message };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('[') {
                let names = header.strip_suffix(']').ok_or_else(|| err("unterminated section header".to_string()))?;
                let names: Vec<String> = names.split_whitespace().map(str::to_string).collect();
                if names.is_empty() {
                    return Err(err("empty section header".to_string()));
                }
                list.sections.push((names, EdgeSection::default()));
                continue;
            }
            let Some((_, section)) = list.sections.last_mut() else {
                return Err(err("edge outside of a [object] section".to_string()));
            };
            if let Some((sym, target)) = line.split_once("=>") {
                let (sym, target) = (sym.trim(), target.trim());
                let syscall = target
                    .strip_prefix("syscall:")
                    .filter(|s| is_symbol(s))
                    .ok_or_else(|| err(format!("expected syscall:NAME, found {target:?}")))?;
                if !is_symbol(sym) {
                    return Err(err(format!("invalid symbol {sym:?}")));
                }
                section.sinks.push((sym.to_string(), syscall.to_string()));
            } else if let Some((caller, callee)) = line.split_once("->") {
                let (caller, callee) = (caller.trim(), callee.trim());
                if !is_symbol(caller) || !is_symbol(callee) {
                    return Err(err(format!("invalid edge {line:?}")));
                }
                section.edges.push((caller.to_string(), callee.to_string()));
            } else {
                return Err(err(format!("expected 'a -> b' or 'a => syscall:NAME', found {line:?}")));
            }
        }
        Ok(list)
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }
}

impl EdgeSource for EdgeList {
    fn sections_for(&self, object: &str) -> Vec<&EdgeSection> {
        self.sections
            .iter()
            .filter(|(names, _)| names.iter().any(|p| object_matches(p, object)))
            .map(|(_, s)| s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_edges_and_sinks() {
        let list = EdgeList::parse(
            "# corpus\n[libc.so.* libc.so]\nfgets -> __srefill # buffered\n_open => syscall:open\n\n[app]\nmain -> fgets\n",
        )
        .unwrap();
        let libc = list.sections_for("libc.so.7");
        assert_eq!(libc.len(), 1);
        assert_eq!(libc[0].edges, [("fgets".to_string(), "__srefill".to_string())]);
        assert_eq!(libc[0].sinks, [("_open".to_string(), "open".to_string())]);
        assert_eq!(list.sections_for("app").len(), 1);
        assert!(list.sections_for("libm.so.5").is_empty());
    }

    #[test]
    fn reports_line_numbers() {
        let err = EdgeList::parse("[a]\nx -> y\nx y\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert_eq!(EdgeList::parse("x -> y").unwrap_err().line, 1);
        assert_eq!(EdgeList::parse("[a]\nx => open").unwrap_err().line, 2);
        assert_eq!(EdgeList::parse("[a\n").unwrap_err().line, 1);
    }

    #[test]
    fn shipped_corpus_parses() {
        let list = EdgeList::parse(super::super::DEFAULT_EDGES).unwrap();
        assert!(!list.sections_for("libc.so.6").is_empty());
        assert!(!list.sections_for("libc.so.7").is_empty());
    }
}
