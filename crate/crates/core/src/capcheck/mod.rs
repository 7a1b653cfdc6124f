//! Static reachability check: which disallowed syscalls can a program reach
//! through its library calls.
//!
//! Object facts (imports, exports, load order) come from the std crate's ELF
//! reader. Intra-object edges come from edge lists. Nodes are named
//! `object:symbol`; imports nobody exports become `?:symbol`.

mod edges;
mod policy;
mod suggest;

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::declaration::ServiceKind;

pub use edges::{EdgeList, EdgeParseError, EdgeSection, EdgeSource};
pub use policy::{PolicyParseError, PolicyStatus, SinkStatus, SyscallPolicy};
pub use suggest::{suggest_declaration, DraftDeclaration, ServiceMapping};

/// Shipped syscall policy.
pub const DEFAULT_POLICY: &str = include_str!("../../data/default.policy");
/// Shipped libc edge corpus.
pub const DEFAULT_EDGES: &str = include_str!("../../data/libc.edges");

pub fn default_policy() -> SyscallPolicy {
    SyscallPolicy::parse(DEFAULT_POLICY).expect("shipped policy parses")
}

pub fn default_edges() -> EdgeList {
    EdgeList::parse(DEFAULT_EDGES).expect("shipped edge corpus parses")
}

/// Prefix of nodes for imports that no loaded object exports.
pub const UNKNOWN_OBJECT: &str = "?";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Import {
    pub symbol: String,
    /// Library named by symbol versioning, when the object records one.
    pub library: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BinaryFacts {
    /// Object name as it appears in `DT_NEEDED` (file name for the main
    /// binary).
    pub name: String,
    pub imports: Vec<Import>,
    pub exports: Vec<String>,
    /// Transitive needed libraries in breadth-first load order. Only set on
    /// the main binary.
    pub dependencies: Vec<String>,
}

impl BinaryFacts {
    pub fn imports_symbol(&self, symbol: &str) -> bool {
        self.imports.iter().any(|i| i.symbol == symbol)
    }

    pub fn exports_symbol(&self, symbol: &str) -> bool {
        self.exports.iter().any(|e| e == symbol)
    }
}

pub fn qualify(object: &str, symbol: &str) -> String {
    format!("{object}:{symbol}")
}

/// Symbol part of a qualified node name.
pub fn symbol_of(node: &str) -> &str {
    node.rsplit_once(':').map_or(node, |(_, s)| s)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GraphWarning {
    /// The graph has a cycle through these nodes (first node repeated last).
    Cycle(Vec<String>),
    /// An import no loaded object exports.
    UnresolvedImport { object: String, symbol: String },
}

impl fmt::Display for GraphWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphWarning::Cycle(nodes) => write!(f, "call cycle: {}", nodes.join(" -> ")),
            GraphWarning::UnresolvedImport { object, symbol } => {
                write!(f, "{object}: import {symbol} is not exported by any loaded object")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CallGraph {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeMap<String, BTreeSet<String>>,
    pub sinks: BTreeMap<String, String>,
    pub unknown: BTreeSet<String>,
    pub warnings: Vec<GraphWarning>,
}

impl CallGraph {
    pub fn new() -> Self {
        CallGraph::default()
    }

    pub fn add_node(&mut self, node: &str) {
        if !self.nodes.contains(node) {
            self.nodes.insert(node.to_string());
        }
    }

    pub fn add_edge(&mut self, caller: &str, callee: &str) {
        self.add_node(caller);
        self.add_node(callee);
        self.edges.entry(caller.to_string()).or_default().insert(callee.to_string());
    }

    pub fn add_sink(&mut self, node: &str, syscall: &str) {
        self.add_node(node);
        self.sinks.insert(node.to_string(), syscall.to_string());
    }

    pub fn callees(&self, node: &str) -> impl DoubleEndedIterator<Item = &String> {
        self.edges.get(node).into_iter().flatten()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(BTreeSet::len).sum()
    }

    /// One cycle per back edge found by a depth-first walk in node order.
    pub fn find_cycles(&self) -> Vec<Vec<String>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Unseen,
            Active,
            Done,
        }
        let mut mark: BTreeMap<&str, Mark> = self.nodes.iter().map(|n| (n.as_str(), Mark::Unseen)).collect();
        let mut cycles = Vec::new();
        for start in &self.nodes {
            if mark[start.as_str()] != Mark::Unseen {
                continue;
            }
            let mut stack: Vec<(&str, Vec<&str>)> =
                vec![(start.as_str(), self.callees(start).map(String::as_str).rev().collect())];
            mark.insert(start, Mark::Active);
            while let Some((node, pending)) = stack.last_mut() {
                let node = *node;
                match pending.pop() {
                    Some(next) => match mark[next] {
                        Mark::Unseen => {
                            mark.insert(next, Mark::Active);
                            let callees = self.callees(next).map(String::as_str).rev().collect();
                            stack.push((next, callees));
                        }
                        Mark::Active => {
                            let from = stack.iter().position(|(n, _)| *n == next).unwrap_or(0);
                            let mut cycle: Vec<String> = stack[from..].iter().map(|(n, _)| n.to_string()).collect();
                            cycle.push(next.to_string());
                            cycles.push(cycle);
                        }
                        Mark::Done => {}
                    },
                    None => {
                        mark.insert(node, Mark::Done);
                        stack.pop();
                    }
                }
            }
        }
        cycles
    }
}

/// Name of the synthetic entry node standing for the main binary's own code,
/// which is assumed to call every import.
pub fn entry_node(main: &BinaryFacts) -> String {
    qualify(&main.name, "main")
}

/// Builds the program call graph. `facts[0]` is the main binary; the rest
/// are loaded objects in load order, which decides symbol interposition.
pub fn build_call_graph(facts: &[BinaryFacts], sources: &[&dyn EdgeSource]) -> CallGraph {
    let mut graph = CallGraph::new();
    let Some(main) = facts.first() else {
        return graph;
    };

    let mut resolved: BTreeMap<(usize, String), String> = BTreeMap::new();
    for (i, object) in facts.iter().enumerate() {
        for import in &object.imports {
            let provider = facts
                .iter()
                .enumerate()
                .find(|(j, f)| *j != i && f.exports_symbol(&import.symbol))
                .map(|(_, f)| f.name.as_str());
            let node = match provider {
                Some(p) => qualify(p, &import.symbol),
                None => {
                    let node = qualify(UNKNOWN_OBJECT, &import.symbol);
                    graph.unknown.insert(node.clone());
                    graph.warnings.push(GraphWarning::UnresolvedImport {
                        object: object.name.clone(),
                        symbol: import.symbol.clone(),
                    });
                    node
                }
            };
            graph.add_node(&node);
            resolved.insert((i, import.symbol.clone()), node);
        }
    }

    let root = entry_node(main);
    graph.add_node(&root);
    for import in &main.imports {
        let target = resolved[&(0, import.symbol.clone())].clone();
        graph.add_edge(&root, &target);
    }

    for (i, object) in facts.iter().enumerate() {
        let local = |symbol: &str| {
            resolved.get(&(i, symbol.to_string())).cloned().unwrap_or_else(|| qualify(&object.name, symbol))
        };
        for source in sources {
            for section in source.sections_for(&object.name) {
                for (caller, callee) in &section.edges {
                    graph.add_edge(&qualify(&object.name, caller), &local(callee));
                }
                for (symbol, syscall) in &section.sinks {
                    graph.add_sink(&qualify(&object.name, symbol), syscall);
                }
            }
        }
    }

    for cycle in graph.find_cycles() {
        graph.warnings.push(GraphWarning::Cycle(cycle));
    }
    graph
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub entry: String,
    pub syscall: String,
    /// Entry first, sink last.
    pub path: Vec<String>,
    pub status: SinkStatus,
    pub suggested_service: Option<ServiceKind>,
}

impl Violation {
    pub fn path_text(&self) -> String {
        self.path.join(" -> ")
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} => syscall:{} ({}", self.path_text(), self.syscall, self.status.label())?;
        if let SinkStatus::Conditional(rule) = &self.status {
            write!(f, ": {rule}")?;
        }
        f.write_str(")")?;
        if let Some(s) = self.suggested_service {
            write!(f, " [{}]", s.name())?;
        }
        Ok(())
    }
}

/// For every entry, one shortest path (lexicographically least among equal
/// lengths) to each reachable syscall the policy does not allow.
///
/// The search is breadth-first with callees visited in name order, so each
/// node is expanded at most once per entry and the first path found to a
/// node is the least one.
pub fn find_violations(
    graph: &CallGraph,
    entries: &[String],
    policy: &SyscallPolicy,
    mapping: &ServiceMapping,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let entries: BTreeSet<&String> = entries.iter().collect();
    for entry in entries {
        let mut parent: BTreeMap<&str, Option<&str>> = BTreeMap::new();
        let mut queue = VecDeque::new();
        let mut seen_syscalls = BTreeSet::new();
        parent.insert(entry.as_str(), None);
        queue.push_back(entry.as_str());
        while let Some(node) = queue.pop_front() {
            if let Some(syscall) = graph.sinks.get(node) {
                let status = policy.status(syscall);
                if status.is_violation() && seen_syscalls.insert(syscall.as_str()) {
                    let mut path = vec![node.to_string()];
                    let mut cur = node;
                    while let Some(Some(p)) = parent.get(cur) {
                        path.push(p.to_string());
                        cur = p;
                    }
                    path.reverse();
                    let suggested_service = mapping.service_for(&path, syscall);
                    out.push(Violation {
                        entry: entry.clone(),
                        syscall: syscall.clone(),
                        path,
                        status,
                        suggested_service,
                    });
                }
            }
            for next in graph.callees(node) {
                if !parent.contains_key(next.as_str()) {
                    parent.insert(next, Some(node));
                    queue.push_back(next);
                }
            }
        }
    }
    out.sort_by(|a, b| (&a.entry, &a.syscall, &a.path).cmp(&(&b.entry, &b.syscall, &b.path)));
    out
}

#[cfg(test)]
mod tests;
