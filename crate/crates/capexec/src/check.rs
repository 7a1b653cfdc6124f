//! The `check` pipeline: ELF facts, edge corpus and policy in; violation
//! report and draft declaration out.

use std::path::{Path, PathBuf};

use capexec_core::capcheck::{
    build_call_graph, default_edges, default_policy, entry_node, find_violations, suggest_declaration,
    DraftDeclaration, EdgeList, EdgeSource, GraphWarning, ServiceMapping, SyscallPolicy, Violation,
};
use serde::Serialize;

use crate::elf::{load_program, FactsError};

#[derive(Debug, thiserror::Error)]
pub enum CheckError {
    #[error(transparent)]
    Facts(#[from] FactsError),
    #[error("{path}: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    MalformedEdges { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    MalformedPolicy { path: PathBuf, message: String },
}

impl CheckError {
    /// Exit status for the command line.
    pub fn exit_code(&self) -> i32 {
        match self {
            CheckError::MalformedEdges { .. } | CheckError::MalformedPolicy { .. } => 65,
            CheckError::Facts(_) | CheckError::Unreadable { .. } => 66,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckOptions {
    /// Extra edge files, read after the built-in corpus.
    pub edges: Vec<PathBuf>,
    /// Policy lines that override the built-in policy.
    pub policy: Option<PathBuf>,
    pub search_path: Vec<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub binary: String,
    pub entry: String,
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
    pub draft: DraftDeclaration,
}

#[derive(Serialize)]
struct JsonViolation<'a> {
    entry: &'a str,
    syscall: &'a str,
    status: &'a str,
    path: &'a [String],
    suggestion: Option<&'static str>,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    binary: &'a str,
    violations: Vec<JsonViolation<'a>>,
    warnings: &'a [String],
}

impl CheckReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let n = self.violations.len();
        out.push_str(&format!("{}: {n} violation{}\n", self.binary, if n == 1 { "" } else { "s" }));
        for v in &self.violations {
            out.push_str(&format!("violation: {} reaches {} ({})\n", v.entry, v.syscall, v.status.label()));
            out.push_str(&format!("  path: {}\n", v.path_text()));
            match v.suggested_service {
                Some(s) => out.push_str(&format!("  suggest: {}\n", s.name())),
                None => out.push_str("  suggest: none (no broker provides this)\n"),
            }
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let report = JsonReport {
            binary: &self.binary,
            violations: self
                .violations
                .iter()
                .map(|v| JsonViolation {
                    entry: &v.entry,
                    syscall: &v.syscall,
                    status: v.status.label(),
                    path: &v.path,
                    suggestion: v.suggested_service.map(|s| s.name()),
                })
                .collect(),
            warnings: &self.warnings,
        };
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
    }
}

fn read(path: &Path) -> Result<String, CheckError> {
    std::fs::read_to_string(path)
        .map_err(|e| CheckError::Unreadable { path: path.to_path_buf(), message: e.to_string() })
}

pub fn check_binary(binary: &Path, opts: &CheckOptions) -> Result<CheckReport, CheckError> {
    let mut lists = vec![default_edges()];
    for path in &opts.edges {
        let list = EdgeList::parse(&read(path)?)
            .map_err(|e| CheckError::MalformedEdges { path: path.clone(), message: e.to_string() })?;
        lists.push(list);
    }
    let mut policy: SyscallPolicy = default_policy();
    if let Some(path) = &opts.policy {
        policy
            .extend_from_text(&read(path)?)
            .map_err(|e| CheckError::MalformedPolicy { path: path.clone(), message: e.to_string() })?;
    }

    let program = load_program(binary, &opts.search_path)?;
    let sources: Vec<&dyn EdgeSource> = lists.iter().map(|l| l as &dyn EdgeSource).collect();
    let graph = build_call_graph(&program.facts, &sources);
    let entry = entry_node(&program.facts[0]);
    let violations = find_violations(&graph, std::slice::from_ref(&entry), &policy, &ServiceMapping::default());

    let mut warnings = program.warnings;
    warnings.extend(
        graph
            .warnings
            .iter()
            .filter(|w| match w {
                GraphWarning::UnresolvedImport { object, symbol } => {
                    !program.weak_imports.contains(&(object.clone(), symbol.clone()))
                }
                GraphWarning::Cycle(_) => true,
            })
            .map(ToString::to_string),
    );
    let name = binary.display().to_string();
    let draft = suggest_declaration(Some(&name), &violations);
    Ok(CheckReport { binary: name, entry, violations, warnings, draft })
}
