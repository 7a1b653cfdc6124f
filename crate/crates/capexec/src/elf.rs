//! Import/export facts from ELF dynamic symbol tables, and loading a
//! program together with its needed libraries.

use std::collections::{BTreeSet, VecDeque};
use std::path::{Path, PathBuf};

use capexec_core::capcheck::{BinaryFacts, Import};
use object::elf;
use object::read::elf::{Dyn, ElfFile, FileHeader};
use object::{Object, ObjectSymbol, SymbolSection};

#[derive(Debug, thiserror::Error)]
pub enum FactsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: not an ELF object file")]
    NotAnObjectFile(PathBuf),
    #[error("{path}: malformed symbol table: {message}")]
    MalformedSymbolTable { path: PathBuf, message: String },
}

/// Facts for one object plus its direct `DT_NEEDED` entries.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ObjectFacts {
    pub facts: BinaryFacts,
    pub needed: Vec<String>,
    /// Weak undefined symbols; the loader may leave these unresolved.
    pub weak_imports: BTreeSet<String>,
    /// No dynamic section at all.
    pub is_static: bool,
}

fn malformed(path: &Path, err: impl std::fmt::Display) -> FactsError {
    FactsError::MalformedSymbolTable { path: path.to_path_buf(), message: err.to_string() }
}

pub fn extract_facts(path: &Path) -> Result<ObjectFacts, FactsError> {
    let data = std::fs::read(path).map_err(|source| FactsError::Io { path: path.to_path_buf(), source })?;
    let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    facts_from_bytes(&name, &data).map_err(|e| match e {
        BytesError::NotElf => FactsError::NotAnObjectFile(path.to_path_buf()),
        BytesError::Malformed(m) => malformed(path, m),
    })
}

enum BytesError {
    NotElf,
    Malformed(String),
}

fn facts_from_bytes(name: &str, data: &[u8]) -> Result<ObjectFacts, BytesError> {
    let kind = object::FileKind::parse(data).map_err(|_| BytesError::NotElf)?;
    match kind {
        object::FileKind::Elf32 => facts_from_elf::<elf::FileHeader32<object::Endianness>>(name, data),
        object::FileKind::Elf64 => facts_from_elf::<elf::FileHeader64<object::Endianness>>(name, data),
        _ => Err(BytesError::NotElf),
    }
}

fn facts_from_elf<Elf: FileHeader<Endian = object::Endianness>>(
    name: &str,
    data: &[u8],
) -> Result<ObjectFacts, BytesError> {
    let bad = |e: object::Error| BytesError::Malformed(e.to_string());
    let file = ElfFile::<Elf>::parse(data).map_err(bad)?;
    let endian = file.endian();

    let mut imports = Vec::new();
    let mut seen = BTreeSet::new();
    for import in file.imports().map_err(bad)? {
        let symbol = String::from_utf8_lossy(import.name()).into_owned();
        if seen.insert(symbol.clone()) {
            let lib = String::from_utf8_lossy(import.library()).into_owned();
            imports.push(Import { symbol, library: (!lib.is_empty()).then_some(lib) });
        }
    }

    let mut exports = BTreeSet::new();
    let mut weak_imports = BTreeSet::new();
    for sym in file.dynamic_symbols() {
        let n = sym.name().map_err(bad)?;
        if n.is_empty() {
            continue;
        }
        if sym.is_definition() && sym.is_global() && sym.section() != SymbolSection::Absolute {
            exports.insert(n.to_string());
        } else if sym.is_undefined() && sym.is_weak() {
            weak_imports.insert(n.to_string());
        }
    }

    let sections = file.elf_section_table();
    let mut needed = Vec::new();
    let dynamic = sections.dynamic(endian, data).map_err(bad)?;
    if let Some((entries, link)) = dynamic {
        let strings = sections.strings(endian, data, link).map_err(bad)?;
        for entry in entries {
            if entry.tag32(endian) == Some(elf::DT_NEEDED) {
                let lib = entry.string(endian, strings).map_err(bad)?;
                needed.push(String::from_utf8_lossy(lib).into_owned());
            }
        }
    }

    Ok(ObjectFacts {
        facts: BinaryFacts {
            name: name.to_string(),
            imports,
            exports: exports.into_iter().collect(),
            dependencies: Vec::new(),
        },
        is_static: dynamic.is_none(),
        needed,
        weak_imports,
    })
}

/// Library directories searched for needed objects: `LD_LIBRARY_PATH`
/// first, then the usual system locations.
pub fn default_search_path() -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = std::env::var_os("LD_LIBRARY_PATH")
        .map(|v| std::env::split_paths(&v).filter(|p| !p.as_os_str().is_empty()).collect())
        .unwrap_or_default();
    for d in [
        "/lib/x86_64-linux-gnu",
        "/usr/lib/x86_64-linux-gnu",
        "/lib/aarch64-linux-gnu",
        "/usr/lib/aarch64-linux-gnu",
        "/lib64",
        "/usr/lib64",
        "/lib",
        "/usr/lib",
        "/usr/local/lib",
    ] {
        dirs.push(PathBuf::from(d));
    }
    dirs
}

/// The main binary followed by its libraries in breadth-first load order.
#[derive(Clone, Debug, Default)]
pub struct Program {
    pub facts: Vec<BinaryFacts>,
    /// Needed names no search directory provided.
    pub unresolved: Vec<String>,
    /// (object, symbol) pairs for weak undefined symbols.
    pub weak_imports: BTreeSet<(String, String)>,
    pub warnings: Vec<String>,
}

pub fn load_program(binary: &Path, search: &[PathBuf]) -> Result<Program, FactsError> {
    let main = extract_facts(binary)?;
    let mut program = Program::default();
    if main.is_static {
        program.warnings.push(format!("{}: statically linked; library calls cannot be analyzed", binary.display()));
    }
    let mut queue: VecDeque<String> = main.needed.iter().cloned().collect();
    let mut visited: BTreeSet<String> = queue.iter().cloned().collect();
    let mut order = Vec::new();
    let mut libs = Vec::new();
    while let Some(lib) = queue.pop_front() {
        order.push(lib.clone());
        let found = if lib.contains('/') {
            Some(PathBuf::from(&lib)).filter(|p| p.is_file())
        } else {
            search.iter().map(|d| d.join(&lib)).find(|p| p.is_file())
        };
        let Some(path) = found else {
            program.warnings.push(format!("dependency {lib} not found; its symbols are unknown"));
            program.unresolved.push(lib);
            continue;
        };
        match extract_facts(&path) {
            Ok(mut lf) => {
                for n in &lf.needed {
                    if visited.insert(n.clone()) {
                        queue.push_back(n.clone());
                    }
                }
                program.weak_imports.extend(lf.weak_imports.iter().map(|w| (lib.clone(), w.clone())));
                lf.facts.name = lib;
                libs.push(lf.facts);
            }
            Err(e) => {
                program.warnings.push(format!("dependency {lib}: {e}"));
                program.unresolved.push(lib);
            }
        }
    }
    program.weak_imports.extend(main.weak_imports.iter().map(|w| (main.facts.name.clone(), w.clone())));
    let mut main_facts = main.facts;
    main_facts.dependencies = order;
    program.facts.push(main_facts);
    program.facts.extend(libs);
    Ok(program)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_elf() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("script.sh");
        std::fs::write(&p, "#!/bin/sh\necho hi\n").unwrap();
        assert!(matches!(extract_facts(&p), Err(FactsError::NotAnObjectFile(_))));
        assert!(matches!(extract_facts(&dir.path().join("missing")), Err(FactsError::Io { .. })));
    }

    #[test]
    fn truncated_elf_is_malformed() {
        let exe = std::env::current_exe().unwrap();
        let data = std::fs::read(exe).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cut");
        std::fs::write(&p, &data[..200]).unwrap();
        assert!(matches!(extract_facts(&p), Err(FactsError::MalformedSymbolTable { .. })));
    }

    #[test]
    fn own_test_binary_needs_libc() {
        let exe = std::env::current_exe().unwrap();
        let program = load_program(&exe, &default_search_path()).unwrap();
        let main = &program.facts[0];
        assert!(main.dependencies.iter().any(|d| d.starts_with("libc.so")), "{:?}", main.dependencies);
        assert!(main.imports.iter().any(|i| i.symbol == "malloc" || i.symbol == "write"));
        let libc = program.facts.iter().find(|f| f.name.starts_with("libc.so")).unwrap();
        assert!(libc.exports_symbol("fgets"));
    }
}
