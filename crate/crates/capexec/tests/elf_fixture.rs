//! Facts and checks against objects built by the system C compiler.

use std::path::{Path, PathBuf};
use std::process::Command;

use capexec::check::{check_binary, CheckOptions};
use capexec::elf::{default_search_path, extract_facts, load_program};
use capexec_core::declaration::{parse_declaration, ResourceGrant};
use capexec_core::ServiceKind;

fn compile(dir: &Path, name: &str, source: &str, flags: &[&str]) -> PathBuf {
    let src = dir.join(format!("{name}.c"));
    std::fs::write(&src, source).unwrap();
    let out = dir.join(name);
    let status = Command::new("cc").args(flags).arg("-o").arg(&out).arg(&src).status().expect("cc runs");
    assert!(status.success(), "cc failed for {name}");
    out
}

const LIBRARY: &str = "#include <stdio.h>\nint f(void) { puts(\"f\"); return 0; }\nint g(void) { return 1; }\n";
const FGETS: &str =
    "#include <stdio.h>\nint main(void) {\n\tchar buf[64];\n\treturn fgets(buf, sizeof buf, stdin) ? buf[0] : 0;\n}\n";

#[test]
fn shared_object_imports_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let lib = compile(dir.path(), "libfg.so", LIBRARY, &["-shared", "-fPIC", "-nostartfiles"]);
    let facts = extract_facts(&lib).unwrap();
    let imports: Vec<&str> = facts.facts.imports.iter().map(|i| i.symbol.as_str()).collect();
    assert_eq!(imports, ["puts"]);
    assert!(facts.facts.imports[0].library.as_deref().is_some_and(|l| l.starts_with("libc.so")));
    assert_eq!(facts.facts.exports, ["f", "g"]);
    assert!(facts.needed.iter().any(|n| n.starts_with("libc.so")));
    assert!(!facts.is_static);
}

#[test]
fn relocatable_object_has_no_dynamic_facts() {
    let dir = tempfile::tempdir().unwrap();
    let obj = compile(dir.path(), "fg.o", LIBRARY, &["-c", "-fPIC"]);
    let facts = extract_facts(&obj).unwrap();
    assert!(facts.facts.imports.is_empty());
    assert!(facts.facts.exports.is_empty());
    assert!(facts.needed.is_empty());
}

#[test]
fn static_binary_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let bin = compile(dir.path(), "static", "int main(void) { return 0; }\n", &["-static"]);
    let program = load_program(&bin, &default_search_path()).unwrap();
    assert_eq!(program.facts.len(), 1);
    assert!(program.warnings.iter().any(|w| w.contains("statically linked")), "{:?}", program.warnings);
}

#[test]
fn fgets_reaches_open() {
    let dir = tempfile::tempdir().unwrap();
    let bin = compile(dir.path(), "fgets_demo", FGETS, &["-O0", "-fno-stack-protector"]);
    let opts = CheckOptions { search_path: default_search_path(), ..CheckOptions::default() };
    let report = check_binary(&bin, &opts).unwrap();
    assert_eq!(report.violations.len(), 1, "{}", report.to_text());
    let v = &report.violations[0];
    assert_eq!(v.syscall, "open");
    assert_eq!(v.path.first().map(String::as_str), Some("fgets_demo:main"));
    assert!(v.path.iter().any(|n| n.ends_with(":fgets")), "{:?}", v.path);
    assert_eq!(v.suggested_service, Some(ServiceKind::FileArgs));
    // Weak references such as __gmon_start__ may stay unresolved.
    assert!(!report.warnings.iter().any(|w| w.contains("__gmon_start__")), "{:?}", report.warnings);

    let draft = parse_declaration(&report.draft.text).unwrap();
    assert!(matches!(draft.grant(ServiceKind::FileArgs), Some(ResourceGrant::FileArgs(_))));

    let out_decl = dir.path().join("draft.svc");
    let out = Command::new(env!("CARGO_BIN_EXE_capexec"))
        .args(["check", "--format", "json", "--emit-declaration"])
        .arg(&out_decl)
        .arg(&bin)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["violations"].as_array().unwrap().len(), 1);
    assert_eq!(json["violations"][0]["syscall"], "open");
    assert_eq!(json["violations"][0]["suggestion"], "system.fileargs");
    assert_eq!(std::fs::read_to_string(&out_decl).unwrap(), report.draft.text);
}

#[test]
fn clean_program_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let bin = compile(
        dir.path(),
        "clean",
        "#include <unistd.h>\nint main(void) { return write(1, \"x\", 1) != 1; }\n",
        &["-O0"],
    );
    let status = Command::new(env!("CARGO_BIN_EXE_capexec")).arg("check").arg(&bin).output().unwrap().status;
    assert_eq!(status.code(), Some(0));
}
