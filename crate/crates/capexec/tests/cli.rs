use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn capexec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capexec")).args(args).stdin(Stdio::null()).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    capexec(args).status.code().unwrap()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name).to_string_lossy().into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn cat_declaration(dir: &Path, file: &str) -> String {
    write(
        dir,
        "cat.svc",
        &format!("{{ binary: \"/bin/cat\"\n\"system.fileargs\": {{ operations: \"OPEN\", flags: \"RDONLY\", cap_rights: \"READ\", filename: {file:?} }} }}"),
    )
}

#[test]
fn usage_errors() {
    assert_eq!(code(&[]), 64);
    assert_eq!(code(&["frobnicate"]), 64);
    assert_eq!(code(&["run", "--service", "x.svc"]), 64);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn validate() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["validate", &fixture("cat.svc")]), 0);
    assert_eq!(code(&["validate", &fixture("traceroute.svc")]), 0);
    // A fragment without a binary parses but does not validate.
    assert_eq!(code(&["validate", &fixture("dns.svc")]), 65);
    assert_eq!(code(&["validate", &write(dir.path(), "bad.svc", "{ \"system.bogus\": {} }")]), 65);
    assert_eq!(code(&["validate", "/nonexistent/x.svc"]), 65);
}

#[test]
fn run_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "in.txt", "through the broker\n");
    let svc = cat_declaration(dir.path(), &file);
    let trace = dir.path().join("trace.log");
    let out = capexec(&["run", "--service", &svc, "--trace", trace.to_str().unwrap(), "--", "/bin/cat", &file]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(out.stdout, b"through the broker\n");
    let log = std::fs::read_to_string(&trace).unwrap();
    assert!(log.lines().any(|l| l.contains("CHANNEL_SEND") && l.contains("cmd=open")), "{log}");

    // Files outside the grant are refused by the broker; cat reports it.
    let other = write(dir.path(), "other.txt", "x");
    let out = capexec(&["run", "--service", &svc, "--", "/bin/cat", &other]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Capability rights exceeded"));
}

#[test]
fn run_setup_failures() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "in.txt", "x");
    let svc = cat_declaration(dir.path(), &file);
    assert_eq!(code(&["run", "--service", &svc, "--", "/bin/ls", &file]), 77);
    assert_eq!(code(&["run", "--service", "/nonexistent.svc", "--", "/bin/cat"]), 65);
    let unwritable = "/nonexistent/dir/trace.log";
    assert_eq!(code(&["run", "--service", &svc, "--trace", unwritable, "--", "/bin/cat", &file]), 73);
    let bad_fixtures = write(dir.path(), "fx", "host\n");
    assert_eq!(code(&["run", "--service", &svc, "--fixtures", &bad_fixtures, "--", "/bin/cat", &file]), 65);
    let missing = cat_declaration(dir.path(), "/nonexistent/in.txt");
    assert_eq!(code(&["run", "--service", &missing, "--", "/bin/cat", "/nonexistent/in.txt"]), 71);
}

#[test]
fn check_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let script = write(dir.path(), "script.sh", "#!/bin/sh\n");
    assert_eq!(code(&["check", &script]), 66);
    assert_eq!(code(&["check", "/nonexistent/binary"]), 66);
    let exe = env!("CARGO_BIN_EXE_capexec");
    let edges = write(dir.path(), "bad.edges", "[unterminated\n");
    assert_eq!(code(&["check", exe, "--edges", &edges]), 65);
    let policy = write(dir.path(), "bad.policy", "syscall open maybe\n");
    assert_eq!(code(&["check", exe, "--policy", &policy]), 65);
    assert_eq!(code(&["check", exe, "--edges", "/nonexistent/e"]), 66);
}

#[test]
fn bench_errors_and_output() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let csv = csv.to_str().unwrap();
    let small = ["bench", "--scenario", "setup-scaling", "--counts", "1,2", "--repeat", "1"];

    let mut args = small.to_vec();
    args.extend(["--scratch", "/proc/capexec-no-such-dir", "--output", csv]);
    assert_eq!(code(&args), 74);

    let mut args = small.to_vec();
    args.extend(["--output", "/nonexistent/dir/out.csv"]);
    assert_eq!(code(&args), 73);

    assert_eq!(code(&["bench", "--scenario", "many-files", "--repeat", "0"]), 64);

    let mut args = small.to_vec();
    let scratch = dir.path().to_str().unwrap();
    args.extend(["--output", csv, "--scratch", scratch]);
    let out = capexec(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("scenario,case,mode,run,seconds,peak_rss_bytes"));
    let modes: Vec<&str> = lines.map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(modes, ["unsandboxed", "sandboxed", "setup", "unsandboxed", "sandboxed", "setup"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("setup fit"));
    let leftovers: Vec<PathBuf> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("capexec-bench"))
        .collect();
    assert!(leftovers.is_empty(), "scratch not cleaned: {leftovers:?}");
}
