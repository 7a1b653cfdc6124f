//! Fixture workloads. They do all resource access through the client
//! library, so the same code runs ambient, under the simulation backend,
//! and as the `capcat`/`capresolve` executables under the native backend.

use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use std::net::IpAddr;
use std::sync::{Arc, Mutex};

use capexec_core::declaration::{Family, OpenFlag};

use crate::client::ClientContext;
use crate::providers::ip_to_bytes;

const COPY_BUFFER: usize = 64 * 1024;

pub struct WorkloadIo {
    pub stdin: Box<dyn Read + Send>,
    pub stdout: Box<dyn Write + Send>,
    pub stderr: Box<dyn Write + Send>,
}

impl WorkloadIo {
    pub fn inherit() -> Self {
        WorkloadIo { stdin: Box::new(io::stdin()), stdout: Box::new(io::stdout()), stderr: Box::new(io::stderr()) }
    }

    pub fn null() -> Self {
        WorkloadIo { stdin: Box::new(io::empty()), stdout: Box::new(io::sink()), stderr: Box::new(io::sink()) }
    }
}

/// A writer whose bytes can be read back after the workload finishes.
#[derive(Clone, Default)]
pub struct SharedBuffer(Arc<Mutex<Vec<u8>>>);

impl SharedBuffer {
    pub fn contents(&self) -> Vec<u8> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Write for SharedBuffer {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Something the simulation backend can run in place of an executable.
/// `argv[0]` is the program name.
pub trait Workload: Send + Sync {
    fn run(&self, ctx: &ClientContext, argv: &[String], io: &mut WorkloadIo) -> i32;
}

impl<F> Workload for F
where
    F: Fn(&ClientContext, &[String], &mut WorkloadIo) -> i32 + Send + Sync,
{
    fn run(&self, ctx: &ClientContext, argv: &[String], io: &mut WorkloadIo) -> i32 {
        self(ctx, argv, io)
    }
}

/// Built-in workload for a binary, looked up by basename.
pub fn builtin(binary: &str) -> Option<Arc<dyn Workload>> {
    let base = binary.rsplit('/').next().unwrap_or(binary);
    let w: Arc<dyn Workload> = match base {
        "cat" | "capcat" => Arc::new(cat),
        "resolve" | "capresolve" => Arc::new(resolve),
        "sysctl" => Arc::new(sysctl),
        "true" => Arc::new(|_: &ClientContext, _: &[String], _: &mut WorkloadIo| 0),
        _ => return None,
    };
    Some(w)
}

fn copy(from: &mut dyn Read, to: &mut dyn Write) -> io::Result<()> {
    let mut buf = vec![0u8; COPY_BUFFER];
    loop {
        let n = match from.read(&mut buf) {
            Ok(0) => return Ok(()),
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        to.write_all(&buf[..n])?;
    }
}

/// Concatenates files (or stdin for `-` and for no arguments).
pub fn cat(ctx: &ClientContext, argv: &[String], io: &mut WorkloadIo) -> i32 {
    let dash = ["-".to_string()];
    let names = if argv.len() > 1 { &argv[1..] } else { &dash[..] };
    let flags: BTreeSet<OpenFlag> = [OpenFlag::RdOnly].into_iter().collect();
    let mut status = 0;
    for name in names {
        let result = if name == "-" {
            copy(&mut io.stdin, &mut io.stdout)
        } else {
            match ctx.c_open(name, &flags) {
                Ok(mut opened) => copy(&mut opened.file, &mut io.stdout),
                Err(e) => {
                    let _ = writeln!(io.stderr, "cat: {name}: {e}");
                    status = 1;
                    continue;
                }
            }
        };
        if let Err(e) = result {
            let _ = writeln!(io.stderr, "cat: {name}: {e}");
            status = 1;
        }
    }
    if io.stdout.flush().is_err() {
        status = 1;
    }
    status
}

/// `resolve [-4|-6] TARGET...`: address literals are looked up in reverse
/// with their own family, names forward with the selected one.
pub fn resolve(ctx: &ClientContext, argv: &[String], io: &mut WorkloadIo) -> i32 {
    let mut family = Family::Inet;
    let mut status = 0;
    for arg in argv.iter().skip(1) {
        match arg.as_str() {
            "-4" => family = Family::Inet,
            "-6" => family = Family::Inet6,
            target => {
                let result = match target.parse::<IpAddr>() {
                    Ok(ip) => {
                        let (fam, bytes) = ip_to_bytes(ip);
                        ctx.c_gethostbyaddr(&bytes, fam)
                    }
                    Err(_) => ctx.c_gethostbyname(target, family),
                };
                match result {
                    Ok(entry) => {
                        let _ = writeln!(io.stdout, "{entry}");
                    }
                    Err(e) => {
                        let _ = writeln!(io.stderr, "resolve: {target}: {e}");
                        status = 1;
                    }
                }
            }
        }
    }
    let _ = io.stdout.flush();
    status
}

/// `sysctl KEY...`: prints `KEY: VALUE` per key.
pub fn sysctl(ctx: &ClientContext, argv: &[String], io: &mut WorkloadIo) -> i32 {
    let mut status = 0;
    for key in argv.iter().skip(1) {
        match ctx.c_sysctl_read(key) {
            Ok(v) => {
                let _ = writeln!(io.stdout, "{key}: {v}");
            }
            Err(e) => {
                let _ = writeln!(io.stderr, "sysctl: {key}: {e}");
                status = 1;
            }
        }
    }
    let _ = io.stdout.flush();
    status
}

/// Entry point for the standalone workload executables: builds the client
/// context from the environment and runs the named builtin.
pub fn main_for(name: &str) -> i32 {
    let argv: Vec<String> = std::env::args().collect();
    let ctx = match ClientContext::from_env(name) {
        Ok(ctx) => ctx,
        Err(e) => {
            eprintln!("{name}: {e}");
            return 71;
        }
    };
    for w in ctx.warnings() {
        eprintln!("{name}: warning: {w}");
    }
    let workload = builtin(name).expect("known builtin");
    workload.run(&ctx, &argv, &mut WorkloadIo::inherit())
}
