//! Capability-mode semantics: which ambient operations remain available
//! once a process has given up its access to global namespaces.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::declaration::{Family, OpenFlag};
use crate::errno::CapabilityError;

/// Directory a path lookup is relative to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DirRef {
    /// `AT_FDCWD`: the process-wide working directory.
    Cwd,
    /// A directory descriptor already held by the process.
    Held(i32),
}

/// Global namespaces that capability mode closes off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Namespace {
    Filesystem,
    Network,
    Process,
    Sysctl,
}

impl Namespace {
    /// Text of the `CAP` line `ktrace` prints on denial.
    pub fn restriction(self) -> &'static str {
        match self {
            Namespace::Filesystem => "restricted VFS lookup",
            Namespace::Network => "restricted address lookup",
            Namespace::Process => "restricted pid lookup",
            Namespace::Sysctl => "restricted sysctl",
        }
    }
}

/// An operation a workload performs without going through a broker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AmbientOp {
    OpenAt { dir: DirRef, path: String, flags: BTreeSet<OpenFlag> },
    Read { fd: i32 },
    Write { fd: i32 },
    Close { fd: i32 },
    Fstat { fd: i32 },
    Seek { fd: i32 },
    ResolveName { hostname: String, family: Family },
    ResolveAddr { address: Vec<u8>, family: Family },
    Connect { host: String, port: u16, family: Family },
    Bind { host: String, port: u16, family: Family },
    SysctlRead { key: String },
    SysctlWrite { key: String },
    Kill { pid: i32 },
}

impl AmbientOp {
    /// Syscall-style name used in trace lines.
    pub fn name(&self) -> &'static str {
        match self {
            AmbientOp::OpenAt { .. } => "openat",
            AmbientOp::Read { .. } => "read",
            AmbientOp::Write { .. } => "write",
            AmbientOp::Close { .. } => "close",
            AmbientOp::Fstat { .. } => "fstat",
            AmbientOp::Seek { .. } => "lseek",
            AmbientOp::ResolveName { .. } => "gethostbyname",
            AmbientOp::ResolveAddr { .. } => "gethostbyaddr",
            AmbientOp::Connect { .. } => "connect",
            AmbientOp::Bind { .. } => "bind",
            AmbientOp::SysctlRead { .. } => "sysctlbyname",
            AmbientOp::SysctlWrite { .. } => "sysctlbyname",
            AmbientOp::Kill { .. } => "kill",
        }
    }

    /// The global namespace this operation names, if any. Lookups relative
    /// to a held directory stay local unless they are absolute or climb
    /// out with `..`.
    pub fn namespace(&self) -> Option<Namespace> {
        match self {
            AmbientOp::OpenAt { dir: DirRef::Cwd, .. } => Some(Namespace::Filesystem),
            AmbientOp::OpenAt { dir: DirRef::Held(_), path, .. } => {
                let escapes = path.starts_with('/') || path.split('/').any(|c| c == "..");
                escapes.then_some(Namespace::Filesystem)
            }
            AmbientOp::Read { .. }
            | AmbientOp::Write { .. }
            | AmbientOp::Close { .. }
            | AmbientOp::Fstat { .. }
            | AmbientOp::Seek { .. } => None,
            AmbientOp::ResolveName { .. }
            | AmbientOp::ResolveAddr { .. }
            | AmbientOp::Connect { .. }
            | AmbientOp::Bind { .. } => Some(Namespace::Network),
            AmbientOp::SysctlRead { .. } | AmbientOp::SysctlWrite { .. } => Some(Namespace::Sysctl),
            AmbientOp::Kill { .. } => Some(Namespace::Process),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlreadyEntered;

impl fmt::Display for AlreadyEntered {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("capability mode already entered")
    }
}

impl core::error::Error for AlreadyEntered {}

/// Per-process enforcement state. Entering is one-way.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CapabilityMode {
    entered: bool,
}

impl CapabilityMode {
    pub fn new() -> Self {
        CapabilityMode::default()
    }

    pub fn is_entered(&self) -> bool {
        self.entered
    }

    pub fn enter(&mut self) -> Result<(), AlreadyEntered> {
        if self.entered {
            return Err(AlreadyEntered);
        }
        self.entered = true;
        Ok(())
    }

    /// Ok when `op` may run; the namespace is returned with the denial so
    /// callers can record why.
    pub fn check(&self, op: &AmbientOp) -> Result<(), (CapabilityError, Namespace)> {
        match (self.entered, op.namespace()) {
            (true, Some(ns)) => Err((CapabilityError::CAPABILITY_MODE, ns)),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn every_op() -> Vec<AmbientOp> {
        let flags: BTreeSet<_> = [OpenFlag::RdOnly].into_iter().collect();
        let mut ops = vec![];
        for dir in [DirRef::Cwd, DirRef::Held(3)] {
            for path in ["test/0", "/etc/hosts", "../x", "a/../../b", "sub/file"] {
                ops.push(AmbientOp::OpenAt { dir, path: path.to_string(), flags: flags.clone() });
            }
        }
        for fd in [0, 1, 5] {
            ops.extend([
                AmbientOp::Read { fd },
                AmbientOp::Write { fd },
                AmbientOp::Close { fd },
                AmbientOp::Fstat { fd },
                AmbientOp::Seek { fd },
            ]);
        }
        for family in [Family::Inet, Family::Inet6] {
            ops.extend([
                AmbientOp::ResolveName { hostname: "localhost".into(), family },
                AmbientOp::ResolveAddr { address: vec![0; family.address_len()], family },
                AmbientOp::Connect { host: "127.0.0.1".into(), port: 80, family },
                AmbientOp::Bind { host: "127.0.0.1".into(), port: 0, family },
            ]);
        }
        ops.extend([
            AmbientOp::SysctlRead { key: "kern.hostname".into() },
            AmbientOp::SysctlWrite { key: "kern.hostname".into() },
            AmbientOp::Kill { pid: 1 },
        ]);
        ops
    }

    /// Independent statement of which operations are purely descriptor
    /// relative.
    fn is_descriptor_relative(op: &AmbientOp) -> bool {
        match op {
            AmbientOp::Read { .. }
            | AmbientOp::Write { .. }
            | AmbientOp::Close { .. }
            | AmbientOp::Fstat { .. }
            | AmbientOp::Seek { .. } => true,
            AmbientOp::OpenAt { dir: DirRef::Held(_), path, .. } => {
                matches!(path.as_str(), "test/0" | "sub/file")
            }
            _ => false,
        }
    }

    #[test]
    fn denial_is_complete_after_entry() {
        let mut mode = CapabilityMode::new();
        for op in every_op() {
            assert_eq!(mode.check(&op), Ok(()), "{op:?} before entry");
        }
        mode.enter().unwrap();
        for op in every_op() {
            let result = mode.check(&op);
            if is_descriptor_relative(&op) {
                assert_eq!(result, Ok(()), "{op:?}");
            } else {
                let (err, _) = result.unwrap_err();
                assert_eq!(err.code, 94, "{op:?}");
                assert_eq!(err.label(), "Not permitted in capability mode");
            }
        }
    }

    #[test]
    fn entry_is_one_way() {
        let mut mode = CapabilityMode::new();
        mode.enter().unwrap();
        assert_eq!(mode.enter(), Err(AlreadyEntered));
        assert!(mode.is_entered());
    }

    #[test]
    fn vfs_denial_text() {
        let mut mode = CapabilityMode::new();
        mode.enter().unwrap();
        let op = AmbientOp::OpenAt {
            dir: DirRef::Cwd,
            path: "test/0".into(),
            flags: [OpenFlag::RdOnly].into_iter().collect(),
        };
        assert_eq!(mode.check(&op).unwrap_err().1.restriction(), "restricted VFS lookup");
    }
}
