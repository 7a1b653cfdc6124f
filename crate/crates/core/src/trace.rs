//! Audit-trail events, one per line, laid out like `ktrace` output.
//!
//! ```text
//! 1697380000.000123   4242 workload   cat        CALL         3 - openat(AT_FDCWD,"test/0",RDONLY)
//! 1697380000.000150   4242 workload   cat        CAP_DENIED   3 94 restricted VFS lookup: Not permitted in capability mode
//! ```
//!
//! Columns are timestamp (seconds with microseconds), pid, role, process
//! name, kind, call id (`-` if none), error code (`-` if none) and free
//! detail text.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use core::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProcessRole {
    Workload,
    Broker,
    Supervisor,
}

impl ProcessRole {
    pub fn name(self) -> &'static str {
        match self {
            ProcessRole::Workload => "workload",
            ProcessRole::Broker => "broker",
            ProcessRole::Supervisor => "supervisor",
        }
    }

    pub fn parse(s: &str) -> Option<ProcessRole> {
        [ProcessRole::Workload, ProcessRole::Broker, ProcessRole::Supervisor].into_iter().find(|r| r.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TraceKind {
    Call,
    Ret,
    CapDenied,
    ChannelSend,
    ChannelRecv,
}

impl TraceKind {
    pub fn name(self) -> &'static str {
        match self {
            TraceKind::Call => "CALL",
            TraceKind::Ret => "RET",
            TraceKind::CapDenied => "CAP_DENIED",
            TraceKind::ChannelSend => "CHANNEL_SEND",
            TraceKind::ChannelRecv => "CHANNEL_RECV",
        }
    }

    pub fn parse(s: &str) -> Option<TraceKind> {
        [TraceKind::Call, TraceKind::Ret, TraceKind::CapDenied, TraceKind::ChannelSend, TraceKind::ChannelRecv]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    /// Microseconds since the Unix epoch.
    pub timestamp_us: u64,
    pub pid: u32,
    pub role: ProcessRole,
    pub process: String,
    pub call_id: Option<u64>,
    pub kind: TraceKind,
    pub error: Option<i32>,
    pub detail: String,
}

impl TraceEvent {
    /// One line without the trailing newline. Whitespace in the process name
    /// and line breaks in the detail are replaced so each event stays on one
    /// line.
    pub fn to_line(&self) -> String {
        let process: String = if self.process.is_empty() {
            "?".to_string()
        } else {
            self.process.chars().map(|c| if c.is_whitespace() { '_' } else { c }).collect()
        };
        let detail: String = self.detail.chars().map(|c| if c == '\n' || c == '\r' { ' ' } else { c }).collect();
        let call = self.call_id.map_or("-".to_string(), |c| format!("{c}"));
        let error = self.error.map_or("-".to_string(), |e| format!("{e}"));
        format!(
            "{}.{:06} {:>6} {:<10} {:<10} {:<12} {} {} {}",
            self.timestamp_us / 1_000_000,
            self.timestamp_us % 1_000_000,
            self.pid,
            self.role.name(),
            process,
            self.kind.name(),
            call,
            error,
            detail
        )
        .trim_end()
        .to_string()
    }

    pub fn parse_line(line: &str) -> Result<TraceEvent, TraceParseError> {
        let mut rest = line.trim_start();
        let mut field = |what: &'static str| -> Result<&str, TraceParseError> {
            let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
            let (f, r) = rest.split_at(end);
            rest = r.trim_start();
            if f.is_empty() {
                Err(TraceParseError(what))
            } else {
                Ok(f)
            }
        };
        let ts = field("timestamp")?;
        let (secs, micros) = ts.split_once('.').ok_or(TraceParseError("timestamp"))?;
        let secs: u64 = secs.parse().map_err(|_| TraceParseError("timestamp"))?;
        let micros: u64 = micros.parse().map_err(|_| TraceParseError("timestamp"))?;
        let pid = field("pid")?.parse().map_err(|_| TraceParseError("pid"))?;
        let role = ProcessRole::parse(field("role")?).ok_or(TraceParseError("role"))?;
        let process = field("process")?.to_string();
        let kind = TraceKind::parse(field("kind")?).ok_or(TraceParseError("kind"))?;
        let call_id = match field("call id")? {
            "-" => None,
            c => Some(c.parse().map_err(|_| TraceParseError("call id"))?),
        };
        let error = match field("error")? {
            "-" => None,
            e => Some(e.parse().map_err(|_| TraceParseError("error"))?),
        };
        Ok(TraceEvent {
            timestamp_us: secs * 1_000_000 + micros,
            pid,
            role,
            process,
            call_id,
            kind,
            error,
            detail: rest.to_string(),
        })
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceParseError(pub &'static str);

impl fmt::Display for TraceParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed trace line: bad {}", self.0)
    }
}

impl core::error::Error for TraceParseError {}

/// A run is adequately provisioned iff no capability denial was recorded.
pub fn assert_clean_trace(trace: &[TraceEvent]) -> bool {
    !trace.iter().any(|e| e.kind == TraceKind::CapDenied)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PairingError {
    /// A `RET` or `CAP_DENIED` with no open `CALL`.
    Unopened { pid: u32, call_id: u64 },
    /// A `CALL` that never completed.
    Unfinished { pid: u32, call_id: u64 },
    /// The same call id was opened twice while still pending.
    Reopened { pid: u32, call_id: u64 },
}

/// Checks that every `CALL` is closed by exactly one `RET` or `CAP_DENIED`
/// with the same call id from the same process.
pub fn check_call_pairing(trace: &[TraceEvent]) -> Result<(), PairingError> {
    let mut open: BTreeMap<(u32, ProcessRole, u64), ()> = BTreeMap::new();
    for e in trace {
        let Some(id) = e.call_id else { continue };
        let key = (e.pid, e.role, id);
        match e.kind {
            TraceKind::Call => {
                if open.insert(key, ()).is_some() {
                    return Err(PairingError::Reopened { pid: e.pid, call_id: id });
                }
            }
            TraceKind::Ret | TraceKind::CapDenied => {
                if open.remove(&key).is_none() {
                    return Err(PairingError::Unopened { pid: e.pid, call_id: id });
                }
            }
            TraceKind::ChannelSend | TraceKind::ChannelRecv => {}
        }
    }
    match open.keys().next() {
        Some(&(pid, _, call_id)) => Err(PairingError::Unfinished { pid, call_id }),
        None => Ok(()),
    }
}
