//! Append-only trace sinks.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::os::fd::{AsRawFd, FromRawFd, RawFd};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

pub use capexec_core::trace::{assert_clean_trace, check_call_pairing, ProcessRole, TraceEvent, TraceKind};

static NEXT_CALL_ID: AtomicU64 = AtomicU64::new(1);

pub fn next_call_id() -> u64 {
    NEXT_CALL_ID.fetch_add(1, Ordering::Relaxed)
}

fn now_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_micros() as u64)
}

enum Target {
    Null,
    Memory(Vec<TraceEvent>),
    /// Opened with `O_APPEND`; each event is one `write` so concurrent
    /// processes sharing the file do not interleave within a line.
    File(File),
}

/// Where trace events go. Cloning shares the sink.
#[derive(Clone)]
pub struct TraceSink {
    target: Arc<Mutex<Target>>,
}

impl std::fmt::Debug for TraceSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TraceSink")
    }
}

impl TraceSink {
    fn with(target: Target) -> Self {
        TraceSink { target: Arc::new(Mutex::new(target)) }
    }

    pub fn null() -> Self {
        TraceSink::with(Target::Null)
    }

    pub fn memory() -> Self {
        TraceSink::with(Target::Memory(Vec::new()))
    }

    pub fn create(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
        file.set_len(0)?;
        Ok(TraceSink::with(Target::File(file)))
    }

    /// Adopts an inherited append-mode descriptor.
    ///
    /// # Safety
    /// `fd` must be open and owned by nobody else.
    pub unsafe fn from_raw_fd(fd: RawFd) -> Self {
        TraceSink::with(Target::File(File::from_raw_fd(fd)))
    }

    pub fn from_owned(fd: std::os::fd::OwnedFd) -> Self {
        TraceSink::with(Target::File(File::from(fd)))
    }

    pub fn is_null(&self) -> bool {
        matches!(*self.lock(), Target::Null)
    }

    /// Descriptor of a file sink, for handing to child processes.
    pub fn raw_fd(&self) -> Option<RawFd> {
        match &*self.lock() {
            Target::File(f) => Some(f.as_raw_fd()),
            _ => None,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Target> {
        self.target.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn record(&self, event: TraceEvent) {
        match &mut *self.lock() {
            Target::Null => {}
            Target::Memory(events) => events.push(event),
            Target::File(f) => {
                let mut line = event.to_line();
                line.push('\n');
                let _ = f.write_all(line.as_bytes());
            }
        }
    }

    /// Events recorded so far. File sinks are read back from disk so events
    /// written by other processes are included.
    pub fn events(&self) -> io::Result<Vec<TraceEvent>> {
        match &*self.lock() {
            Target::Null => Ok(Vec::new()),
            Target::Memory(events) => Ok(events.clone()),
            Target::File(f) => {
                let mut reader = f.try_clone()?;
                use std::io::Seek;
                reader.rewind()?;
                read_events(BufReader::new(reader))
            }
        }
    }
}

pub fn read_events(reader: impl BufRead) -> io::Result<Vec<TraceEvent>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = TraceEvent::parse_line(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        out.push(event);
    }
    Ok(out)
}

/// Emits events on behalf of one process role.
#[derive(Clone, Debug)]
pub struct Tracer {
    pub sink: TraceSink,
    pub role: ProcessRole,
    pub process: String,
}

impl Tracer {
    pub fn new(sink: TraceSink, role: ProcessRole, process: impl Into<String>) -> Self {
        Tracer { sink, role, process: process.into() }
    }

    pub fn emit(&self, kind: TraceKind, call_id: Option<u64>, error: Option<i32>, detail: impl Into<String>) {
        self.sink.record(TraceEvent {
            timestamp_us: now_us(),
            pid: std::process::id(),
            role: self.role,
            process: self.process.clone(),
            call_id,
            kind,
            error,
            detail: detail.into(),
        });
    }

    /// Records a `CALL` and returns its id.
    pub fn call(&self, detail: impl Into<String>) -> u64 {
        let id = next_call_id();
        self.emit(TraceKind::Call, Some(id), None, detail);
        id
    }

    pub fn ret(&self, id: u64, error: Option<i32>, detail: impl Into<String>) {
        self.emit(TraceKind::Ret, Some(id), error, detail);
    }

    pub fn denied(&self, id: u64, code: i32, detail: impl Into<String>) {
        self.emit(TraceKind::CapDenied, Some(id), Some(code), detail);
    }
}
