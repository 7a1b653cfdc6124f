use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use core::fmt;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PolicyStatus {
    Allowed,
    Denied,
    /// Allowed only under the stated rule, which static analysis cannot
    /// confirm; reported as a violation.
    Conditional(String),
}

/// What a sink's syscall resolves to under a policy.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SinkStatus {
    Allowed,
    Denied,
    Conditional(String),
    /// Not in the policy at all; denied.
    Unlisted,
}

impl SinkStatus {
    pub fn is_violation(&self) -> bool {
        !matches!(self, SinkStatus::Allowed)
    }

    pub fn label(&self) -> &str {
        match self {
            SinkStatus::Allowed => "allowed",
            SinkStatus::Denied => "denied",
            SinkStatus::Conditional(_) => "conditional",
            SinkStatus::Unlisted => "unlisted",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SyscallPolicy {
    pub entries: BTreeMap<String, PolicyStatus>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for PolicyParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl core::error::Error for PolicyParseError {}

impl SyscallPolicy {
    /// Parses `syscall NAME allowed|denied|conditional "rule"` lines. Later
    /// lines override earlier ones for the same name.
    pub fn parse(text: &str) -> Result<SyscallPolicy, PolicyParseError> {
        let mut policy = SyscallPolicy::default();
        policy.extend_from_text(text)?;
        Ok(policy)
    }

    pub fn extend_from_text(&mut self, text: &str) -> Result<(), PolicyParseError> {
        for (i, raw) in text.lines().enumerate() {
            let err = |message: String| PolicyParseError { line: i + 1, message };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut words = line.splitn(4, char::is_whitespace).filter(|w| !w.is_empty());
            if words.next() != Some("syscall") {
                return Err(err(format!("expected 'syscall', found {line:?}")));
            }
            let name = words.next().ok_or_else(|| err("missing syscall name".to_string()))?;
            let status = match words.next() {
                Some("allowed") => PolicyStatus::Allowed,
                Some("denied") => PolicyStatus::Denied,
                Some("conditional") => {
                    let rule = words.next().map(str::trim).unwrap_or("");
                    let rule = rule
                        .strip_prefix('"')
                        .and_then(|r| r.strip_suffix('"'))
                        .ok_or_else(|| err("conditional needs a quoted rule".to_string()))?;
                    PolicyStatus::Conditional(rule.to_string())
                }
                other => {
                    return Err(err(format!(
                        "expected allowed, denied or conditional, found {:?}",
                        other.unwrap_or("")
                    )))
                }
            };
            if !matches!(status, PolicyStatus::Conditional(_)) {
                if let Some(extra) = words.next() {
                    if !extra.trim_start().starts_with('#') {
                        return Err(err(format!("unexpected {extra:?}")));
                    }
                }
            }
            self.entries.insert(name.to_string(), status);
        }
        Ok(())
    }

    pub fn status(&self, syscall: &str) -> SinkStatus {
        match self.entries.get(syscall) {
            Some(PolicyStatus::Allowed) => SinkStatus::Allowed,
            Some(PolicyStatus::Denied) => SinkStatus::Denied,
            Some(PolicyStatus::Conditional(rule)) => SinkStatus::Conditional(rule.clone()),
            None => SinkStatus::Unlisted,
        }
    }

    pub fn allow(&mut self, syscall: &str) {
        self.entries.insert(syscall.to_string(), PolicyStatus::Allowed);
    }

    pub fn deny(&mut self, syscall: &str) {
        self.entries.insert(syscall.to_string(), PolicyStatus::Denied);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_statuses() {
        let p = SyscallPolicy::parse(
            "# c\nsyscall read allowed\nsyscall open denied\nsyscall openat conditional \"dirfd held\"\n",
        )
        .unwrap();
        assert_eq!(p.status("read"), SinkStatus::Allowed);
        assert_eq!(p.status("open"), SinkStatus::Denied);
        assert_eq!(p.status("openat"), SinkStatus::Conditional("dirfd held".into()));
        assert_eq!(p.status("ptrace"), SinkStatus::Unlisted);
        assert!(p.status("ptrace").is_violation());
    }

    #[test]
    fn rejects_malformed_lines() {
        for (text, line) in [
            ("syscall read maybe", 1),
            ("\nfoo read allowed", 2),
            ("syscall", 1),
            ("syscall x conditional rule", 1),
            ("syscall x allowed extra", 1),
        ] {
            assert_eq!(SyscallPolicy::parse(text).unwrap_err().line, line, "{text}");
        }
    }

    #[test]
    fn default_policy_covers_shipped_sinks() {
        use super::super::{EdgeList, EdgeSource};
        let policy = SyscallPolicy::parse(super::super::DEFAULT_POLICY).unwrap();
        let edges = EdgeList::parse(super::super::DEFAULT_EDGES).unwrap();
        for section in edges.sections_for("libc.so.7") {
            for (_, syscall) in &section.sinks {
                assert_ne!(policy.status(syscall), SinkStatus::Unlisted, "{syscall}");
            }
        }
        assert_eq!(policy.status("open"), SinkStatus::Denied);
        assert_eq!(policy.status("sysctl"), SinkStatus::Denied);
        assert_eq!(policy.status("connect"), SinkStatus::Denied);
        assert_eq!(policy.status("bind"), SinkStatus::Denied);
        for ok in ["read", "write", "close", "fstat", "sendto"] {
            assert_eq!(policy.status(ok), SinkStatus::Allowed);
        }
    }
}
