//! Error codes shared by brokers, the gateway and the client.
//!
//! Codes below 1000 follow the FreeBSD errno numbering so that traces read
//! like `ktrace` output. Codes from 1000 up are capexec-specific broker
//! failures that have no errno equivalent.

use core::fmt;

/// Protocol error: a broker received a command it does not serve.
pub const EPROTO: i32 = 92;
/// Request outside a broker's whitelist.
pub const ENOTCAPABLE: i32 = 93;
/// Ambient-namespace access attempted in capability mode.
pub const ECAPMODE: i32 = 94;
/// Malformed request argument.
pub const EINVAL: i32 = 22;

/// Name or address did not resolve.
pub const RESOLUTION_FAILED: i32 = 1000;
/// The sysctl provider has no value for a granted key.
pub const KEY_UNAVAILABLE: i32 = 1001;

/// Human-readable label for a code, as printed after `errno N` in traces.
pub fn label(code: i32) -> &'static str {
    match code {
        EPROTO => "Protocol error",
        ENOTCAPABLE => "Capability rights exceeded",
        ECAPMODE => "Not permitted in capability mode",
        EINVAL => "Invalid argument",
        RESOLUTION_FAILED => "Resolution failed",
        KEY_UNAVAILABLE => "Key unavailable",
        _ => "I/O error",
    }
}

/// A capability denial: either a whitelist violation (93) or an ambient
/// access after entering capability mode (94).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CapabilityError {
    pub code: i32,
}

impl CapabilityError {
    pub const RIGHTS_EXCEEDED: CapabilityError = CapabilityError { code: ENOTCAPABLE };
    pub const CAPABILITY_MODE: CapabilityError = CapabilityError { code: ECAPMODE };

    pub fn label(&self) -> &'static str {
        label(self.code)
    }

    pub fn is_capability_code(code: i32) -> bool {
        code == ENOTCAPABLE || code == ECAPMODE
    }
}

impl fmt::Display for CapabilityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "errno {} {}", self.code, self.label())
    }
}

impl core::error::Error for CapabilityError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capability_mode_label_matches_ktrace() {
        assert_eq!(CapabilityError::CAPABILITY_MODE.code, 94);
        assert_eq!(CapabilityError::CAPABILITY_MODE.label(), "Not permitted in capability mode");
        assert_eq!(CapabilityError::RIGHTS_EXCEEDED.label(), "Capability rights exceeded");
    }
}
