//! Allocation-only core of the `capexec` sandboxing supervisor.
//!
//! Everything in this crate is pure: it parses and checks service
//! declarations, frames capability-channel messages, decides whether a
//! broker may serve a request, builds launch plans, formats trace events,
//! models capability-mode denial, and searches call graphs for paths to
//! syscalls that a sandbox would refuse. Process spawning, sockets and
//! file access live in the `capexec` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod capcheck;
pub mod capmode;
pub mod declaration;
pub mod errno;
pub mod limits;
pub mod plan;
pub mod trace;
pub mod wire;

pub use declaration::{
    canonicalize, parse_declaration, validate_declaration, DeclarationError, Diagnostic, ResourceGrant,
    ServiceDeclaration, ServiceKind, Severity,
};
pub use errno::CapabilityError;
pub use wire::{decode_message, encode_message, AttrValue, ChannelMessage, MessageKind, WireError};
