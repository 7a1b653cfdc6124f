//! Sandboxing supervisor runtime: capability channels, brokers, the
//! workload-side client, ELF facts for the static checker, the benchmark
//! harness and the `capexec` command line.

pub mod bench;
pub mod broker;
pub mod channel;
pub mod check;
pub mod cli;
pub mod client;
pub mod elf;
pub mod gateway;
pub mod providers;
pub mod supervisor;
pub mod trace;
pub mod workloads;
