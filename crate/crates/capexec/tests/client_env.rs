//! Runs in its own process because it sets the channel environment.

use std::collections::BTreeSet;
use std::sync::Arc;

use capexec::broker::{limit_message, Broker};
use capexec::channel::Channel;
use capexec::client::{ClientContext, ENV_CHANNELS, ENV_MODE, ENV_TRACE_FD};
use capexec::providers::{FixtureResolver, FixtureSysctl};
use capexec::trace::TraceSink;
use capexec_core::declaration::{DnsGrant, Family, ResourceGrant};
use capexec_core::ServiceKind;

#[test]
fn context_from_environment() {
    let (dns_client, mut dns_broker) = Channel::unix_pair().unwrap();
    let (net_client, _net_broker) = Channel::unix_pair().unwrap();
    let dns_fd = dns_client.into_raw_fd().unwrap();
    let net_fd = net_client.into_raw_fd().unwrap();

    let server = std::thread::spawn(move || {
        let mut b = Broker::new(
            ServiceKind::Dns,
            Arc::new(FixtureResolver::loopback()),
            Arc::new(FixtureSysctl::new([])),
            Broker::tracer_for(ServiceKind::Dns, TraceSink::null()),
        );
        let grant = ResourceGrant::Dns(DnsGrant { families: BTreeSet::from([Family::Inet]), types: BTreeSet::new() });
        assert_eq!(b.handle(&limit_message(1, &grant)).message.error_code(), None);
        let _ = b.serve(&mut dns_broker);
    });

    std::env::set_var(ENV_CHANNELS, format!("system.net={net_fd};system.bogus=0;system.dns={dns_fd}"));
    std::env::set_var(ENV_MODE, "capability");
    std::env::remove_var(ENV_TRACE_FD);
    let ctx = ClientContext::from_env("test").unwrap();
    assert_eq!(ctx.services().collect::<Vec<_>>(), [ServiceKind::Dns, ServiceKind::Net]);
    assert_eq!(ctx.warnings().len(), 1, "{:?}", ctx.warnings());
    assert!(ctx.gateway().is_entered());

    let entry = ctx.c_gethostbyname("localhost", Family::Inet).unwrap();
    assert_eq!(entry.name, "localhost");
    assert_eq!(ctx.c_gethostbyname("localhost", Family::Inet6).unwrap_err().code(), 93);
    assert_eq!(ctx.c_sysctl_read("kern.ostype").unwrap_err().code(), 94);
    drop(ctx);
    server.join().unwrap();

    std::env::set_var(ENV_CHANNELS, "system.dns");
    assert!(ClientContext::from_env("test").is_err());
    std::env::set_var(ENV_CHANNELS, "");
    std::env::set_var(ENV_TRACE_FD, "not-a-number");
    assert!(ClientContext::from_env("test").is_err());
}
