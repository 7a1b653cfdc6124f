use super::*;
use crate::declaration::{parse_declaration, validate_declaration, ServiceDeclaration};
use alloc::string::ToString;
use proptest::prelude::*;

fn facts(name: &str, imports: &[&str], exports: &[&str]) -> BinaryFacts {
    BinaryFacts {
        name: name.to_string(),
        imports: imports.iter().map(|s| Import { symbol: s.to_string(), library: None }).collect(),
        exports: exports.iter().map(|s| s.to_string()).collect(),
        dependencies: Vec::new(),
    }
}

fn fgets_program() -> Vec<BinaryFacts> {
    let mut main = facts("fgets_demo", &["fgets", "puts"], &[]);
    main.dependencies = vec!["libc.so.7".into()];
    vec![main, facts("libc.so.7", &[], &["fgets", "puts", "printf", "open"])]
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[test]
fn fgets_reaches_open() {
    let program = fgets_program();
    let edges = default_edges();
    let graph = build_call_graph(&program, &[&edges]);
    assert!(graph.edges["fgets_demo:main"].contains("libc.so.7:fgets"));
    assert!(graph.edges["libc.so.7:fgets"].contains("libc.so.7:__srefill"));
    assert_eq!(graph.sinks["libc.so.7:_open"], "open");

    let entry = entry_node(&program[0]);
    let found = find_violations(&graph, &[entry], &default_policy(), &ServiceMapping::default());
    assert_eq!(found.len(), 1, "{found:?}");
    let v = &found[0];
    assert_eq!(v.syscall, "open");
    assert_eq!(v.status, SinkStatus::Denied);
    assert_eq!(v.suggested_service, Some(ServiceKind::FileArgs));
    assert_eq!(
        v.path,
        strings(&[
            "fgets_demo:main",
            "libc.so.7:fgets",
            "libc.so.7:__srefill",
            "libc.so.7:__smakebuf",
            "libc.so.7:__localeconv_load",
            "libc.so.7:_open",
        ])
    );
}

#[test]
fn allowed_sinks_yield_nothing() {
    let mut g = CallGraph::new();
    g.add_edge("a:main", "a:r");
    g.add_edge("a:main", "a:w");
    g.add_sink("a:r", "read");
    g.add_sink("a:w", "write");
    assert!(find_violations(&g, &strings(&["a:main"]), &default_policy(), &Default::default()).is_empty());
}

#[test]
fn unlisted_syscall_fails_closed() {
    let mut g = CallGraph::new();
    g.add_edge("a:main", "a:x");
    g.add_sink("a:x", "frobnicate");
    let v = find_violations(&g, &strings(&["a:main"]), &default_policy(), &Default::default());
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].status, SinkStatus::Unlisted);
    assert_eq!(v[0].suggested_service, None);
}

#[test]
fn conditional_is_reported_with_rule() {
    let mut g = CallGraph::new();
    g.add_sink("a:main", "openat");
    let v = find_violations(&g, &strings(&["a:main"]), &default_policy(), &Default::default());
    assert_eq!(v[0].path, strings(&["a:main"]));
    assert!(matches!(&v[0].status, SinkStatus::Conditional(r) if r.contains("AT_FDCWD")));
}

/// All simple paths from `from` to `to`, by exhaustive enumeration.
fn simple_paths(g: &CallGraph, from: &str, to: &str) -> Vec<Vec<String>> {
    fn walk(g: &CallGraph, path: &mut Vec<String>, to: &str, out: &mut Vec<Vec<String>>) {
        let last = path.last().unwrap().clone();
        if last == to {
            out.push(path.clone());
            return;
        }
        for next in g.callees(&last) {
            if !path.contains(next) {
                path.push(next.clone());
                walk(g, path, to, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(g, &mut vec![from.to_string()], to, &mut out);
    out
}

#[test]
fn diamond_reports_least_shortest_path() {
    let mut g = CallGraph::new();
    for (a, b) in [
        ("m:main", "m:b"),
        ("m:main", "m:a"),
        ("m:a", "m:x"),
        ("m:x", "m:sink"),
        ("m:b", "m:sink"),
        ("m:a", "m:c"),
        ("m:c", "m:sink"),
    ] {
        g.add_edge(a, b);
    }
    g.add_sink("m:sink", "open");
    let v = find_violations(&g, &strings(&["m:main"]), &default_policy(), &Default::default());
    assert_eq!(v.len(), 1);
    let mut all = simple_paths(&g, "m:main", "m:sink");
    let min = all.iter().map(Vec::len).min().unwrap();
    all.retain(|p| p.len() == min);
    all.sort();
    assert_eq!(v[0].path, all[0]);
    assert_eq!(v[0].path, strings(&["m:main", "m:b", "m:sink"]));
}

#[test]
fn interposition_prefers_earlier_object() {
    let program = vec![
        facts("app", &["s", "missing"], &[]),
        facts("libfirst.so", &[], &["s"]),
        facts("libsecond.so", &[], &["s"]),
    ];
    let g = build_call_graph(&program, &[]);
    let callees: Vec<_> = g.callees("app:main").cloned().collect();
    assert_eq!(callees, strings(&["?:missing", "libfirst.so:s"]));
    assert!(g.unknown.contains("?:missing"));
    assert!(g.warnings.iter().any(|w| matches!(w, GraphWarning::UnresolvedImport { .. })));
}

#[test]
fn section_imports_resolve_across_objects() {
    let program = vec![
        facts("app", &["wrap"], &[]),
        facts("libwrap.so", &["open"], &["wrap"]),
        facts("libc.so.7", &[], &["open"]),
    ];
    let edges = EdgeList::parse("[libwrap.so]\nwrap -> helper\nhelper -> open\n").unwrap();
    let corpus = default_edges();
    let g = build_call_graph(&program, &[&edges, &corpus]);
    assert!(g.edges["libwrap.so:helper"].contains("libc.so.7:open"));
    let v = find_violations(&g, &strings(&["app:main"]), &default_policy(), &Default::default());
    assert_eq!(v.len(), 1);
    assert_eq!(
        v[0].path,
        strings(&["app:main", "libwrap.so:wrap", "libwrap.so:helper", "libc.so.7:open", "libc.so.7:_open"])
    );
}

#[test]
fn cycles_warn_and_terminate() {
    let program = vec![facts("app", &["a"], &[]), facts("liba.so", &[], &["a"])];
    let edges = EdgeList::parse("[liba.so]\na -> b\nb -> a\nb -> c\nc => syscall:kill\n").unwrap();
    let g = build_call_graph(&program, &[&edges]);
    let cycles: Vec<_> = g.warnings.iter().filter(|w| matches!(w, GraphWarning::Cycle(_))).collect();
    assert_eq!(cycles.len(), 1);
    let v = find_violations(&g, &strings(&["app:main"]), &default_policy(), &Default::default());
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].syscall, "kill");
}

#[test]
fn resolver_path_suggests_dns() {
    let program = vec![facts("app", &["gethostbyname"], &[]), facts("libc.so.7", &[], &["gethostbyname"])];
    let corpus = default_edges();
    let g = build_call_graph(&program, &[&corpus]);
    let v = find_violations(&g, &strings(&["app:main"]), &default_policy(), &Default::default());
    let syscalls: Vec<_> = v.iter().map(|v| v.syscall.as_str()).collect();
    assert_eq!(syscalls, ["connect", "open"]);
    assert!(v.iter().all(|v| v.suggested_service == Some(ServiceKind::Dns)));
}

fn violation(syscall: &str, service: Option<ServiceKind>) -> Violation {
    Violation {
        entry: "app:main".into(),
        syscall: syscall.into(),
        path: strings(&["app:main", "libc.so.7:x"]),
        status: SinkStatus::Denied,
        suggested_service: service,
    }
}

#[test]
fn draft_for_open_has_fileargs_placeholder() {
    let draft = suggest_declaration(Some("/bin/cat"), &[violation("open", Some(ServiceKind::FileArgs))]);
    let reparsed = parse_declaration(&draft.text).unwrap();
    assert_eq!(reparsed, draft.declaration);
    let services: Vec<_> = reparsed.services().collect();
    assert_eq!(services, [ServiceKind::FileArgs]);
    let diags = validate_declaration(&reparsed);
    assert!(diags.iter().all(|d| !d.is_error()), "{diags:?}");
    assert!(diags.iter().any(|d| d.message.contains(crate::declaration::PLACEHOLDER)));
}

#[test]
fn draft_maps_each_service() {
    let draft = suggest_declaration(
        Some("/bin/nc"),
        &[
            violation("open", Some(ServiceKind::FileArgs)),
            violation("connect", Some(ServiceKind::Net)),
            violation("ptrace", None),
        ],
    );
    let services: Vec<_> = draft.declaration.services().collect();
    assert_eq!(services, [ServiceKind::FileArgs, ServiceKind::Net]);
    assert_eq!(draft.residual.len(), 1);
    assert!(draft.text.contains("#   app:main -> libc.so.7:x => syscall:ptrace"));
    assert_eq!(parse_declaration(&draft.text).unwrap(), draft.declaration);
}

#[test]
fn empty_draft_has_binary_only() {
    let draft = suggest_declaration(Some("/bin/true"), &[]);
    assert_eq!(draft.declaration, ServiceDeclaration::new("/bin/true"));
    assert_eq!(parse_declaration(&draft.text).unwrap(), draft.declaration);
    let bare = suggest_declaration(None, &[]);
    assert_eq!(parse_declaration(&bare.text).unwrap(), ServiceDeclaration::default());
}

fn arb_graph() -> impl Strategy<Value = (CallGraph, Vec<String>)> {
    let syscalls = ["read", "write", "open", "connect", "weird"];
    (2usize..=30).prop_flat_map(move |n| {
        let edges = proptest::collection::vec((0..n, 0..n), 0..(n * 3));
        let sinks = proptest::collection::vec((0..n, 0..syscalls.len()), 0..=n / 2);
        let entries = proptest::collection::btree_set(0..n, 1..=3);
        (Just(n), edges, sinks, entries).prop_map(move |(n, edges, sinks, entries)| {
            let name = |i: usize| format!("o:n{i:02}");
            let mut g = CallGraph::new();
            for i in 0..n {
                g.add_node(&name(i));
            }
            for (a, b) in edges {
                g.add_edge(&name(a), &name(b));
            }
            for (node, s) in sinks {
                g.add_sink(&name(node), syscalls[s]);
            }
            (g, entries.into_iter().map(name).collect())
        })
    })
}

/// Reachability and distances by repeated relaxation over the edge set.
fn distances(g: &CallGraph, from: &str) -> BTreeMap<String, usize> {
    let mut dist: BTreeMap<String, usize> = BTreeMap::new();
    dist.insert(from.to_string(), 0);
    loop {
        let mut changed = false;
        for (a, outs) in &g.edges {
            for b in outs {
                if let Some(&da) = dist.get(a) {
                    let better = dist.get(b).is_none_or(|&db| da + 1 < db);
                    if better {
                        dist.insert(b.clone(), da + 1);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return dist;
        }
    }
}

proptest! {
    #[test]
    fn matches_reachability_oracle((g, entries) in arb_graph()) {
        let policy = default_policy();
        let found = find_violations(&g, &entries, &policy, &ServiceMapping::default());
        let mut expected = BTreeSet::new();
        for e in &entries {
            let dist = distances(&g, e);
            for (node, syscall) in &g.sinks {
                if dist.contains_key(node) && policy.status(syscall).is_violation() {
                    expected.insert((e.clone(), syscall.clone()));
                }
            }
        }
        let got: BTreeSet<_> = found.iter().map(|v| (v.entry.clone(), v.syscall.clone())).collect();
        prop_assert_eq!(got.len(), found.len());
        prop_assert_eq!(&got, &expected);
        for v in &found {
            let dist = distances(&g, &v.entry);
            let best = g.sinks.iter()
                .filter(|(_, s)| **s == v.syscall)
                .filter_map(|(n, _)| dist.get(n))
                .min()
                .copied()
                .unwrap();
            prop_assert_eq!(v.path.len(), best + 1);
            prop_assert_eq!(&v.path[0], &v.entry);
            for w in v.path.windows(2) {
                prop_assert!(g.edges[&w[0]].contains(&w[1]));
            }
            prop_assert_eq!(g.sinks.get(v.path.last().unwrap()), Some(&v.syscall));
        }
        let mut sorted = found.clone();
        sorted.sort();
        prop_assert_eq!(sorted, found);
    }

    #[test]
    fn adding_edges_never_removes_violations(
        (g, entries) in arb_graph(),
        extra in proptest::collection::vec((0usize..30, 0usize..30), 1..5),
    ) {
        let policy = default_policy();
        let map = ServiceMapping::default();
        let key = |vs: Vec<Violation>| -> BTreeSet<(String, String)> {
            vs.into_iter().map(|v| (v.entry, v.syscall)).collect()
        };
        let before = key(find_violations(&g, &entries, &policy, &map));
        let mut bigger = g.clone();
        let nodes: Vec<String> = g.nodes.iter().cloned().collect();
        for (a, b) in extra {
            bigger.add_edge(&nodes[a % nodes.len()], &nodes[b % nodes.len()]);
        }
        let after = key(find_violations(&bigger, &entries, &policy, &map));
        prop_assert!(before.is_subset(&after));

        let mut lenient = policy.clone();
        lenient.allow("open");
        let relaxed = key(find_violations(&g, &entries, &lenient, &map));
        prop_assert!(relaxed.is_subset(&before));
    }
}
