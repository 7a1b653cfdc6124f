use alloc::string::String;
use core::fmt::Write;

use super::{ResourceGrant, ServiceDeclaration};

/// Serializes a declaration as strict JSON with a fixed key order.
///
/// Sets are written sorted, lists in their original order, and an empty
/// dns `type` set is omitted. Reparsing the output yields an equal value.
pub fn canonicalize(decl: &ServiceDeclaration) -> String {
    let mut out = String::from("{");
    let mut first = true;
    if let Some(binary) = &decl.binary {
        out.push_str("\n  \"binary\": ");
        write_json_string(&mut out, binary);
        first = false;
    }
    for grant in &decl.grants {
        out.push_str(if first { "\n  " } else { ",\n  " });
        first = false;
        write_json_string(&mut out, grant.service().name());
        out.push_str(": ");
        write_grant(&mut out, grant, 1);
    }
    out.push_str("\n}\n");
    out
}

/// Serializes one grant body, e.g. `{"family": ["AF_INET"]}`, on one line.
pub fn grant_to_text(grant: &ResourceGrant) -> String {
    let mut out = String::new();
    write_grant(&mut out, grant, 0);
    out
}

/// Appends `s` as a JSON string literal.
pub fn write_json_string(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 || c == '\u{7f}' => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

/// Writes objects either pretty-printed at `depth` or, when `depth == 0`,
/// on a single line.
struct ObjectWriter<'a> {
    out: &'a mut String,
    depth: usize,
    first: bool,
}

impl<'a> ObjectWriter<'a> {
    fn open(out: &'a mut String, depth: usize) -> Self {
        out.push('{');
        ObjectWriter { out, depth, first: true }
    }

    fn key(&mut self, key: &str) -> &mut String {
        if !self.first {
            self.out.push(',');
        }
        self.first = false;
        if self.depth > 0 {
            self.out.push('\n');
            for _ in 0..=self.depth {
                self.out.push_str("  ");
            }
        } else {
            self.out.push(' ');
        }
        write_json_string(self.out, key);
        self.out.push_str(": ");
        self.out
    }

    fn list<'s>(&mut self, key: &str, items: impl IntoIterator<Item = &'s str>) {
        let out = self.key(key);
        out.push('[');
        for (i, item) in items.into_iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            write_json_string(out, item);
        }
        out.push(']');
    }

    fn close(self) {
        if self.depth > 0 {
            if !self.first {
                self.out.push('\n');
                for _ in 0..self.depth {
                    self.out.push_str("  ");
                }
            }
        } else if !self.first {
            self.out.push(' ');
        }
        self.out.push('}');
    }
}

fn write_grant(out: &mut String, grant: &ResourceGrant, depth: usize) {
    let mut w = ObjectWriter::open(out, depth);
    match grant {
        ResourceGrant::FileArgs(g) => {
            w.list("operations", g.operations.iter().map(|o| o.name()));
            w.list("flags", g.flags.iter().map(|f| f.name()));
            w.list("cap_rights", g.rights.iter().map(|r| r.name()));
            w.list("filename", g.filenames.iter().map(String::as_str));
        }
        ResourceGrant::Dns(g) => {
            if !g.types.is_empty() {
                w.list("type", g.types.iter().map(|t| t.name()));
            }
            w.list("family", g.families.iter().map(|f| f.name()));
        }
        ResourceGrant::Net(g) => {
            w.list("host", g.hosts.iter().map(String::as_str));
            w.list("family", g.families.iter().map(|f| f.name()));
        }
        ResourceGrant::Sysctl(g) => {
            for (key, entry) in &g.entries {
                let child_depth = if depth == 0 { 0 } else { depth + 1 };
                let out = w.key(key);
                let mut inner = ObjectWriter::open(out, child_depth);
                let t = inner.key("type");
                write_json_string(t, entry.key_type.name());
                inner.list("flag", entry.flags.iter().map(|f| f.name()));
                inner.close();
            }
        }
    }
    w.close();
}
