use crate::ids::VirtualTime;
use sha2::{Digest, Sha256};
use std::fmt::Display;
use std::io::Write;
use std::path::Path;

/// Event trace: one tab-separated line per processed event
/// (`timestamp`, `kind`, `subject`, `detail`), hashed as it is written.
#[derive(Clone)]
pub struct Trace {
    lines: Vec<String>,
    hasher: Sha256,
}

impl Default for Trace {
    fn default() -> Self {
        Self {
            lines: Vec::new(),
            hasher: Sha256::new(),
        }
    }
}

impl std::fmt::Debug for Trace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trace").field("lines", &self.lines.len()).finish()
    }
}

impl Trace {
    pub fn record(&mut self, at: VirtualTime, kind: &str, subject: impl Display, detail: impl Display) {
        let line = format!("{at}\t{kind}\t{subject}\t{detail}");
        debug_assert!(!line.contains('\n'));
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Hex SHA-256 of the trace text so far.
    pub fn hash(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    pub fn write_to(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        f.flush()
    }
}

/// A parsed trace line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLine<'a> {
    pub at: VirtualTime,
    pub kind: &'a str,
    pub subject: &'a str,
    pub detail: &'a str,
}

pub fn parse_trace_line(line: &str) -> Option<TraceLine<'_>> {
    let mut parts = line.splitn(4, '\t');
    Some(TraceLine {
        at: parts.next()?.parse().ok()?,
        kind: parts.next()?,
        subject: parts.next()?,
        detail: parts.next()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_covers_text() {
        let mut a = Trace::default();
        let mut b = Trace::default();
        a.record(1, "launch", "x", "y");
        b.record(1, "launch", "x", "y");
        assert_eq!(a.hash(), b.hash());
        b.record(2, "boot", "x", "");
        assert_ne!(a.hash(), b.hash());
        let direct = hex::encode(Sha256::digest(b.to_text().as_bytes()));
        assert_eq!(b.hash(), direct);
    }

    #[test]
    fn line_parsing() {
        let l = parse_trace_line("12\tassign\ts1\tinstance=a b=c").unwrap();
        assert_eq!(
            (l.at, l.kind, l.subject, l.detail),
            (12, "assign", "s1", "instance=a b=c")
        );
        assert!(parse_trace_line("x\ty").is_none());
    }
}
