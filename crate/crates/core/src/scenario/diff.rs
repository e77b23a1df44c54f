use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceDiff {
    Equal,
    /// First differing line (1-based). A missing line is `None`.
    Diverges {
        line: usize,
        left: Option<String>,
        right: Option<String>,
    },
}

#[derive(Debug, Error)]
#[error("unreadable trace {}", .path.display())]
pub struct UnreadableTrace {
    pub path: PathBuf,
    pub source: std::io::Error,
}

pub fn diff_trace_text(a: &str, b: &str) -> TraceDiff {
    let mut left = a.lines();
    let mut right = b.lines();
    let mut line = 0;
    loop {
        line += 1;
        match (left.next(), right.next()) {
            (None, None) => return TraceDiff::Equal,
            (l, r) if l == r => continue,
            (l, r) => {
                return TraceDiff::Diverges {
                    line,
                    left: l.map(str::to_owned),
                    right: r.map(str::to_owned),
                }
            }
        }
    }
}

pub fn diff_traces(a: &Path, b: &Path) -> Result<TraceDiff, UnreadableTrace> {
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|source| UnreadableTrace {
            path: p.to_owned(),
            source,
        })
    };
    Ok(diff_trace_text(&read(a)?, &read(b)?))
}
