//! Active Sessions cache: an append-only journal of session mutations.
//!
//! Layout: the header line `evop-sessions v1\n`, then records of
//! `u32 LE payload length | JSON payload | u32 LE CRC-32 of payload`.
//! Replay stops at the first torn or corrupt record; everything before it is
//! the recovered state.

use super::Session;
use crate::ids::SessionId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

pub const JOURNAL_HEADER: &[u8] = b"evop-sessions v1\n";

/// Records appended since the last compaction before another one is forced,
/// on top of two per live session.
const COMPACTION_SLACK: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum JournalEntry {
    /// Full state of one session after a mutation.
    Upsert { session: Session },
    /// Session-id allocator high-water mark.
    Meta { next_session: u64 },
}

pub fn encode_record(entry: &JournalEntry) -> Vec<u8> {
    let payload = serde_json::to_vec(entry).expect("journal entries serialize");
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationCause {
    BadHeader,
    TornRecord,
    ChecksumMismatch,
    BadPayload,
}

impl fmt::Display for TruncationCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TruncationCause::BadHeader => "bad header",
            TruncationCause::TornRecord => "torn record",
            TruncationCause::ChecksumMismatch => "checksum mismatch",
            TruncationCause::BadPayload => "undecodable payload",
        })
    }
}

/// Where replay stopped and why.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Truncation {
    pub valid_bytes: usize,
    pub discarded_bytes: usize,
    pub records_kept: usize,
    pub cause: TruncationCause,
}

impl fmt::Display for Truncation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} after {} valid records ({} bytes kept, {} discarded)",
            self.cause, self.records_kept, self.valid_bytes, self.discarded_bytes
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Replay {
    pub sessions: BTreeMap<SessionId, Session>,
    pub next_session: u64,
    pub records: usize,
    pub truncation: Option<Truncation>,
}

/// Replays journal bytes. Never fails: damage is reported as a truncation.
pub fn replay(bytes: &[u8]) -> Replay {
    let mut out = Replay {
        next_session: 1,
        ..Replay::default()
    };
    if bytes.is_empty() {
        return out;
    }
    let truncate = |out: &mut Replay, at: usize, cause| {
        out.truncation = Some(Truncation {
            valid_bytes: at,
            discarded_bytes: bytes.len() - at,
            records_kept: out.records,
            cause,
        });
    };
    if !bytes.starts_with(JOURNAL_HEADER) {
        truncate(&mut out, 0, TruncationCause::BadHeader);
        return out;
    }
    let mut pos = JOURNAL_HEADER.len();
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        if rest.len() < 4 {
            truncate(&mut out, pos, TruncationCause::TornRecord);
            break;
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        if rest.len() < 4 + len + 4 {
            truncate(&mut out, pos, TruncationCause::TornRecord);
            break;
        }
        let payload = &rest[4..4 + len];
        let crc = u32::from_le_bytes(rest[4 + len..8 + len].try_into().unwrap());
        if crc32fast::hash(payload) != crc {
            truncate(&mut out, pos, TruncationCause::ChecksumMismatch);
            break;
        }
        let Ok(entry) = serde_json::from_slice::<JournalEntry>(payload) else {
            truncate(&mut out, pos, TruncationCause::BadPayload);
            break;
        };
        match entry {
            JournalEntry::Upsert { session } => {
                out.next_session = out.next_session.max(session.serial() + 1);
                out.sessions.insert(session.session_id.clone(), session);
            }
            JournalEntry::Meta { next_session } => {
                out.next_session = out.next_session.max(next_session);
            }
        }
        out.records += 1;
        pos += 8 + len;
    }
    out
}

/// Durable byte store behind the journal.
pub trait JournalStore: Send {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn read_all(&self) -> io::Result<Vec<u8>>;
    /// Atomically replaces the whole content.
    fn replace(&mut self, bytes: &[u8]) -> io::Result<()>;
}

/// In-memory store; survives a broker crash because the harness keeps it.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    pub bytes: Vec<u8>,
}

impl JournalStore for MemoryStore {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.bytes.extend_from_slice(bytes);
        Ok(())
    }

    fn read_all(&self) -> io::Result<Vec<u8>> {
        Ok(self.bytes.clone())
    }

    fn replace(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.bytes = bytes.to_vec();
        Ok(())
    }
}

/// File-backed store. Appends are flushed, and synced when `sync` is set.
#[derive(Debug)]
pub struct FileStore {
    path: PathBuf,
    file: File,
    sync: bool,
}

impl FileStore {
    pub fn open(path: &Path, sync: bool) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_owned(),
            file,
            sync,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl JournalStore for FileStore {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.file.write_all(bytes)?;
        self.file.flush()?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    fn read_all(&self) -> io::Result<Vec<u8>> {
        std::fs::read(&self.path)
    }

    fn replace(&mut self, bytes: &[u8]) -> io::Result<()> {
        let tmp = self.path.with_extension("compact");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &self.path)?;
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }
}

/// Writer side of the journal.
pub struct Journal {
    store: Box<dyn JournalStore>,
    since_compaction: usize,
}

impl Journal {
    pub fn new(store: Box<dyn JournalStore>) -> Self {
        Self {
            store,
            since_compaction: 0,
        }
    }

    pub fn into_store(self) -> Box<dyn JournalStore> {
        self.store
    }

    pub fn read_all(&self) -> io::Result<Vec<u8>> {
        self.store.read_all()
    }

    pub fn append(&mut self, entry: &JournalEntry) -> io::Result<()> {
        self.store.append(&encode_record(entry))?;
        self.since_compaction += 1;
        Ok(())
    }

    /// Rewrites the journal as a snapshot of `live` sessions.
    pub fn compact<'a>(&mut self, next_session: u64, live: impl IntoIterator<Item = &'a Session>) -> io::Result<()> {
        let mut buf = JOURNAL_HEADER.to_vec();
        buf.extend(encode_record(&JournalEntry::Meta { next_session }));
        for s in live {
            buf.extend(encode_record(&JournalEntry::Upsert { session: s.clone() }));
        }
        self.store.replace(&buf)?;
        self.since_compaction = 0;
        Ok(())
    }

    pub fn wants_compaction(&self, live_sessions: usize) -> bool {
        self.since_compaction > COMPACTION_SLACK + 2 * live_sessions
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::SessionState;

    fn session(n: u64, epoch: u64) -> Session {
        Session {
            session_id: Session::id_for(n),
            model_id: "topmodel-stub".into(),
            instance_id: format!("private-i{n:05}").into(),
            address: "a:1".into(),
            client: format!("c{n}").into(),
            epoch,
            state: SessionState::Active,
            created_at: n,
            last_activity: n,
        }
    }

    fn journal_bytes(entries: &[JournalEntry]) -> Vec<u8> {
        let mut b = JOURNAL_HEADER.to_vec();
        for e in entries {
            b.extend(encode_record(e));
        }
        b
    }

    #[test]
    fn empty_store_is_empty_state() {
        let r = replay(&[]);
        assert!(r.sessions.is_empty());
        assert_eq!(r.truncation, None);
        assert_eq!(r.next_session, 1);
        let r = replay(JOURNAL_HEADER);
        assert!(r.sessions.is_empty() && r.truncation.is_none());
    }

    #[test]
    fn later_records_win() {
        let b = journal_bytes(&[
            JournalEntry::Upsert { session: session(1, 1) },
            JournalEntry::Upsert { session: session(2, 1) },
            JournalEntry::Upsert { session: session(1, 2) },
        ]);
        let r = replay(&b);
        assert_eq!(r.sessions.len(), 2);
        assert_eq!(r.sessions[&Session::id_for(1)].epoch, 2);
        assert_eq!(r.next_session, 3);
        assert_eq!(r.records, 3);
    }

    #[test]
    fn flipped_byte_is_checksum_mismatch() {
        let mut b = journal_bytes(&[
            JournalEntry::Upsert { session: session(1, 1) },
            JournalEntry::Upsert { session: session(2, 1) },
        ]);
        let first_len = encode_record(&JournalEntry::Upsert { session: session(1, 1) }).len();
        let idx = JOURNAL_HEADER.len() + first_len + 10;
        b[idx] ^= 0x55;
        let r = replay(&b);
        assert_eq!(r.sessions.len(), 1);
        let t = r.truncation.unwrap();
        assert_eq!(t.cause, TruncationCause::ChecksumMismatch);
        assert_eq!(t.valid_bytes, JOURNAL_HEADER.len() + first_len);
    }

    #[test]
    fn torn_tail_keeps_prefix() {
        let good = journal_bytes(&[JournalEntry::Upsert { session: session(1, 1) }]);
        let last = encode_record(&JournalEntry::Upsert { session: session(1, 2) });
        for cut in 0..last.len() {
            let mut b = good.clone();
            b.extend_from_slice(&last[..cut]);
            let r = replay(&b);
            assert_eq!(r.sessions[&Session::id_for(1)].epoch, 1, "cut={cut}");
            if cut == 0 {
                assert!(r.truncation.is_none());
            } else {
                let t = r.truncation.unwrap();
                assert_eq!(t.valid_bytes, good.len());
                assert_eq!(t.discarded_bytes, cut);
            }
        }
    }

    #[test]
    fn bad_header() {
        let r = replay(b"garbage");
        assert_eq!(r.truncation.unwrap().cause, TruncationCause::BadHeader);
    }

    #[test]
    fn meta_survives_compaction() {
        let mut j = Journal::new(Box::new(MemoryStore::default()));
        j.compact(42, [&session(3, 7)]).unwrap();
        let r = replay(&j.read_all().unwrap());
        assert_eq!(r.next_session, 42);
        assert_eq!(r.sessions[&Session::id_for(3)].epoch, 7);
    }

    #[test]
    fn file_store_appends_and_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sessions.journal");
        let mut j = Journal::new(Box::new(FileStore::open(&path, true).unwrap()));
        j.compact(1, []).unwrap();
        j.append(&JournalEntry::Upsert { session: session(1, 1) }).unwrap();
        j.append(&JournalEntry::Upsert { session: session(1, 2) }).unwrap();
        let r = replay(&std::fs::read(&path).unwrap());
        assert_eq!(r.sessions[&Session::id_for(1)].epoch, 2);
        j.compact(2, []).unwrap();
        j.append(&JournalEntry::Upsert { session: session(5, 1) }).unwrap();
        let r = replay(&std::fs::read(&path).unwrap());
        assert_eq!(r.sessions.len(), 1);
        assert_eq!(r.next_session, 6);
    }
}
