//! Append-only command journal.
//!
//! Each record is `len: u32 BE | crc32(payload): u32 BE | payload`, where the
//! payload is the JSON encoding of one [`JournalEntry`]. Sequence numbers
//! start at 1 and must be gapless. A trailing record cut short by a crash is a
//! torn write: it was never acknowledged, so readers drop it. A complete
//! record with a bad checksum or an out-of-order sequence is corruption.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::Command;
use crate::allocator::PortBinding;
use crate::engine::ContainerRef;
use crate::session::{SessionId, SessionState};

const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingDelta {
    Bound(PortBinding),
    Released,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSet {
    pub renderer: Option<ContainerRef>,
    #[serde(default)]
    pub workers: Vec<ContainerRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub sequence: u64,
    pub command: Command,
    pub session: SessionId,
    pub resulting_state: SessionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<BindingDelta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub containers: Option<ContainerSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("corrupt journal at sequence {sequence}: {reason}")]
    CorruptJournal { sequence: u64, reason: String },
    #[error("journal io: {0}")]
    Io(#[from] io::Error),
}

impl JournalError {
    fn corrupt(sequence: u64, reason: impl Into<String>) -> Self {
        JournalError::CorruptJournal { sequence, reason: reason.into() }
    }
}

pub fn encode_record(entry: &JournalEntry) -> Vec<u8> {
    let payload = serde_json::to_vec(entry).expect("journal entries always serialize");
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_be_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Parsed journal contents plus the byte length of the valid prefix.
#[derive(Debug)]
pub struct Decoded {
    pub entries: Vec<JournalEntry>,
    pub valid_len: usize,
    pub torn_tail: bool,
}

pub fn decode_records(bytes: &[u8]) -> Result<Decoded, JournalError> {
    let mut entries = Vec::new();
    let mut offset = 0;
    loop {
        let expected = entries.len() as u64 + 1;
        let rest = &bytes[offset..];
        if rest.is_empty() {
            return Ok(Decoded { entries, valid_len: offset, torn_tail: false });
        }
        if rest.len() < HEADER_LEN {
            return Ok(Decoded { entries, valid_len: offset, torn_tail: true });
        }
        let len = u32::from_be_bytes(rest[0..4].try_into().expect("4 bytes")) as usize;
        let crc = u32::from_be_bytes(rest[4..8].try_into().expect("4 bytes"));
        if rest.len() < HEADER_LEN + len {
            return Ok(Decoded { entries, valid_len: offset, torn_tail: true });
        }
        let payload = &rest[HEADER_LEN..HEADER_LEN + len];
        if crc32fast::hash(payload) != crc {
            return Err(JournalError::corrupt(expected, "checksum mismatch"));
        }
        let entry: JournalEntry =
            serde_json::from_slice(payload).map_err(|e| JournalError::corrupt(expected, format!("bad payload: {e}")))?;
        if entry.sequence != expected {
            return Err(JournalError::corrupt(expected, format!("found sequence {}", entry.sequence)));
        }
        entries.push(entry);
        offset += HEADER_LEN + len;
    }
}

/// Checks that `entries` are numbered 1, 2, 3, ... without gaps.
pub fn check_gapless(entries: &[JournalEntry]) -> Result<(), JournalError> {
    for (i, e) in entries.iter().enumerate() {
        let expected = i as u64 + 1;
        if e.sequence != expected {
            return Err(JournalError::corrupt(expected, format!("found sequence {}", e.sequence)));
        }
    }
    Ok(())
}

pub trait JournalSink: Send + Sync {
    /// Durably appends `entry`. Returns only once the record is stable.
    fn append(&mut self, entry: &JournalEntry) -> Result<(), JournalError>;
}

/// File-backed journal; every append is followed by `fdatasync`.
pub struct FileJournal {
    file: File,
    path: PathBuf,
}

impl FileJournal {
    /// Opens (or creates) the journal, returns its entries and drops any torn
    /// tail so later appends start on a record boundary.
    pub fn open(path: impl AsRef<Path>) -> Result<(FileJournal, Vec<JournalEntry>), JournalError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let decoded = decode_records(&bytes)?;
        if decoded.torn_tail {
            tracing::warn!(path = %path.display(), dropped = bytes.len() - decoded.valid_len, "dropping torn journal tail");
            file.set_len(decoded.valid_len as u64)?;
            file.seek(SeekFrom::End(0))?;
            file.sync_data()?;
        }
        Ok((FileJournal { file, path }, decoded.entries))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl JournalSink for FileJournal {
    fn append(&mut self, entry: &JournalEntry) -> Result<(), JournalError> {
        self.file.write_all(&encode_record(entry))?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// In-memory journal whose clones share one entry list.
#[derive(Debug, Clone, Default)]
pub struct MemoryJournal {
    entries: Arc<Mutex<Vec<JournalEntry>>>,
}

impl MemoryJournal {
    pub fn entries(&self) -> Vec<JournalEntry> {
        self.entries.lock().expect("journal mutex poisoned").clone()
    }
}

impl JournalSink for MemoryJournal {
    fn append(&mut self, entry: &JournalEntry) -> Result<(), JournalError> {
        self.entries.lock().expect("journal mutex poisoned").push(entry.clone());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifecycle::CommandKind;
    use crate::session::Timestamp;

    fn entry(sequence: u64) -> JournalEntry {
        JournalEntry {
            sequence,
            command: Command {
                kind: CommandKind::Suspend(SessionId::new(1).unwrap()),
                issued_by: "alice".into(),
                at: Timestamp(sequence * 10),
            },
            session: SessionId::new(1).unwrap(),
            resulting_state: SessionState::Suspended,
            binding: None,
            containers: None,
            error: None,
        }
    }

    fn bytes(entries: &[JournalEntry]) -> Vec<u8> {
        entries.iter().flat_map(encode_record).collect()
    }

    #[test]
    fn decodes_what_it_encodes() {
        let entries = vec![entry(1), entry(2), entry(3)];
        let decoded = decode_records(&bytes(&entries)).unwrap();
        assert_eq!(decoded.entries, entries);
        assert!(!decoded.torn_tail);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let mut b = bytes(&[entry(1), entry(2)]);
        let full = b.len();
        b.truncate(full - 3);
        let decoded = decode_records(&b).unwrap();
        assert_eq!(decoded.entries, vec![entry(1)]);
        assert!(decoded.torn_tail);
    }

    #[test]
    fn checksum_failure_is_corruption() {
        let mut b = bytes(&[entry(1), entry(2)]);
        let last = b.len() - 2;
        b[last] ^= 0xff;
        assert!(matches!(decode_records(&b), Err(JournalError::CorruptJournal { sequence: 2, .. })));
    }

    #[test]
    fn gap_is_corruption() {
        let b = bytes(&[entry(1), entry(2), entry(4)]);
        assert!(matches!(decode_records(&b), Err(JournalError::CorruptJournal { sequence: 3, .. })));
        assert!(matches!(check_gapless(&[entry(1), entry(3)]), Err(JournalError::CorruptJournal { sequence: 2, .. })));
    }

    #[test]
    fn file_journal_truncates_torn_tail_and_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.log");
        {
            let (mut j, existing) = FileJournal::open(&path).unwrap();
            assert!(existing.is_empty());
            j.append(&entry(1)).unwrap();
            j.append(&entry(2)).unwrap();
        }
        // Simulate a crash halfway through writing record 3.
        let partial = encode_record(&entry(3));
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&partial[..partial.len() / 2]).unwrap();
        drop(f);

        let (mut j, existing) = FileJournal::open(&path).unwrap();
        assert_eq!(existing, vec![entry(1), entry(2)]);
        j.append(&entry(3)).unwrap();
        drop(j);
        let (_, existing) = FileJournal::open(&path).unwrap();
        assert_eq!(existing, vec![entry(1), entry(2), entry(3)]);
    }
}
