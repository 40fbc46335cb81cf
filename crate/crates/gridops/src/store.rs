//! Append-log plus snapshot persistence, one journal per namespace.
//!
//! Layout of the data directory:
//!
//! ```text
//! LOCK                 held exclusively by the single writing process
//! <ns>.log             JSON lines {"seq":N,"rec":...}
//! <ns>.snap.json       {"seq":N,"state":...}, replaced atomically
//! ```
//!
//! Loading reads the snapshot and replays journal records with a larger
//! sequence number. A torn final journal line (crash mid-append) is dropped
//! and truncated away; any other malformed line is reported as corruption.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::SuiteError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Namespace {
    Registry,
    ProbeResults,
    Usage,
    Wms,
    Tickets,
    Audit,
}

impl Namespace {
    pub const ALL: [Namespace; 6] =
        [Namespace::Registry, Namespace::ProbeResults, Namespace::Usage, Namespace::Wms, Namespace::Tickets, Namespace::Audit];

    pub fn as_str(self) -> &'static str {
        match self {
            Namespace::Registry => "registry",
            Namespace::ProbeResults => "probe_results",
            Namespace::Usage => "usage",
            Namespace::Wms => "wms",
            Namespace::Tickets => "tickets",
            Namespace::Audit => "audit",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Line<R> {
    seq: u64,
    rec: R,
}

#[derive(Serialize)]
struct SnapshotOut<'a, S> {
    seq: u64,
    state: &'a S,
}

#[derive(Deserialize)]
struct SnapshotIn<S> {
    seq: u64,
    state: S,
}

#[derive(Debug, Default)]
struct Journal {
    file: Option<File>,
    seq: u64,
    since_snapshot: usize,
}

/// Recovered content of one namespace.
#[derive(Debug)]
pub struct Loaded<S, R> {
    pub snapshot: Option<S>,
    pub records: Vec<R>,
    /// Whether a torn final line was discarded.
    pub truncated_tail: bool,
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    _lock: File,
    snapshot_every: usize,
    journals: BTreeMap<Namespace, Journal>,
}

fn store_err(path: &Path, e: impl std::fmt::Display) -> SuiteError {
    SuiteError::Store(format!("{}: {e}", path.display()))
}

impl Store {
    /// Opens (creating if needed) a data directory and takes its writer lock.
    pub fn open(dir: &Path, snapshot_every: usize) -> Result<Store, SuiteError> {
        fs::create_dir_all(dir).map_err(|e| store_err(dir, e))?;
        let lock_path = dir.join("LOCK");
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(&lock_path).map_err(|e| store_err(&lock_path, e))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(SuiteError::Locked(dir.display().to_string())),
            Err(fs::TryLockError::Error(e)) => return Err(store_err(&lock_path, e)),
        }
        Ok(Store { dir: dir.to_path_buf(), _lock: lock, snapshot_every: snapshot_every.max(1), journals: BTreeMap::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn log_path(&self, ns: Namespace) -> PathBuf {
        self.dir.join(format!("{}.log", ns.as_str()))
    }

    fn snap_path(&self, ns: Namespace) -> PathBuf {
        self.dir.join(format!("{}.snap.json", ns.as_str()))
    }

    /// Reads a namespace back. Must be called once per namespace before appending.
    pub fn load<S: DeserializeOwned, R: DeserializeOwned>(&mut self, ns: Namespace) -> Result<Loaded<S, R>, SuiteError> {
        let snap_path = self.snap_path(ns);
        let (snap_seq, snapshot) = if snap_path.exists() {
            let f = File::open(&snap_path).map_err(|e| store_err(&snap_path, e))?;
            let s: SnapshotIn<S> = serde_json::from_reader(BufReader::new(f)).map_err(|e| store_err(&snap_path, e))?;
            (s.seq, Some(s.state))
        } else {
            (0, None)
        };

        let log_path = self.log_path(ns);
        let mut records = Vec::new();
        let mut seq = snap_seq;
        let mut since_snapshot = 0;
        let mut truncated_tail = false;
        if log_path.exists() {
            let f = File::open(&log_path).map_err(|e| store_err(&log_path, e))?;
            let mut reader = BufReader::new(f);
            let mut good_len = 0u64;
            let mut buf = String::new();
            let mut line_no = 0usize;
            loop {
                buf.clear();
                let n = reader.read_line(&mut buf).map_err(|e| store_err(&log_path, e))?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                let complete = buf.ends_with('\n');
                match serde_json::from_str::<Line<R>>(buf.trim_end()) {
                    Ok(line) if complete => {
                        good_len += n as u64;
                        if line.seq > snap_seq {
                            seq = line.seq;
                            since_snapshot += 1;
                            records.push(line.rec);
                        }
                    }
                    Ok(_) | Err(_) => {
                        let at_end = reader.fill_buf().map_err(|e| store_err(&log_path, e))?.is_empty();
                        if !at_end {
                            return Err(store_err(&log_path, format!("corrupt record on line {line_no}")));
                        }
                        truncated_tail = true;
                        break;
                    }
                }
            }
            if truncated_tail {
                let f = OpenOptions::new().write(true).open(&log_path).map_err(|e| store_err(&log_path, e))?;
                f.set_len(good_len).map_err(|e| store_err(&log_path, e))?;
                f.sync_all().map_err(|e| store_err(&log_path, e))?;
            }
        }
        self.journals.insert(ns, Journal { file: None, seq, since_snapshot });
        Ok(Loaded { snapshot, records, truncated_tail })
    }

    /// Appends records durably: one write, one fsync.
    pub fn append<R: Serialize>(&mut self, ns: Namespace, records: &[R]) -> Result<(), SuiteError> {
        if records.is_empty() {
            return Ok(());
        }
        let log_path = self.log_path(ns);
        let journal = self.journals.entry(ns).or_default();
        if journal.file.is_none() {
            let f = OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| store_err(&log_path, e))?;
            journal.file = Some(f);
        }
        let mut buf = Vec::with_capacity(records.len() * 128);
        let mut seq = journal.seq;
        for rec in records {
            seq += 1;
            serde_json::to_writer(&mut buf, &Line { seq, rec }).map_err(|e| store_err(&log_path, e))?;
            buf.push(b'\n');
        }
        let file = journal.file.as_mut().expect("opened above");
        file.write_all(&buf).map_err(|e| store_err(&log_path, e))?;
        file.sync_data().map_err(|e| store_err(&log_path, e))?;
        journal.seq = seq;
        journal.since_snapshot += records.len();
        Ok(())
    }

    pub fn should_compact(&self, ns: Namespace) -> bool {
        self.journals.get(&ns).is_some_and(|j| j.since_snapshot >= self.snapshot_every)
    }

    /// Writes `state` as the namespace snapshot and empties the journal.
    ///
    /// The snapshot carries the last journal sequence number it covers, so a
    /// crash between the rename and the truncation never double-applies records.
    pub fn compact<S: Serialize>(&mut self, ns: Namespace, state: &S) -> Result<(), SuiteError> {
        let seq = self.journals.get(&ns).map_or(0, |j| j.seq);
        let snap_path = self.snap_path(ns);
        let tmp = self.dir.join(format!("{}.snap.json.tmp", ns.as_str()));
        {
            let f = File::create(&tmp).map_err(|e| store_err(&tmp, e))?;
            let mut w = BufWriter::new(f);
            serde_json::to_writer(&mut w, &SnapshotOut { seq, state }).map_err(|e| store_err(&tmp, e))?;
            let f = w.into_inner().map_err(|e| store_err(&tmp, e))?;
            f.sync_all().map_err(|e| store_err(&tmp, e))?;
        }
        fs::rename(&tmp, &snap_path).map_err(|e| store_err(&snap_path, e))?;
        self.sync_dir()?;

        let log_path = self.log_path(ns);
        let journal = self.journals.entry(ns).or_default();
        let mut f = OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| store_err(&log_path, e))?;
        f.set_len(0).map_err(|e| store_err(&log_path, e))?;
        f.seek(SeekFrom::End(0)).map_err(|e| store_err(&log_path, e))?;
        f.sync_all().map_err(|e| store_err(&log_path, e))?;
        journal.file = Some(f);
        journal.since_snapshot = 0;
        Ok(())
    }

    fn sync_dir(&self) -> Result<(), SuiteError> {
        File::open(&self.dir).and_then(|d| d.sync_all()).map_err(|e| store_err(&self.dir, e))
    }

    /// Checks that the data directory is still present and writable.
    pub fn check(&self) -> Result<(), String> {
        let probe = self.dir.join(".probe");
        fs::write(&probe, b"ok").and_then(|()| fs::remove_file(&probe)).map_err(|e| format!("{}: {e}", self.dir.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_reload_and_compact() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Store::open(dir.path(), 3).unwrap();
            let l: Loaded<Vec<u32>, u32> = s.load(Namespace::Audit).unwrap();
            assert!(l.snapshot.is_none() && l.records.is_empty());
            s.append(Namespace::Audit, &[1u32, 2]).unwrap();
            assert!(!s.should_compact(Namespace::Audit));
            s.append(Namespace::Audit, &[3u32]).unwrap();
            assert!(s.should_compact(Namespace::Audit));
            s.compact(Namespace::Audit, &vec![1u32, 2, 3]).unwrap();
            s.append(Namespace::Audit, &[4u32]).unwrap();
        }
        let mut s = Store::open(dir.path(), 3).unwrap();
        let l: Loaded<Vec<u32>, u32> = s.load(Namespace::Audit).unwrap();
        assert_eq!(l.snapshot, Some(vec![1, 2, 3]));
        assert_eq!(l.records, vec![4]);
    }

    #[test]
    fn torn_tail_is_dropped_and_mid_corruption_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Store::open(dir.path(), 100).unwrap();
            let _: Loaded<(), u32> = s.load(Namespace::Wms).unwrap();
            s.append(Namespace::Wms, &[7u32, 8]).unwrap();
        }
        let log = dir.path().join("wms.log");
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"seq\":3,\"rec\":").unwrap();
        drop(f);
        {
            let mut s = Store::open(dir.path(), 100).unwrap();
            let l: Loaded<(), u32> = s.load(Namespace::Wms).unwrap();
            assert!(l.truncated_tail);
            assert_eq!(l.records, vec![7, 8]);
            s.append(Namespace::Wms, &[9u32]).unwrap();
        }
        let text = fs::read_to_string(&log).unwrap();
        assert_eq!(text.lines().count(), 3);
        fs::write(&log, "{\"seq\":1,\"rec\":1}\ngarbage\n{\"seq\":3,\"rec\":3}\n").unwrap();
        let mut s = Store::open(dir.path(), 100).unwrap();
        assert!(s.load::<(), u32>(Namespace::Wms).is_err());
    }

    #[test]
    fn second_writer_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let _first = Store::open(dir.path(), 10).unwrap();
        assert!(matches!(Store::open(dir.path(), 10), Err(SuiteError::Locked(_))));
    }
}
