use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DecisionRecord, DetectorError};

pub const DECISIONS_FILE: &str = "decisions.jsonl";
const LOCK_FILE: &str = ".decisions.lock";
const SYNC_EVERY: usize = 256;

/// First line of a decision log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub run_id: String,
    pub manifest_digest: String,
    pub config: serde_json::Value,
}

/// Exclusive hold on a run directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, DetectorError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(DetectorError::RunLocked(path)),
            Err(e) => Err(DetectorError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Reads a decision log. A torn final line (no trailing newline, or not
/// valid JSON) is ignored; the returned length is where valid content ends.
pub fn read_log(path: &Path) -> Result<(Option<LogHeader>, Vec<DecisionRecord>, u64), DetectorError> {
    let file = File::open(path).map_err(|e| DetectorError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = None;
    let mut records = Vec::new();
    let mut good_len = 0u64;
    let mut line = String::new();
    let mut line_no = 0usize;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| DetectorError::io(path, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = line.ends_with('\n');
        let trimmed = line.trim();
        if trimmed.is_empty() {
            if complete {
                good_len += n as u64;
            }
            continue;
        }
        let parsed = if line_no == 1 {
            serde_json::from_str::<LogHeader>(trimmed).map(|h| header = Some(h))
        } else {
            serde_json::from_str::<DecisionRecord>(trimmed).map(|r| records.push(r))
        };
        match parsed {
            Ok(()) if complete => good_len += n as u64,
            Ok(()) => {
                // valid JSON but unterminated: treat as torn
                if line_no == 1 {
                    header = None;
                } else {
                    records.pop();
                }
                break;
            }
            Err(_) if !complete => break,
            Err(e) => {
                return Err(DetectorError::CorruptLog { path: path.to_path_buf(), line: line_no, reason: e.to_string() })
            }
        }
    }
    Ok((header, records, good_len))
}

/// Latest record per sample id.
pub fn latest_by_sample(records: Vec<DecisionRecord>) -> BTreeMap<String, DecisionRecord> {
    records.into_iter().map(|r| (r.sample_id.clone(), r)).collect()
}

/// Single appender for a run's decision log.
pub struct DecisionLog {
    path: PathBuf,
    out: BufWriter<File>,
    unsynced: usize,
    _lock: RunLock,
}

impl DecisionLog {
    /// Opens or creates `dir/decisions.jsonl`. Returns the log and the records
    /// already present. A log written under a different run id is refused.
    pub fn open(dir: &Path, header: &LogHeader) -> Result<(Self, Vec<DecisionRecord>), DetectorError> {
        std::fs::create_dir_all(dir).map_err(|e| DetectorError::io(dir, e))?;
        let lock = RunLock::acquire(dir)?;
        let path = dir.join(DECISIONS_FILE);
        let mut prior = Vec::new();
        let mut needs_header = true;
        if path.exists() {
            let (existing, records, good_len) = read_log(&path)?;
            match existing {
                Some(h) if h.run_id != header.run_id => {
                    return Err(DetectorError::RunMismatch { dir: dir.to_path_buf(), found: h.run_id, expected: header.run_id.clone() })
                }
                Some(_) => needs_header = false,
                None if !records.is_empty() => {
                    return Err(DetectorError::CorruptLog { path, line: 1, reason: "missing header".into() })
                }
                None => {}
            }
            let file = OpenOptions::new().write(true).open(&path).map_err(|e| DetectorError::io(&path, e))?;
            file.set_len(if needs_header { 0 } else { good_len }).map_err(|e| DetectorError::io(&path, e))?;
            prior = records;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| DetectorError::io(&path, e))?;
        file.seek(SeekFrom::End(0)).map_err(|e| DetectorError::io(&path, e))?;
        let mut log = Self { path, out: BufWriter::new(file), unsynced: 0, _lock: lock };
        if needs_header {
            log.write_line(&serde_json::to_vec(header).expect("serializable"))?;
            log.sync()?;
        }
        Ok((log, prior))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write_line(&mut self, bytes: &[u8]) -> Result<(), DetectorError> {
        self.out.write_all(bytes).map_err(|e| DetectorError::io(&self.path, e))?;
        self.out.write_all(b"\n").map_err(|e| DetectorError::io(&self.path, e))?;
        self.out.flush().map_err(|e| DetectorError::io(&self.path, e))
    }

    pub fn append(&mut self, record: &DecisionRecord) -> Result<(), DetectorError> {
        self.write_line(&serde_json::to_vec(record).expect("serializable"))?;
        self.unsynced += 1;
        if self.unsynced >= SYNC_EVERY {
            self.sync()?;
        }
        Ok(())
    }

    pub fn sync(&mut self) -> Result<(), DetectorError> {
        self.out.flush().map_err(|e| DetectorError::io(&self.path, e))?;
        self.out.get_ref().sync_data().map_err(|e| DetectorError::io(&self.path, e))?;
        self.unsynced = 0;
        Ok(())
    }
}

impl Drop for DecisionLog {
    fn drop(&mut self) {
        let _ = self.sync();
    }
}
