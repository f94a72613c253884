use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Result, StudyError};
use crate::vote::VoteRecord;

/// Append-only JSON Lines vote log. Every append is synced to disk before
/// it returns.
#[derive(Debug)]
pub struct VoteLog {
    file: Option<(PathBuf, File)>,
    len: u64,
}

impl VoteLog {
    pub fn in_memory() -> Self {
        Self { file: None, len: 0 }
    }

    /// Opens (or creates) a log and returns the votes already in it. A torn
    /// final line left by a crash is cut off.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<VoteRecord>)> {
        let path = path.as_ref();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| StudyError::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| StudyError::io(path, e))?;
        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let mut votes = Vec::new();
        for (i, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let v: VoteRecord = serde_json::from_slice(line).map_err(|e| StudyError::LogCorrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            votes.push(v);
        }
        if complete < bytes.len() {
            file.set_len(complete as u64).map_err(|e| StudyError::io(path, e))?;
            file.sync_data().map_err(|e| StudyError::io(path, e))?;
        }
        Ok((
            Self {
                file: Some((path.to_path_buf(), file)),
                len: complete as u64,
            },
            votes,
        ))
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn append(&mut self, vote: &VoteRecord) -> Result<()> {
        let Some((path, file)) = self.file.as_mut() else {
            return Ok(());
        };
        let mut line = serde_json::to_vec(vote).map_err(|e| StudyError::InvalidVote(e.to_string()))?;
        line.push(b'\n');
        let written = file.write_all(&line).and_then(|_| file.sync_data());
        if let Err(e) = written {
            // Roll back a partial write so the next append starts on a fresh line.
            let _ = file.set_len(self.len);
            return Err(StudyError::io(path.clone(), e));
        }
        self.len += line.len() as u64;
        Ok(())
    }
}
