//! Append-only session log: one JSON event per line.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use obtod_core::{Session, Turn, TurnResult};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    SessionCreated { session_id: String, created_at: DateTime<Utc> },
    TurnAppended { session_id: String, turn: Turn },
    TurnResult { session_id: String, result: Box<TurnResult> },
}

impl LogEvent {
    pub fn session_id(&self) -> &str {
        match self {
            LogEvent::SessionCreated { session_id, .. }
            | LogEvent::TurnAppended { session_id, .. }
            | LogEvent::TurnResult { session_id, .. } => session_id,
        }
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("session log {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("session log {path} line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

pub struct SessionLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl SessionLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LogError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| LogError::Io { path: path.clone(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        Ok(Self { path, file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes the events as one append so a turn is never half-logged by
    /// this process.
    pub fn append(&self, events: &[LogEvent]) -> Result<(), LogError> {
        let mut buf = Vec::new();
        for e in events {
            serde_json::to_writer(&mut buf, e).expect("log events serialize");
            buf.push(b'\n');
        }
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(&buf).and_then(|_| file.flush()).map_err(|source| LogError::Io { path: self.path.clone(), source })
    }
}

/// Rebuilds sessions from a log file. A missing file means no sessions. A
/// torn final line (crash mid-write) is dropped; corruption elsewhere is an
/// error.
pub fn replay_log(path: impl AsRef<Path>) -> Result<Vec<Session>, LogError> {
    let path = path.as_ref();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(LogError::Io { path: path.to_path_buf(), source }),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|source| LogError::Io { path: path.to_path_buf(), source })?;
    let corrupt = |line: usize, message: String| LogError::Corrupt { path: path.to_path_buf(), line, message };

    let mut order = Vec::new();
    let mut sessions: HashMap<String, Session> = HashMap::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: LogEvent = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(e) if i + 1 == lines.len() => {
                tracing::warn!(line = i + 1, error = %e, "dropping torn final log line");
                break;
            }
            Err(e) => return Err(corrupt(i + 1, e.to_string())),
        };
        match event {
            LogEvent::SessionCreated { session_id, created_at } => {
                if sessions.contains_key(&session_id) {
                    return Err(corrupt(i + 1, format!("session {session_id} created twice")));
                }
                order.push(session_id.clone());
                sessions.insert(session_id.clone(), Session::with_time(session_id, created_at));
            }
            LogEvent::TurnAppended { session_id, turn } => {
                let s = sessions.get_mut(&session_id).ok_or_else(|| corrupt(i + 1, format!("unknown session {session_id}")))?;
                if turn.role != s.next_role() {
                    return Err(corrupt(i + 1, format!("turn out of order in session {session_id}")));
                }
                s.turns.push(turn);
            }
            LogEvent::TurnResult { session_id, result } => {
                let s = sessions.get_mut(&session_id).ok_or_else(|| corrupt(i + 1, format!("unknown session {session_id}")))?;
                s.trace.push(*result);
            }
        }
    }
    Ok(order.into_iter().filter_map(|id| sessions.remove(&id)).collect())
}
