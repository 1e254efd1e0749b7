//! The append-only JSON-Lines event log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::{Phase, SessionPlan, Variant};
use crate::error::{Error, Result};

/// One answered (or expired) trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEvent {
    pub session_id: String,
    pub trial_index: usize,
    pub block: usize,
    /// Opaque asset token of the image shown.
    pub image_ref: String,
    pub phase: Phase,
    pub attention_check: bool,
    pub options: Vec<String>,
    /// `None` on timeout.
    pub choice: Option<String>,
    #[serde(default)]
    pub timed_out: bool,
    pub latency_ms: u64,
    pub correct: bool,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    SessionCreated {
        session_id: String,
        participant_id: String,
        experiment_id: String,
        variant: Variant,
        plan: SessionPlan,
        at_ms: u64,
    },
    TrialServed {
        session_id: String,
        trial_index: usize,
        at_ms: u64,
    },
    Response(TrialEvent),
    Completed {
        session_id: String,
        bonus: f64,
        at_ms: u64,
    },
    Withdrawn {
        session_id: String,
        at_ms: u64,
    },
}

impl Event {
    pub fn session_id(&self) -> &str {
        match self {
            Event::SessionCreated { session_id, .. }
            | Event::TrialServed { session_id, .. }
            | Event::Completed { session_id, .. }
            | Event::Withdrawn { session_id, .. } => session_id,
            Event::Response(t) => &t.session_id,
        }
    }
}

/// Append-only sink. Each event is written as one line and flushed before
/// `append` returns; in durable mode the file is also synced.
pub struct EventLog {
    sink: Option<(PathBuf, File)>,
    durable: bool,
    written: usize,
}

impl EventLog {
    pub fn in_memory() -> Self {
        EventLog {
            sink: None,
            durable: false,
            written: 0,
        }
    }

    /// Opens (creating if needed) a log file for appending and returns the
    /// events already in it. A torn final line is cut off before appending.
    pub fn open(path: impl AsRef<Path>, durable: bool) -> Result<(Self, Vec<Event>)> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (events, valid_len) = if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            read_events_with_len(f)?
        } else {
            (Vec::new(), 0)
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if file.metadata().map_err(|e| Error::io(path, e))?.len() != valid_len {
            file.set_len(valid_len).map_err(|e| Error::io(path, e))?;
        }
        let written = events.len();
        Ok((
            EventLog {
                sink: Some((path.to_path_buf(), file)),
                durable,
                written,
            },
            events,
        ))
    }

    pub fn append(&mut self, event: &Event) -> Result<()> {
        if let Some((path, file)) = self.sink.as_mut() {
            let mut line = serde_json::to_vec(event)?;
            line.push(b'\n');
            file.write_all(&line).map_err(|e| Error::io(&*path, e))?;
            file.flush().map_err(|e| Error::io(&*path, e))?;
            if self.durable {
                file.sync_data().map_err(|e| Error::io(&*path, e))?;
            }
        }
        self.written += 1;
        Ok(())
    }

    /// Events appended through this handle plus those found on open.
    pub fn len(&self) -> usize {
        self.written
    }

    pub fn is_empty(&self) -> bool {
        self.written == 0
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|(p, _)| p.as_path())
    }
}

/// Parses a log. A final line without its newline is a torn write and is
/// ignored; any other malformed line is an error.
pub fn read_events<R: Read>(r: R) -> Result<Vec<Event>> {
    Ok(read_events_with_len(r)?.0)
}

fn read_events_with_len<R: Read>(r: R) -> Result<(Vec<Event>, u64)> {
    let mut rd = BufReader::new(r);
    let mut events = Vec::new();
    let mut valid = 0u64;
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = rd.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if buf.last() != Some(&b'\n') {
            break;
        }
        let text = &buf[..buf.len() - 1];
        if text.iter().all(u8::is_ascii_whitespace) {
            valid += n as u64;
            continue;
        }
        let ev: Event =
            serde_json::from_slice(text).map_err(|e| Error::invalid(format!("event log line {line_no}: {e}")))?;
        events.push(ev);
        valid += n as u64;
    }
    Ok((events, valid))
}
