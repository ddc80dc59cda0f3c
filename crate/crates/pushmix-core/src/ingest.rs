//! Parsing and windowing of interaction and push-impression logs.
//!
//! Logs are JSON-lines: one object per line, UTF-8. Malformed lines are
//! skipped and counted unless strict mode is on, in which case the first
//! bad line aborts the parse.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kind of a user-product interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Purchase,
    View,
}

/// One user-product purchase or view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: String,
    pub item_id: String,
    pub category_id: String,
    pub kind: EventKind,
    pub timestamp: i64,
}

/// One push impression: the anchor purchase, the recommended product, and
/// whether the message was opened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushImpression {
    pub user_id: String,
    pub anchor_item_id: String,
    pub pushed_item_id: String,
    pub opened: u8,
    pub timestamp: i64,
}

/// Anything carrying an event timestamp; lets [`filter_window`] work on both
/// events and impressions.
pub trait Timestamped {
    fn timestamp(&self) -> i64;
}

impl Timestamped for InteractionEvent {
    fn timestamp(&self) -> i64 {
        self.timestamp
    }
}

impl Timestamped for PushImpression {
    fn timestamp(&self) -> i64 {
        self.timestamp
    }
}

/// Outcome of parsing a log: valid records in input order plus line accounting.
#[derive(Debug, Clone)]
pub struct ParseOutcome<T> {
    pub records: Vec<T>,
    /// Number of malformed lines that were skipped.
    pub skipped: usize,
    /// Total number of input lines seen.
    pub lines: usize,
}

fn validate_event(ev: &InteractionEvent) -> std::result::Result<(), String> {
    if ev.timestamp <= 0 {
        return Err(format!("timestamp must be positive, got {}", ev.timestamp));
    }
    Ok(())
}

fn validate_impression(imp: &PushImpression) -> std::result::Result<(), String> {
    if imp.timestamp <= 0 {
        return Err(format!("timestamp must be positive, got {}", imp.timestamp));
    }
    if imp.opened > 1 {
        return Err(format!("opened must be 0 or 1, got {}", imp.opened));
    }
    Ok(())
}

fn parse_lines<T, F>(reader: impl BufRead, strict: bool, validate: F) -> Result<ParseOutcome<T>>
where
    T: for<'de> Deserialize<'de>,
    F: Fn(&T) -> std::result::Result<(), String>,
{
    let mut records = Vec::new();
    let mut skipped = 0usize;
    let mut lines = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        lines += 1;
        let parsed: std::result::Result<T, String> = serde_json::from_str::<T>(&line)
            .map_err(|e| e.to_string())
            .and_then(|rec| validate(&rec).map(|_| rec));
        match parsed {
            Ok(rec) => records.push(rec),
            Err(message) => {
                if strict {
                    return Err(Error::Parse {
                        line: idx + 1,
                        message,
                    });
                }
                skipped += 1;
            }
        }
    }
    Ok(ParseOutcome {
        records,
        skipped,
        lines,
    })
}

/// Parse an interaction-event log. Records are returned in input order.
pub fn parse_events(reader: impl BufRead, strict: bool) -> Result<ParseOutcome<InteractionEvent>> {
    parse_lines(reader, strict, validate_event)
}

/// Parse a push-impression log. Records are returned in input order.
pub fn parse_impressions(
    reader: impl BufRead,
    strict: bool,
) -> Result<ParseOutcome<PushImpression>> {
    parse_lines(reader, strict, validate_impression)
}

/// Keep exactly the records with `start <= timestamp < end`, preserving order.
pub fn filter_window<T: Timestamped + Clone>(records: &[T], start: i64, end: i64) -> Result<Vec<T>> {
    if start > end {
        return Err(Error::invalid(format!(
            "window start {start} is after end {end}"
        )));
    }
    Ok(records
        .iter()
        .filter(|r| r.timestamp() >= start && r.timestamp() < end)
        .cloned()
        .collect())
}
