//! Output log comparison.

use serde::Serialize;

use crate::event::{decode_log, Event, EventKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LogDiff {
    Equal {
        events: usize,
    },
    Diverged {
        /// Index of the first event that differs.
        index: usize,
        expected: Option<String>,
        actual: Option<String>,
    },
}

impl LogDiff {
    pub fn is_equal(&self) -> bool {
        matches!(self, LogDiff::Equal { .. })
    }
}

pub fn describe(event: &Event) -> String {
    let kind = match event.kind {
        EventKind::Data => "data",
        EventKind::Watermark => "watermark",
    };
    format!(
        "{} ts={} {} key={} payload={}",
        event.source,
        event.ts,
        kind,
        hex::encode(&event.key),
        hex::encode(&event.payload)
    )
}

pub fn diff_logs(expected: &[Event], actual: &[Event]) -> LogDiff {
    let index = expected
        .iter()
        .zip(actual)
        .position(|(a, b)| a != b)
        .or_else(|| (expected.len() != actual.len()).then(|| expected.len().min(actual.len())));
    match index {
        None => LogDiff::Equal {
            events: expected.len(),
        },
        Some(index) => LogDiff::Diverged {
            index,
            expected: expected.get(index).map(describe),
            actual: actual.get(index).map(describe),
        },
    }
}

/// Byte comparison of two encoded logs, located at event granularity when
/// both decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileDiff {
    Equal {
        bytes: usize,
    },
    Diverged {
        offset: usize,
        event: Option<LogDiff>,
    },
}

impl std::fmt::Display for FileDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FileDiff::Equal { .. } => write!(f, "equal"),
            FileDiff::Diverged { offset, event } => {
                write!(f, "differ at byte {offset}")?;
                if let Some(LogDiff::Diverged {
                    index,
                    expected,
                    actual,
                }) = event
                {
                    write!(f, ", event #{index}")?;
                    write!(
                        f,
                        "\n  left:  {}",
                        expected.as_deref().unwrap_or("<end of log>")
                    )?;
                    write!(
                        f,
                        "\n  right: {}",
                        actual.as_deref().unwrap_or("<end of log>")
                    )?;
                }
                Ok(())
            }
        }
    }
}

pub fn diff_files(left: &[u8], right: &[u8]) -> FileDiff {
    let offset = left
        .iter()
        .zip(right)
        .position(|(a, b)| a != b)
        .or_else(|| (left.len() != right.len()).then(|| left.len().min(right.len())));
    match offset {
        None => FileDiff::Equal { bytes: left.len() },
        Some(offset) => {
            let event = match (decode_log(left), decode_log(right)) {
                (Ok(a), Ok(b)) => Some(diff_logs(&a, &b)),
                _ => None,
            };
            FileDiff::Diverged { offset, event }
        }
    }
}
