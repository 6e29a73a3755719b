//! Run statistics and the JSON-lines rule trace consumed by the auditor.

use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct RunStats {
    pub reductions: u64,
    pub splits: u64,
    pub promotions: u64,
    pub and_compressions: u64,
    pub suspensions: u64,
    pub wakes: u64,
    pub pruned_boxes: u64,
    pub reclaimed_boxes: u64,
    pub answers: u64,
    #[serde(default)]
    pub wall_ms: u64,
}

/// One rule application. `detail` is rule-specific; the fields present are
/// the ones the trace auditor replays against its shadow configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u64,
    pub rule: String,
    /// Focus and-box (or 0 for global steps like select_work).
    pub box_id: u64,
    pub detail: serde_json::Value,
    pub stats: RunStats,
}

pub struct TraceSink {
    out: Option<Box<dyn Write>>,
    /// When true, per-instruction events are also emitted.
    pub instr_level: bool,
    pub events_kept: Option<Vec<TraceEvent>>,
}

impl TraceSink {
    pub fn disabled() -> Self {
        TraceSink {
            out: None,
            instr_level: false,
            events_kept: None,
        }
    }

    pub fn to_writer(w: Box<dyn Write>, instr_level: bool) -> Self {
        TraceSink {
            out: Some(w),
            instr_level,
            events_kept: None,
        }
    }

    /// Keeps events in memory (used by tests and the in-process auditor).
    pub fn in_memory() -> Self {
        TraceSink {
            out: None,
            instr_level: false,
            events_kept: Some(Vec::new()),
        }
    }

    pub fn enabled(&self) -> bool {
        self.out.is_some() || self.events_kept.is_some()
    }

    pub fn emit(&mut self, ev: TraceEvent) {
        if let Some(w) = self.out.as_mut() {
            let line = serde_json::to_string(&ev).expect("trace serialization");
            let _ = writeln!(w, "{}", line);
        }
        if let Some(kept) = self.events_kept.as_mut() {
            kept.push(ev);
        }
    }
}
