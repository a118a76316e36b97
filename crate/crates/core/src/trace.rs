//! Trace Event Format output (`chrome://tracing`, Perfetto).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub name: String,
    pub cat: String,
    pub ph: String,
    pub ts: f64,
    pub dur: f64,
    pub pid: u32,
    pub tid: u32,
}

/// One `X` event per kernel (tid = lane) and per host dispatch (tid = lane count).
pub fn trace_events(report: &SimReport) -> Vec<TraceEvent> {
    let host_tid = report.lanes as u32;
    let mut out: Vec<TraceEvent> = report
        .events
        .iter()
        .map(|e| TraceEvent {
            name: e.name.clone(),
            cat: e.class.as_str().to_string(),
            ph: "X".into(),
            ts: e.start,
            dur: e.duration,
            pid: 0,
            tid: e.lane as u32,
        })
        .collect();
    out.extend(report.host_events.iter().map(|h| TraceEvent {
        name: h.label.clone(),
        cat: "host".into(),
        ph: "X".into(),
        ts: h.start,
        dur: h.duration,
        pid: 0,
        tid: host_tid,
    }));
    out
}

pub fn to_json(report: &SimReport) -> String {
    serde_json::to_string_pretty(&trace_events(report)).expect("trace events serialize")
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("trace is not a JSON array of events: {0}")]
    Shape(String),
    #[error("event {index}: {reason}")]
    Event { index: usize, reason: String },
}

/// Checks `text` against the subset of the Trace Event Format we emit.
pub fn validate_trace(text: &str) -> Result<usize, TraceError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| TraceError::Shape(e.to_string()))?;
    let arr = value.as_array().ok_or_else(|| TraceError::Shape("top level is not an array".into()))?;
    for (index, ev) in arr.iter().enumerate() {
        let bad = |reason: &str| TraceError::Event { index, reason: reason.to_string() };
        let obj = ev.as_object().ok_or_else(|| bad("not an object"))?;
        for key in ["name", "cat", "ph"] {
            if !obj.get(key).is_some_and(|v| v.is_string()) {
                return Err(bad(&format!("`{key}` missing or not a string")));
            }
        }
        if obj["ph"] != "X" {
            return Err(bad("`ph` must be \"X\""));
        }
        for key in ["ts", "dur"] {
            match obj.get(key).and_then(|v| v.as_f64()) {
                Some(v) if v >= 0.0 && v.is_finite() => {}
                _ => return Err(bad(&format!("`{key}` missing or negative"))),
            }
        }
        for key in ["pid", "tid"] {
            if !obj.get(key).is_some_and(|v| v.is_u64()) {
                return Err(bad(&format!("`{key}` missing or not an unsigned integer")));
            }
        }
    }
    Ok(arr.len())
}
