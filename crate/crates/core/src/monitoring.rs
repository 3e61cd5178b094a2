//! In-process span recorder with JSONL export.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use crate::error::{Error, Result};
use crate::messaging::{Command, CommandHandlerDecorator, Next, Payload};

pub const TRACE_ID_HEADER: &str = "x-trace-id";
pub const SPAN_ID_HEADER: &str = "x-span-id";

/// Identifies a span so that children, possibly in another service, can link to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanContext {
    pub trace_id: u64,
    pub span_id: u64,
}

impl SpanContext {
    pub fn inject(&self, headers: &mut HashMap<String, String>) {
        headers.insert(TRACE_ID_HEADER.into(), self.trace_id.to_string());
        headers.insert(SPAN_ID_HEADER.into(), self.span_id.to_string());
    }

    pub fn extract(headers: &HashMap<String, String>) -> Option<Self> {
        Some(SpanContext {
            trace_id: headers.get(TRACE_ID_HEADER)?.parse().ok()?,
            span_id: headers.get(SPAN_ID_HEADER)?.parse().ok()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub trace_id: u64,
    pub span_id: u64,
    pub parent_span_id: Option<u64>,
    pub name: String,
    pub start_ns: u64,
    pub end_ns: u64,
    pub attributes: BTreeMap<String, String>,
}

impl Span {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

#[derive(Default)]
pub struct SpanRecorder {
    origin: OnceLock<Instant>,
    next_id: AtomicU64,
    open: Mutex<HashMap<u64, Span>>,
    finished: Mutex<Vec<Span>>,
}

impl std::fmt::Debug for SpanRecorder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpanRecorder")
            .field("open", &self.open.lock().len())
            .field("finished", &self.finished.lock().len())
            .finish()
    }
}

impl SpanRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    fn now_ns(&self) -> u64 {
        let origin = *self.origin.get_or_init(Instant::now);
        Instant::now().saturating_duration_since(origin).as_nanos() as u64
    }

    fn fresh_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed) + 1
    }

    fn open_span(&self, trace_id: u64, parent: Option<u64>, name: &str) -> SpanContext {
        let span_id = self.fresh_id();
        let start_ns = self.now_ns();
        self.open.lock().insert(
            span_id,
            Span {
                trace_id,
                span_id,
                parent_span_id: parent,
                name: name.to_string(),
                start_ns,
                end_ns: start_ns,
                attributes: BTreeMap::new(),
            },
        );
        SpanContext { trace_id, span_id }
    }

    /// Opens a root span in a new trace.
    pub fn create_root(&self, name: &str) -> SpanContext {
        let trace_id = self.fresh_id();
        self.open_span(trace_id, None, name)
    }

    pub fn start_span(&self, parent: SpanContext, name: &str) -> SpanContext {
        self.open_span(parent.trace_id, Some(parent.span_id), name)
    }

    pub fn set_attribute(&self, span_id: u64, key: &str, value: impl Into<String>) -> Result<()> {
        let mut open = self.open.lock();
        let span = open.get_mut(&span_id).ok_or(Error::UnbalancedSpan(span_id))?;
        span.attributes.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn end_span(&self, span_id: u64) -> Result<()> {
        let end_ns = self.now_ns();
        let mut span = self.open.lock().remove(&span_id).ok_or(Error::UnbalancedSpan(span_id))?;
        span.end_ns = end_ns;
        self.finished.lock().push(span);
        Ok(())
    }

    pub fn finished(&self) -> Vec<Span> {
        self.finished.lock().clone()
    }

    pub fn open_count(&self) -> usize {
        self.open.lock().len()
    }

    /// Removes and returns every finished span.
    pub fn drain(&self) -> Vec<Span> {
        std::mem::take(&mut *self.finished.lock())
    }

    /// Appends every finished span to `path` as JSONL and clears the buffer.
    pub fn flush(&self, path: &Path) -> Result<usize> {
        let mut finished = self.finished.lock();
        let mut file = std::io::BufWriter::new(std::fs::OpenOptions::new().create(true).append(true).open(path)?);
        for span in finished.iter() {
            serde_json::to_writer(&mut file, span)?;
            file.write_all(b"\n")?;
        }
        file.flush()?;
        let n = finished.len();
        finished.clear();
        Ok(n)
    }
}

/// Records a child span for every command that carries a trace context.
pub struct TracingDecorator {
    recorder: Arc<SpanRecorder>,
}

impl TracingDecorator {
    pub fn new(recorder: Arc<SpanRecorder>) -> Self {
        TracingDecorator { recorder }
    }
}

#[async_trait]
impl CommandHandlerDecorator for TracingDecorator {
    async fn handle(&self, cmd: &Command, next: Next<'_>) -> Result<Payload> {
        let Some(parent) = cmd.trace else {
            return next.run(cmd).await;
        };
        let span = self.recorder.start_span(parent, &format!("{}.{}", cmd.target_service, cmd.command_type));
        let out = next.run(cmd).await;
        if let Err(e) = &out {
            let _ = self.recorder.set_attribute(span.span_id, "error", e.name());
        }
        let _ = self.recorder.end_span(span.span_id);
        out
    }
}
