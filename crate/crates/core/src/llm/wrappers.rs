use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Backend, GenRequest, GenResponse, LlmError};
use crate::runtime::Semaphore;
use crate::store::{Appender, Record};

/// Counts calls that reach the inner backend.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(req)
    }
}

/// Kill switch: lets `budget` calls through, then fails every later call
/// with [`LlmError::Aborted`] without touching the inner backend.
pub struct AbortAfter<B> {
    inner: B,
    budget: usize,
    used: AtomicUsize,
    tripped: AtomicBool,
}

impl<B: Backend> AbortAfter<B> {
    pub fn new(inner: B, budget: usize) -> Self {
        Self {
            inner,
            budget,
            used: AtomicUsize::new(0),
            tripped: AtomicBool::new(false),
        }
    }

    pub fn tripped(&self) -> bool {
        self.tripped.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for AbortAfter<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, LlmError> {
        if self.used.fetch_add(1, Ordering::SeqCst) >= self.budget {
            self.tripped.store(true, Ordering::SeqCst);
            return Err(LlmError::Aborted);
        }
        self.inner.generate(req)
    }
}

/// Caps the number of concurrent in-flight requests.
pub struct BoundedBackend<B> {
    inner: B,
    permits: Semaphore,
}

impl<B: Backend> BoundedBackend<B> {
    pub fn new(inner: B, max_inflight: usize) -> Self {
        Self {
            inner,
            permits: Semaphore::new(max_inflight.max(1)),
        }
    }

    pub fn peak_inflight(&self) -> usize {
        self.permits.peak()
    }
}

impl<B: Backend> Backend for BoundedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, LlmError> {
        let _permit = self.permits.acquire();
        self.inner.generate(req)
    }
}

/// A verbatim request/response pair, kept for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub backend_id: String,
    pub request: GenRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<GenResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Record for Exchange {
    const TYPE: &'static str = "exchange";
}

/// Appends every exchange to a log before returning it.
pub struct LoggingBackend<B> {
    inner: B,
    log: Arc<Appender>,
}

impl<B: Backend> LoggingBackend<B> {
    pub fn new(inner: B, log: Arc<Appender>) -> Self {
        Self { inner, log }
    }
}

impl<B: Backend> Backend for LoggingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, LlmError> {
        let result = self.inner.generate(req);
        let exchange = Exchange {
            backend_id: self.inner.id().to_string(),
            request: req.clone(),
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(|e| e.to_string()),
        };
        if let Err(e) = self.log.append(&exchange) {
            tracing::warn!(error = %e, "could not log exchange");
        }
        result
    }
}
