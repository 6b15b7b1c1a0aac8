//! Single choke point for every model call.
//!
//! The [`Gateway`] owns a [`Backend`], a retry policy, a global in-flight
//! limiter and an optional token-bucket rate limiter. Typed wrappers expose the
//! four downstream tasks; every payload is validated against its task schema
//! before it reaches a caller.

mod limiter;
pub mod mock;
pub mod prompts;
pub mod remote;
pub mod task;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::Rng;
use serde_json::Value;
use thiserror::Error;
use tokio::sync::Semaphore;

pub use limiter::{RateLimit, TokenBucket};
pub use mock::MockBackend;
pub use remote::{RemoteBackend, RemoteConfig};
pub use task::{RuleDivisionPolicy, SrVerdict, SubCondition, TaskKind};

use task::{
    CscInput, CscOutput, CtmInput, CtmOutput, SegmentInput, SegmentOutput, SsrInput, SsrOutput,
};

/// Failure reported by a backend for a single attempt.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("malformed response: {0}")]
    Malformed(String),
    /// Not worth retrying (bad credentials, rejected request).
    #[error("{0}")]
    Fatal(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{task} failed after {attempts} attempt(s): {last}")]
    Exhausted {
        task: TaskKind,
        attempts: u32,
        last: String,
    },
    #[error("{task} failed: {cause}")]
    Fatal { task: TaskKind, cause: String },
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Remote backends are subject to the in-flight and rate limiters.
    fn is_remote(&self) -> bool {
        false
    }

    async fn complete(&self, kind: TaskKind, payload: &Value) -> Result<Value, BackendError>;
}

#[derive(Debug, Clone)]
pub struct GatewayRequest {
    pub task_kind: TaskKind,
    pub payload: Value,
    pub attempt_budget: u32,
    pub timeout: Duration,
}

#[derive(Debug, Clone)]
pub struct GatewayResponse {
    pub payload: Value,
    pub backend_id: String,
    pub latency: Duration,
    pub attempts: u32,
}

/// Exponential backoff with symmetric multiplicative jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub jitter: f64,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_millis(500),
            factor: 2.0,
            jitter: 0.2,
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based), without jitter.
    pub fn nominal_delay(&self, retry: u32) -> Duration {
        let exp = self.factor.powi(retry.saturating_sub(1) as i32);
        self.base_delay.mul_f64(exp).min(self.max_delay)
    }

    pub fn delay(&self, retry: u32) -> Duration {
        let nominal = self.nominal_delay(retry);
        if self.jitter <= 0.0 {
            return nominal;
        }
        let scale = rand::thread_rng().gen_range(1.0 - self.jitter..=1.0 + self.jitter);
        nominal.mul_f64(scale)
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub attempt_budget: u32,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub rate_limit: Option<RateLimit>,
    /// Let SSR report fulfillment as a fraction instead of 0/1.
    pub continuous_sp: bool,
    pub division_policy: RuleDivisionPolicy,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            attempt_budget: 3,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            rate_limit: Some(RateLimit::default()),
            continuous_sp: false,
            division_policy: RuleDivisionPolicy::default(),
        }
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    config: GatewayConfig,
    in_flight: Arc<Semaphore>,
    bucket: Option<TokenBucket>,
    attempts: AtomicU64,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("config", &self.config)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, config: GatewayConfig) -> Self {
        let permits = config.max_in_flight.max(1);
        let bucket = config.rate_limit.clone().map(TokenBucket::new);
        Self {
            backend,
            config,
            in_flight: Arc::new(Semaphore::new(permits)),
            bucket,
            attempts: AtomicU64::new(0),
        }
    }

    /// Gateway over the deterministic mock backend.
    pub fn mock() -> Self {
        Self::new(Arc::new(MockBackend::new()), GatewayConfig::default())
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Total backend attempts made through this gateway.
    pub fn attempts_made(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    fn request(&self, task_kind: TaskKind, payload: Value) -> GatewayRequest {
        GatewayRequest {
            task_kind,
            payload,
            attempt_budget: self.config.attempt_budget,
            timeout: self.config.timeout,
        }
    }

    async fn attempt(&self, request: &GatewayRequest) -> Result<Value, BackendError> {
        let _permit = if self.backend.is_remote() {
            if let Some(bucket) = &self.bucket {
                bucket.acquire().await;
            }
            Some(
                self.in_flight
                    .acquire()
                    .await
                    .expect("semaphore is never closed"),
            )
        } else {
            None
        };
        self.attempts.fetch_add(1, Ordering::Relaxed);
        match tokio::time::timeout(
            request.timeout,
            self.backend.complete(request.task_kind, &request.payload),
        )
        .await
        {
            Ok(result) => result,
            Err(_) => Err(BackendError::Transport(format!(
                "attempt timed out after {:?}",
                request.timeout
            ))),
        }
    }

    /// Send a request, retrying transport errors, rate limits and
    /// schema-invalid outputs until the attempt budget is spent.
    pub async fn call_backend(
        &self,
        request: GatewayRequest,
    ) -> Result<GatewayResponse, GatewayError> {
        let kind = request.task_kind;
        if request.attempt_budget == 0 {
            return Err(GatewayError::Precondition(
                "attempt_budget must be at least 1".into(),
            ));
        }
        let started = Instant::now();
        let mut last = String::new();
        for attempt in 1..=request.attempt_budget {
            let mut floor = Duration::ZERO;
            match self.attempt(&request).await {
                Ok(raw) => match task::validate_output(kind, &request.payload, &raw) {
                    Ok(payload) => {
                        return Ok(GatewayResponse {
                            payload,
                            backend_id: self.backend.id().to_string(),
                            latency: started.elapsed(),
                            attempts: attempt,
                        })
                    }
                    Err(e) => last = e,
                },
                Err(BackendError::Fatal(cause)) => {
                    return Err(GatewayError::Fatal { task: kind, cause })
                }
                Err(BackendError::RateLimited { retry_after }) => {
                    last = "rate limited".into();
                    floor = retry_after.unwrap_or_default();
                }
                Err(e) => last = e.to_string(),
            }
            tracing::warn!(task = %kind, attempt, cause = %last, "backend attempt failed");
            if attempt < request.attempt_budget {
                tokio::time::sleep(self.config.retry.delay(attempt).max(floor)).await;
            }
        }
        Err(GatewayError::Exhausted {
            task: kind,
            attempts: request.attempt_budget,
            last,
        })
    }

    async fn run<I: serde::Serialize, O: serde::de::DeserializeOwned>(
        &self,
        kind: TaskKind,
        input: &I,
    ) -> Result<O, GatewayError> {
        let payload = serde_json::to_value(input).expect("task inputs serialize");
        let response = self.call_backend(self.request(kind, payload)).await?;
        // already validated, so decoding cannot fail
        Ok(serde_json::from_value(response.payload).expect("validated payload decodes"))
    }

    /// Split a rule into simpler rules. A single-element result means the rule is atomic.
    pub async fn ctm(&self, criteria: &str) -> Result<Vec<String>, GatewayError> {
        if criteria.trim().is_empty() {
            return Err(GatewayError::Precondition("CTM criteria is empty".into()));
        }
        let input = CtmInput {
            criteria: criteria.to_string(),
            policy: self.config.division_policy.criteria.clone(),
        };
        let out: CtmOutput = self.run(TaskKind::Ctm, &input).await?;
        Ok(out.rules)
    }

    /// Distribute parent sub-conditions over child rules; one list per child.
    pub async fn csc(
        &self,
        child_rules: &[String],
        parent_subconditions: &[SubCondition],
    ) -> Result<Vec<Vec<SubCondition>>, GatewayError> {
        if child_rules.is_empty() {
            return Err(GatewayError::Precondition(
                "CSC needs at least one child rule".into(),
            ));
        }
        if parent_subconditions.is_empty() {
            return Ok(vec![Vec::new(); child_rules.len()]);
        }
        if child_rules.len() == 1 {
            return Ok(vec![parent_subconditions.to_vec()]);
        }
        let input = CscInput {
            child_rules: child_rules.to_vec(),
            parent_subconditions: parent_subconditions.to_vec(),
        };
        let out: CscOutput = self.run(TaskKind::Csc, &input).await?;
        Ok(out.assignments)
    }

    /// Classify whether an answer segment fulfills a simplified rule.
    pub async fn ssr(
        &self,
        answer_segment: &str,
        criteria: &str,
        subconditions: &[SubCondition],
    ) -> Result<SrVerdict, GatewayError> {
        if criteria.trim().is_empty() {
            return Err(GatewayError::Precondition("SSR criteria is empty".into()));
        }
        let input = SsrInput {
            answer_segment: answer_segment.to_string(),
            criteria: criteria.to_string(),
            subconditions: subconditions.to_vec(),
            continuous: self.config.continuous_sp,
        };
        let out: SsrOutput = self.run(TaskKind::Ssr, &input).await?;
        Ok(out.into())
    }

    /// The part of `answer` relevant to a rubric row.
    pub async fn segment_answer(
        &self,
        answer: &str,
        row_rule: &str,
    ) -> Result<String, GatewayError> {
        if answer.trim().is_empty() {
            return Ok(String::new());
        }
        let input = SegmentInput {
            answer: answer.to_string(),
            row_rule: row_rule.to_string(),
        };
        let out: SegmentOutput = self.run(TaskKind::Segment, &input).await?;
        Ok(out.segment)
    }
}
