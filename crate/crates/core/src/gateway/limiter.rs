use std::time::{Duration, Instant};

use tokio::sync::Mutex;

#[derive(Debug, Clone, PartialEq)]
pub struct RateLimit {
    pub requests_per_second: f64,
    pub burst: u32,
}

impl Default for RateLimit {
    fn default() -> Self {
        Self {
            requests_per_second: 5.0,
            burst: 8,
        }
    }
}

#[derive(Debug)]
struct State {
    tokens: f64,
    refilled: Instant,
}

/// Token bucket shared by all callers of one gateway.
#[derive(Debug)]
pub struct TokenBucket {
    limit: RateLimit,
    state: Mutex<State>,
}

impl TokenBucket {
    pub fn new(limit: RateLimit) -> Self {
        let tokens = limit.burst.max(1) as f64;
        Self {
            limit,
            state: Mutex::new(State {
                tokens,
                refilled: Instant::now(),
            }),
        }
    }

    /// Wait until a token is available and take it.
    pub async fn acquire(&self) {
        let capacity = self.limit.burst.max(1) as f64;
        let rate = self.limit.requests_per_second.max(f64::MIN_POSITIVE);
        loop {
            let wait = {
                let mut s = self.state.lock().await;
                let now = Instant::now();
                let elapsed = now.duration_since(s.refilled).as_secs_f64();
                s.tokens = (s.tokens + elapsed * rate).min(capacity);
                s.refilled = now;
                if s.tokens >= 1.0 {
                    s.tokens -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - s.tokens) / rate)
            };
            tokio::time::sleep(wait).await;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn burst_then_throttle() {
        let bucket = TokenBucket::new(RateLimit {
            requests_per_second: 50.0,
            burst: 3,
        });
        let start = Instant::now();
        for _ in 0..3 {
            bucket.acquire().await;
        }
        assert!(start.elapsed() < Duration::from_millis(15));
        bucket.acquire().await;
        bucket.acquire().await;
        // two extra tokens at 50/s need ~40 ms
        assert!(
            start.elapsed() >= Duration::from_millis(30),
            "{:?}",
            start.elapsed()
        );
    }
}
