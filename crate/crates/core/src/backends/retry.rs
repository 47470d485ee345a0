//! Exponential-backoff retry and the global in-flight cap.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use super::BackendError;

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub backoff_factor: f64,
    pub max_concurrent: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
            backoff_factor: 2.0,
            max_concurrent: 8,
        }
    }
}

impl RetryPolicy {
    pub fn new(
        max_attempts: u32,
        base_delay: Duration,
        backoff_factor: f64,
        max_concurrent: usize,
    ) -> Result<Self, BackendError> {
        let policy = Self {
            max_attempts,
            base_delay,
            backoff_factor,
            max_concurrent,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_attempts < 1 {
            return Err(BackendError::Config("max_attempts must be >= 1".into()));
        }
        if !(self.backoff_factor >= 1.0) {
            return Err(BackendError::Config("backoff_factor must be >= 1".into()));
        }
        if self.max_concurrent < 1 {
            return Err(BackendError::Config("max_concurrent must be >= 1".into()));
        }
        Ok(())
    }

    /// Wait inserted after failed attempt `attempt` (1-based):
    /// `base_delay * factor^(attempt-1)`.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1) as i32;
        self.base_delay.mul_f64(self.backoff_factor.powi(exp))
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested waits without sleeping.
#[derive(Debug, Default)]
pub struct RecordingSleeper {
    waits: Mutex<Vec<Duration>>,
}

impl RecordingSleeper {
    pub fn waits(&self) -> Vec<Duration> {
        self.waits.lock().expect("sleeper lock").clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.waits.lock().expect("sleeper lock").push(d);
    }
}

/// Runs `op` until it succeeds, fails with a non-retryable error, or the
/// policy's attempts are used up. `op` receives the 1-based attempt number.
pub fn with_retry<T, F>(policy: &RetryPolicy, sleeper: &dyn Sleeper, mut op: F) -> Result<T, BackendError>
where
    F: FnMut(u32) -> Result<T, BackendError>,
{
    let mut attempt = 1;
    loop {
        match op(attempt) {
            Ok(v) => return Ok(v),
            Err(err) if !err.is_retryable() => return Err(err),
            Err(err) if attempt >= policy.max_attempts => {
                return Err(BackendError::Exhausted {
                    attempts: attempt,
                    last: Box::new(err),
                })
            }
            Err(err) => {
                let wait = policy.delay_after(attempt);
                log::debug!("attempt {attempt} failed ({err}); retrying in {wait:?}");
                sleeper.sleep(wait);
                attempt += 1;
            }
        }
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
pub struct ConcurrencyLimiter {
    cap: usize,
    state: Mutex<LimiterState>,
    cv: Condvar,
}

#[derive(Debug, Default)]
struct LimiterState {
    in_flight: usize,
    peak: usize,
}

pub struct Permit<'a> {
    limiter: &'a ConcurrencyLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut s = self.limiter.state.lock().expect("limiter lock");
        s.in_flight -= 1;
        self.limiter.cv.notify_one();
    }
}

impl ConcurrencyLimiter {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            state: Mutex::default(),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut s = self.state.lock().expect("limiter lock");
        while s.in_flight >= self.cap {
            s = self.cv.wait(s).expect("limiter lock");
        }
        s.in_flight += 1;
        s.peak = s.peak.max(s.in_flight);
        Permit { limiter: self }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Highest number of simultaneously held permits so far.
    pub fn peak(&self) -> usize {
        self.state.lock().expect("limiter lock").peak
    }
}
