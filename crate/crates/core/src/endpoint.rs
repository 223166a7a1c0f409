//! Shared plumbing for remote model endpoints: retry policy and env config.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENV_CHAT_URL: &str = "DEMOSEL_CHAT_URL";
pub const ENV_CHAT_KEY: &str = "DEMOSEL_CHAT_API_KEY";
pub const ENV_EMBED_URL: &str = "DEMOSEL_EMBED_URL";
pub const ENV_EMBED_KEY: &str = "DEMOSEL_EMBED_API_KEY";
pub const ENV_CACHE_DIR: &str = "DEMOSEL_CACHE_DIR";

/// Bounded exponential backoff. Only errors flagged retryable are retried.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 200,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        RetryPolicy {
            attempts,
            base_delay_ms: 0,
        }
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let attempts = self.attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    let delay = self.base_delay_ms.saturating_mul(1 << (attempt - 1).min(16));
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                }
                Err(Error::Request { message, .. }) => {
                    return Err(Error::Endpoint {
                        attempts: attempt,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Maps a ureq failure onto a request error, marking transient ones retryable.
pub(crate) fn classify_http_error(err: ureq::Error) -> Error {
    match err {
        ureq::Error::Status(code, resp) => {
            let body = resp.into_string().unwrap_or_default();
            let retryable = code == 429 || code >= 500;
            Error::request(format!("HTTP {code}: {}", body.trim()), retryable)
        }
        ureq::Error::Transport(t) => Error::request(t, true),
    }
}

pub(crate) fn agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(timeout).build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retries_transient_then_succeeds() {
        let calls = Cell::new(0);
        let out = RetryPolicy::immediate(3).run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(Error::request("boom", true))
            } else {
                Ok(7)
            }
        });
        assert_eq!(out.unwrap(), 7);
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn gives_up_after_bound() {
        let calls = Cell::new(0);
        let err = RetryPolicy::immediate(3)
            .run::<()>(|| {
                calls.set(calls.get() + 1);
                Err(Error::request("down", true))
            })
            .unwrap_err();
        assert_eq!(calls.get(), 3);
        assert!(matches!(err, Error::Endpoint { attempts: 3, .. }));
    }

    #[test]
    fn permanent_errors_are_not_retried() {
        let calls = Cell::new(0);
        let err = RetryPolicy::immediate(3)
            .run::<()>(|| {
                calls.set(calls.get() + 1);
                Err(Error::request("HTTP 400", false))
            })
            .unwrap_err();
        assert_eq!(calls.get(), 1);
        assert!(matches!(err, Error::Endpoint { attempts: 1, .. }));
    }
}
