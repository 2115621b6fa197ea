//! Token bucket used for the constrained-server profile.

use std::sync::Arc;
use std::time::Duration;

use tokio::sync::Semaphore;
use tokio::task::JoinHandle;

const REFILL_EVERY: Duration = Duration::from_millis(10);

/// Hands out `rate` tokens per second. Waiters are served in arrival order.
#[derive(Debug)]
pub struct Throttle {
    tokens: Arc<Semaphore>,
    refill: JoinHandle<()>,
}

impl Throttle {
    pub fn new(rate_per_s: f64) -> Self {
        let burst = (rate_per_s / 10.0).ceil().max(1.0) as usize;
        let tokens = Arc::new(Semaphore::new(0));
        let bucket = tokens.clone();
        let refill = tokio::spawn(async move {
            let mut tick = tokio::time::interval(REFILL_EVERY);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            let per_tick = rate_per_s * REFILL_EVERY.as_secs_f64();
            let mut credit = 0.0;
            loop {
                tick.tick().await;
                credit += per_tick;
                let whole = credit.floor();
                credit -= whole;
                let room = burst.saturating_sub(bucket.available_permits());
                let add = (whole as usize).min(room);
                if add > 0 {
                    bucket.add_permits(add);
                }
            }
        });
        Throttle { tokens, refill }
    }

    /// Waits for a token.
    pub async fn acquire(&self) {
        if let Ok(p) = self.tokens.acquire().await {
            p.forget();
        }
    }

    /// Takes a token if one is available right now.
    pub fn try_acquire(&self) -> bool {
        match self.tokens.try_acquire() {
            Ok(p) => {
                p.forget();
                true
            }
            Err(_) => false,
        }
    }
}

impl Drop for Throttle {
    fn drop(&mut self) {
        self.refill.abort();
    }
}
