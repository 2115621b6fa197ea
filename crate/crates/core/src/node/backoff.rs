//! Jittered exponential backoff for reconnect loops.

use std::time::Duration;

use crate::sources::UniformRng;

pub const BACKOFF_BASE: Duration = Duration::from_millis(250);
pub const BACKOFF_CAP: Duration = Duration::from_secs(8);
pub const BACKOFF_JITTER: f64 = 0.2;

/// Delays double from 250 ms up to 8 s, each scaled by a factor drawn
/// uniformly from [0.8, 1.2]. Retries never run out.
#[derive(Debug)]
pub struct Backoff {
    attempt: u32,
    rng: UniformRng,
}

impl Backoff {
    pub fn new(seed: u64) -> Self {
        Backoff {
            attempt: 0,
            rng: UniformRng::new(seed),
        }
    }

    /// Delay before the next retry.
    pub fn next_delay(&mut self) -> Duration {
        let nominal = BACKOFF_BASE
            .saturating_mul(1u32 << self.attempt.min(16))
            .min(BACKOFF_CAP);
        self.attempt = self.attempt.saturating_add(1);
        nominal.mul_f64(self.rng.range(1.0 - BACKOFF_JITTER, 1.0 + BACKOFF_JITTER))
    }

    pub fn reset(&mut self) {
        self.attempt = 0;
    }

    pub fn attempts(&self) -> u32 {
        self.attempt
    }
}

/// Stable seed for a backoff owned by `name`.
pub fn seed_for(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
