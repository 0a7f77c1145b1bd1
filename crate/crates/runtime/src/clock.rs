use std::time::{Duration, SystemTime, UNIX_EPOCH};

use tokio::time::Instant;

/// Wall-clock milliseconds derived from a monotonic origin.
///
/// Built on `tokio::time::Instant`, so under a paused tokio runtime the
/// clock is fully virtual and deterministic; in normal operation it never
/// steps backwards even if the system clock does.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    base_ms: i64,
    origin: Instant,
}

impl Clock {
    /// Anchored at the current system time.
    pub fn system() -> Self {
        let base_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0);
        Self::starting_at(base_ms)
    }

    /// Anchored at a fixed epoch value, for reproducible runs.
    pub fn starting_at(base_ms: i64) -> Self {
        Self {
            base_ms,
            origin: Instant::now(),
        }
    }

    pub fn now_ms(&self) -> i64 {
        self.base_ms + self.origin.elapsed().as_millis() as i64
    }

    pub fn instant(&self) -> Instant {
        Instant::now()
    }

    /// Monotonic instant corresponding to wall time `ms`.
    pub fn instant_at(&self, ms: i64) -> Instant {
        let offset = ms - self.base_ms;
        if offset <= 0 {
            self.origin
        } else {
            self.origin + Duration::from_millis(offset as u64)
        }
    }

    pub async fn sleep_until_ms(&self, ms: i64) {
        tokio::time::sleep_until(self.instant_at(ms)).await;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test(start_paused = true)]
    async fn virtual_clock_advances_exactly() {
        let c = Clock::starting_at(1_000_000);
        assert_eq!(c.now_ms(), 1_000_000);
        c.sleep_until_ms(1_002_500).await;
        assert_eq!(c.now_ms(), 1_002_500);
        tokio::time::sleep(Duration::from_millis(10)).await;
        assert_eq!(c.now_ms(), 1_002_510);
        // past targets return immediately
        c.sleep_until_ms(0).await;
        assert_eq!(c.now_ms(), 1_002_510);
    }
}
