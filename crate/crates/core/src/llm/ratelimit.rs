use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Client-side token bucket: `per_minute` requests on average, bursts of
/// up to `burst`.
#[derive(Debug)]
pub struct TokenBucket {
    per_second: f64,
    burst: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(per_minute: u32, burst: u32) -> Self {
        let burst = f64::from(burst.max(1));
        Self {
            per_second: f64::from(per_minute.max(1)) / 60.0,
            burst,
            state: Mutex::new((burst, Instant::now())),
        }
    }

    /// Take a token at time `now`, or report how long to wait for one.
    pub fn try_acquire_at(&self, now: Instant) -> Result<(), Duration> {
        let mut st = self.state.lock().unwrap();
        let elapsed = now.saturating_duration_since(st.1).as_secs_f64();
        st.0 = (st.0 + elapsed * self.per_second).min(self.burst);
        st.1 = st.1.max(now);
        if st.0 >= 1.0 {
            st.0 -= 1.0;
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - st.0) / self.per_second))
        }
    }

    /// Block until a token is available.
    pub fn acquire(&self) {
        while let Err(wait) = self.try_acquire_at(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn burst_then_refill() {
        let bucket = TokenBucket::new(60, 3);
        let t0 = Instant::now();
        for _ in 0..3 {
            assert!(bucket.try_acquire_at(t0).is_ok());
        }
        let wait = bucket.try_acquire_at(t0).unwrap_err();
        assert!(wait <= Duration::from_secs(1) && wait > Duration::from_millis(900));
        assert!(bucket.try_acquire_at(t0 + Duration::from_millis(1010)).is_ok());
        assert!(bucket.try_acquire_at(t0 + Duration::from_millis(1020)).is_err());
        // a long idle period refills only up to the burst size
        let later = t0 + Duration::from_secs(100);
        for _ in 0..3 {
            assert!(bucket.try_acquire_at(later).is_ok());
        }
        assert!(bucket.try_acquire_at(later).is_err());
    }
}
