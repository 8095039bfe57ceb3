use std::fmt;
use std::sync::OnceLock;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Microseconds on the process-wide hybrid clock.
///
/// Wall time is sampled once per process; every later reading adds the
/// monotonic offset since then, so readings never go backwards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

struct Anchor {
    instant: Instant,
    wall_micros: u64,
}

fn anchor() -> &'static Anchor {
    static ANCHOR: OnceLock<Anchor> = OnceLock::new();
    ANCHOR.get_or_init(|| Anchor {
        instant: Instant::now(),
        wall_micros: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_micros() as u64)
            .unwrap_or(0),
    })
}

impl Timestamp {
    pub fn now() -> Timestamp {
        let a = anchor();
        Timestamp(a.wall_micros + a.instant.elapsed().as_micros() as u64)
    }

    /// Converts a monotonic instant taken in this process onto the clock.
    pub fn from_instant(at: Instant) -> Timestamp {
        let a = anchor();
        let offset = at.saturating_duration_since(a.instant);
        Timestamp(a.wall_micros + offset.as_micros() as u64)
    }

    pub fn micros(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, earlier: Timestamp) -> Duration {
        Duration::from_micros(self.0.saturating_sub(earlier.0))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_million_reads_never_decrease() {
        let mut last = Timestamp::now();
        for _ in 0..1_000_000 {
            let next = Timestamp::now();
            assert!(next >= last);
            last = next;
        }
    }

    #[test]
    fn instants_map_onto_the_same_clock() {
        let before = Timestamp::now();
        let at = Instant::now();
        let after = Timestamp::now();
        let mapped = Timestamp::from_instant(at);
        assert!(mapped >= before && mapped <= after);
    }
}
