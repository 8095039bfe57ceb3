//! Open and closed workload generators.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use enoki_core::{EnokiError, Result};
use tokio::time::Instant;

/// Number of requests an open workload issues.
pub fn open_request_count(rate_per_s: f64, duration: Duration) -> u64 {
    (rate_per_s * duration.as_secs_f64()).round() as u64
}

/// Fires request `i` at `start + i / rate`, regardless of how earlier
/// requests are doing, and waits for every request to finish. The
/// synchronous part of `request` runs at the scheduled fire time.
pub async fn run_open_workload<T, F, Fut>(rate_per_s: f64, duration: Duration, request: F) -> Result<Vec<T>>
where
    T: Send + 'static,
    F: Fn(u64) -> Fut,
    Fut: Future<Output = Vec<T>> + Send + 'static,
{
    if !(rate_per_s > 0.0) {
        return Err(EnokiError::bad_request("open workload needs a positive rate"));
    }
    let count = open_request_count(rate_per_s, duration);
    let start = Instant::now();
    let mut inflight = Vec::with_capacity(count as usize);
    for i in 0..count {
        tokio::time::sleep_until(start + Duration::from_secs_f64(i as f64 / rate_per_s)).await;
        inflight.push(tokio::spawn(request(i)));
    }
    let mut samples = Vec::new();
    for task in inflight {
        samples.extend(task.await.map_err(|e| EnokiError::internal(format!("request task failed: {e}")))?);
    }
    Ok(samples)
}

/// `threads` workers loop request after request with no think time until
/// `duration` is over. A request still running at the deadline completes
/// and is recorded. The closure gets the worker index and the iteration.
pub async fn run_closed_workload<T, F, Fut>(threads: usize, duration: Duration, request: F) -> Result<Vec<T>>
where
    T: Send + 'static,
    F: Fn(usize, u64) -> Fut + Send + Sync + 'static,
    Fut: Future<Output = Vec<T>> + Send + 'static,
{
    if threads == 0 {
        return Err(EnokiError::bad_request("closed workload needs at least one thread"));
    }
    let request = Arc::new(request);
    let deadline = Instant::now() + duration;
    let workers: Vec<_> = (0..threads)
        .map(|w| {
            let request = request.clone();
            tokio::spawn(async move {
                let mut samples = Vec::new();
                let mut i = 0;
                while Instant::now() < deadline {
                    samples.extend(request(w, i).await);
                    i += 1;
                }
                samples
            })
        })
        .collect();
    let mut samples = Vec::new();
    for w in workers {
        samples.extend(w.await.map_err(|e| EnokiError::internal(format!("worker failed: {e}")))?);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    use enoki_core::Timestamp;

    use super::*;
    use crate::metrics::MetricSample;

    fn sample(ok: bool) -> MetricSample {
        let now = Timestamp::now();
        MetricSample::new("t", "v", "op", now, now, ok)
    }

    #[test]
    fn request_counts() {
        assert_eq!(open_request_count(10.0, Duration::from_secs(300)), 3000);
        assert_eq!(open_request_count(5.0, Duration::from_secs(600)), 3000);
        assert_eq!(open_request_count(10.0, Duration::from_millis(250)), 3);
    }

    #[tokio::test]
    async fn open_workload_keeps_its_schedule() {
        let start = Instant::now();
        let fired = Arc::new(Mutex::new(Vec::new()));
        let f = fired.clone();
        let samples = run_open_workload(100.0, Duration::from_secs(1), move |i| {
            f.lock().unwrap().push((i, start.elapsed()));
            async move {
                // Slow and failing requests do not hold the schedule back.
                tokio::time::sleep(Duration::from_millis(50)).await;
                vec![sample(false)]
            }
        })
        .await
        .unwrap();
        assert_eq!(samples.len(), 100);
        assert!(samples.iter().all(|s| !s.ok));
        for (i, at) in fired.lock().unwrap().iter() {
            let due = Duration::from_millis(10 * i);
            assert!(at.abs_diff(due) <= Duration::from_millis(5), "request {i} fired at {at:?}, due {due:?}");
        }
    }

    #[tokio::test]
    async fn open_workload_rejects_zero_rate() {
        let err = run_open_workload(0.0, Duration::from_secs(1), |_| async { Vec::<()>::new() }).await;
        assert!(err.is_err());
    }

    #[tokio::test]
    async fn closed_workload_bounds_concurrency() {
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (a, p) = (active.clone(), peak.clone());
        let samples = run_closed_workload(4, Duration::from_millis(200), move |_, _| {
            let (a, p) = (a.clone(), p.clone());
            async move {
                let now = a.fetch_add(1, Ordering::SeqCst) + 1;
                p.fetch_max(now, Ordering::SeqCst);
                tokio::time::sleep(Duration::from_millis(10)).await;
                a.fetch_sub(1, Ordering::SeqCst);
                vec![sample(true)]
            }
        })
        .await
        .unwrap();
        assert_eq!(peak.load(Ordering::SeqCst), 4);
        // 4 workers at ~10 ms per request for 200 ms.
        assert!((60..=84).contains(&samples.len()), "{}", samples.len());
    }

    #[tokio::test]
    async fn closed_workload_finishes_inflight_requests() {
        let t = Instant::now();
        let samples = run_closed_workload(1, Duration::from_millis(10), |_, _| async {
            tokio::time::sleep(Duration::from_millis(100)).await;
            vec![sample(true)]
        })
        .await
        .unwrap();
        assert_eq!(samples.len(), 1);
        assert!(t.elapsed() >= Duration::from_millis(100));
    }
}
