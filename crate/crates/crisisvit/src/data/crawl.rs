//! URL crawler for the image manifest. Online corpora decay as content is
//! deleted, so every run records which fraction of the manifest is still
//! retrievable. Fetched bytes land in a content-addressed store and the
//! entry is stamped with the digest, which makes re-runs idempotent:
//! already-fetched entries are never requested again.

use std::collections::HashMap;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::manifest::{DatasetManifestEntry, RetrievalStatus};
use crate::error::{Error, Result};
use crate::images::ImageStoreDir;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrawlPolicy {
    pub concurrency: usize,
    pub retries: u32,
    pub timeout_ms: u64,
    /// Minimum spacing between requests to the same host, in milliseconds.
    /// Zero disables rate limiting.
    pub per_host_interval_ms: u64,
}

impl Default for CrawlPolicy {
    fn default() -> Self {
        CrawlPolicy {
            concurrency: 8,
            retries: 1,
            timeout_ms: 10_000,
            per_host_interval_ms: 0,
        }
    }
}

impl CrawlPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            return Err(Error::config("concurrency", "must be at least 1"));
        }
        Ok(())
    }

    /// Deterministic-execution mode forces a single worker so fetch order
    /// (and therefore failure ordering in the report) is reproducible.
    pub fn effective_concurrency(&self, deterministic: bool) -> usize {
        if deterministic {
            1
        } else {
            self.concurrency
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrawlFailure {
    pub entry_id: String,
    pub reason: String,
}

/// Retrieval accounting for one crawl pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayReport {
    pub total_entries: usize,
    pub already_fetched: usize,
    pub fetched_now: usize,
    pub failed: usize,
    pub requests_issued: usize,
    pub failures: Vec<CrawlFailure>,
}

impl DecayReport {
    /// Fraction of the manifest that is retrievable after this pass.
    pub fn retrieval_fraction(&self) -> f64 {
        if self.total_entries == 0 {
            0.0
        } else {
            (self.already_fetched + self.fetched_now) as f64 / self.total_entries as f64
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("retrieval decay report\n");
        out.push_str(&format!("  total entries:    {}\n", self.total_entries));
        out.push_str(&format!("  already fetched:  {}\n", self.already_fetched));
        out.push_str(&format!("  fetched this run: {}\n", self.fetched_now));
        out.push_str(&format!("  failed:           {}\n", self.failed));
        out.push_str(&format!("  requests issued:  {}\n", self.requests_issued));
        out.push_str(&format!(
            "  retrieval fraction: {:.4}\n",
            self.retrieval_fraction()
        ));
        for f in &self.failures {
            out.push_str(&format!("  failure {}: {}\n", f.entry_id, f.reason));
        }
        out
    }
}

fn host_of(url: &str) -> String {
    url.split("//")
        .nth(1)
        .unwrap_or(url)
        .split('/')
        .next()
        .unwrap_or("")
        .to_string()
}

struct RateLimiter {
    interval: Duration,
    last: Mutex<HashMap<String, Instant>>,
}

impl RateLimiter {
    fn new(interval_ms: u64) -> Self {
        RateLimiter {
            interval: Duration::from_millis(interval_ms),
            last: Mutex::new(HashMap::new()),
        }
    }

    fn wait_for(&self, host: &str) {
        if self.interval.is_zero() {
            return;
        }
        loop {
            let sleep = {
                let mut guard = self.last.lock().expect("rate limiter lock");
                let now = Instant::now();
                match guard.get(host) {
                    Some(&prev) if now.duration_since(prev) < self.interval => {
                        Some(self.interval - now.duration_since(prev))
                    }
                    _ => {
                        guard.insert(host.to_string(), now);
                        None
                    }
                }
            };
            match sleep {
                Some(d) => std::thread::sleep(d),
                None => return,
            }
        }
    }
}

fn fetch_once(agent: &ureq::Agent, url: &str) -> std::result::Result<Vec<u8>, String> {
    match agent.get(url).call() {
        Ok(mut res) => res
            .body_mut()
            .read_to_vec()
            .map_err(|e| format!("body read failed: {e}")),
        Err(ureq::Error::StatusCode(code)) => Err(format!("http status {code}")),
        Err(e) => Err(format!("request failed: {e}")),
    }
}

/// Fetch every pending or previously failed entry, updating statuses in
/// place and storing bytes in `store`. Network errors are recorded
/// per-entry and never abort the crawl.
pub fn crawl(
    entries: &mut [DatasetManifestEntry],
    policy: &CrawlPolicy,
    store: &ImageStoreDir,
    deterministic: bool,
) -> Result<DecayReport> {
    policy.validate()?;
    let mut already_fetched = 0usize;
    let mut todo: Vec<usize> = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        match e.retrieval_status {
            RetrievalStatus::Fetched => already_fetched += 1,
            RetrievalStatus::Pending | RetrievalStatus::Failed => todo.push(i),
        }
    }

    let workers = policy
        .effective_concurrency(deterministic)
        .min(todo.len().max(1));
    let limiter = Arc::new(RateLimiter::new(policy.per_host_interval_ms));
    let (task_tx, task_rx) = mpsc::channel::<(usize, String, String)>();
    let task_rx = Arc::new(Mutex::new(task_rx));
    let (result_tx, result_rx) = mpsc::channel::<(usize, std::result::Result<Vec<u8>, String>)>();

    let requests_issued = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let task_rx = Arc::clone(&task_rx);
            let result_tx = result_tx.clone();
            let limiter = Arc::clone(&limiter);
            let requests_issued = Arc::clone(&requests_issued);
            let timeout = policy.timeout_ms;
            let retries = policy.retries;
            scope.spawn(move || {
                let agent = ureq::Agent::new_with_config(
                    ureq::Agent::config_builder()
                        .timeout_global(Some(Duration::from_millis(timeout)))
                        .build(),
                );
                loop {
                    let task = {
                        let guard = task_rx.lock().expect("task lock");
                        guard.recv()
                    };
                    let Ok((idx, url, host)) = task else { break };
                    let mut outcome = Err("not attempted".to_string());
                    for attempt in 0..=retries {
                        limiter.wait_for(&host);
                        requests_issued.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        outcome = fetch_once(&agent, &url);
                        if outcome.is_ok() {
                            break;
                        }
                        if attempt < retries {
                            std::thread::sleep(Duration::from_millis(25 * (attempt as u64 + 1)));
                        }
                    }
                    if result_tx.send((idx, outcome)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(result_tx);

        for &i in &todo {
            let url = entries[i].url.clone();
            let host = host_of(&url);
            task_tx.send((i, url, host)).expect("task send");
        }
        drop(task_tx);

        let mut fetched_now = 0usize;
        let mut failures = Vec::new();
        for _ in 0..todo.len() {
            let (idx, outcome) = result_rx.recv().expect("result recv");
            match outcome {
                Ok(bytes) => {
                    let digest = store.put(&bytes)?;
                    entries[idx].retrieval_status = RetrievalStatus::Fetched;
                    entries[idx].content_digest = Some(digest);
                    fetched_now += 1;
                }
                Err(reason) => {
                    entries[idx].retrieval_status = RetrievalStatus::Failed;
                    failures.push(CrawlFailure {
                        entry_id: entries[idx].entry_id.clone(),
                        reason,
                    });
                }
            }
        }
        failures.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
        Ok(DecayReport {
            total_entries: entries.len(),
            already_fetched,
            fetched_now,
            failed: failures.len(),
            requests_issued: requests_issued.load(std::sync::atomic::Ordering::SeqCst),
            failures,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn host_extraction() {
        assert_eq!(host_of("http://example.com/a/b"), "example.com");
        assert_eq!(host_of("https://127.0.0.1:8080/x"), "127.0.0.1:8080");
    }

    #[test]
    fn empty_manifest_reports_zero() {
        let store_dir = tempfile::tempdir().unwrap();
        let store = ImageStoreDir::open(store_dir.path()).unwrap();
        let mut entries: Vec<DatasetManifestEntry> = Vec::new();
        let report = crawl(&mut entries, &CrawlPolicy::default(), &store, false).unwrap();
        assert_eq!(report.total_entries, 0);
        assert_eq!(report.retrieval_fraction(), 0.0);
        assert_eq!(report.requests_issued, 0);
    }
}
