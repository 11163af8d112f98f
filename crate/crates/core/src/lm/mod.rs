//! Completion client over a remote completion endpoint or the deterministic
//! mock backend, with a content-addressed on-disk cache, retries, request
//! pacing and bounded-parallel batches.

mod cache;
mod mock;
mod remote;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::RenderedPrompt;
use crate::util;

pub use cache::ResponseCache;
pub use mock::{MockBackend, MockConfig};
pub use remote::RemoteBackend;

/// Environment variable holding the remote endpoint credential.
pub const API_KEY_ENV: &str = "AUGMENT_LM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Mock,
}

/// Backend identity, sampling parameters and cache policy for one generation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineRun {
    pub backend: BackendKind,
    /// Opaque engine label (`ada`, `davinci`, `gpt-j`, ...).
    pub engine_name: String,
    pub endpoint_url: Option<String>,
    pub temperature: f64,
    /// Generation budget per completion, in tokens as the endpoint counts them.
    pub max_length: usize,
    pub samples_per_call: usize,
    pub stop_sequence: String,
    pub max_parallel: usize,
    pub cache_dir: PathBuf,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    /// Minimum spacing between backend requests; 0 disables pacing.
    pub min_request_interval_ms: u64,
    pub request_timeout_secs: u64,
    pub mock: MockConfig,
}

impl Default for EngineRun {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            engine_name: "mock".into(),
            endpoint_url: None,
            temperature: 1.0,
            max_length: 64,
            samples_per_call: 10,
            stop_sequence: "\nExample".into(),
            max_parallel: 4,
            cache_dir: PathBuf::from("cache"),
            max_retries: 5,
            initial_backoff_ms: 500,
            min_request_interval_ms: 0,
            request_timeout_secs: 60,
            mock: MockConfig::default(),
        }
    }
}

impl EngineRun {
    pub fn mock(cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            cache_dir: cache_dir.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config(format!(
                "temperature {} is outside [0, 2]",
                self.temperature
            )));
        }
        if self.samples_per_call == 0 || self.max_parallel == 0 || self.max_length == 0 {
            return Err(Error::Config(
                "samples_per_call, max_parallel and max_length must be positive".into(),
            ));
        }
        if self.backend == BackendKind::Remote && self.endpoint_url.is_none() {
            return Err(Error::Config("remote backend requires endpoint_url".into()));
        }
        self.mock.validate()
    }

    pub fn with_temperature(&self, temperature: f64) -> Self {
        Self {
            temperature,
            ..self.clone()
        }
    }
}

/// The sampling parameters sent with one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub backend: BackendKind,
    pub engine_name: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_length: usize,
    pub samples_per_call: usize,
    pub stop_sequence: String,
    /// Distinguishes repeated requests for an identical prompt.
    pub round: u32,
    /// Digest of backend-specific settings that change outputs (mock configuration).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_fingerprint: Option<String>,
}

impl CompletionRequest {
    /// Cache key over prompt text and every sampling parameter.
    pub fn cache_key(&self) -> String {
        let backend = match self.backend {
            BackendKind::Remote => "remote",
            BackendKind::Mock => "mock",
        };
        util::digest_parts(&[
            backend,
            self.engine_name.as_str(),
            self.prompt.as_str(),
            &format!("{:?}", self.temperature),
            &self.max_length.to_string(),
            &self.samples_per_call.to_string(),
            self.stop_sequence.as_str(),
            &self.round.to_string(),
            self.backend_fingerprint.as_deref().unwrap_or(""),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub cache_key: String,
    pub prompt_digest: String,
    pub engine_name: String,
    pub temperature: f64,
    pub request: CompletionRequest,
    pub completions: Vec<String>,
    /// Seconds since the Unix epoch when the backend answered.
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_cost_meta: Option<serde_json::Value>,
}

/// What a backend returns for one request.
#[derive(Debug, Clone, Default)]
pub struct BackendResponse {
    pub completions: Vec<String>,
    pub cost_meta: Option<serde_json::Value>,
}

/// Transient failures are retried by the client; others are returned at once.
#[derive(Debug)]
pub enum BackendError {
    Transient(String),
    Fatal(Error),
}

pub trait CompletionBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Settings beyond the request that determine the output.
    fn fingerprint(&self) -> Option<String> {
        None
    }

    fn complete(
        &self,
        request: &CompletionRequest,
        prompt: &RenderedPrompt,
    ) -> std::result::Result<BackendResponse, BackendError>;
}

/// Serializes backend requests to at most one per `interval`.
#[derive(Debug)]
struct Pacer {
    interval: Duration,
    next: Mutex<Instant>,
}

impl Pacer {
    fn wait(&self) {
        if self.interval.is_zero() {
            return;
        }
        let sleep_for = {
            let mut next = self.next.lock().expect("pacer lock");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot - now
        };
        if !sleep_for.is_zero() {
            std::thread::sleep(sleep_for);
        }
    }
}

/// A completion client bound to one [`EngineRun`].
pub struct LmClient {
    run: EngineRun,
    backend: Arc<dyn CompletionBackend>,
    cache: ResponseCache,
    backend_calls: Arc<AtomicUsize>,
    pacer: Pacer,
}

impl std::fmt::Debug for LmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LmClient")
            .field("run", &self.run)
            .field("backend_calls", &self.backend_calls())
            .finish()
    }
}

impl LmClient {
    /// Builds the backend named by `run`. A remote backend fails here when
    /// the credential is missing, before any request is made.
    pub fn new(run: EngineRun) -> Result<Self> {
        run.validate()?;
        let backend: Arc<dyn CompletionBackend> = match run.backend {
            BackendKind::Mock => Arc::new(MockBackend::new(run.mock.clone())?),
            BackendKind::Remote => Arc::new(RemoteBackend::from_env(&run)?),
        };
        Ok(Self::with_backend(run, backend))
    }

    /// Uses a mock backend that can drift towards the given intents' examples.
    pub fn mock_with_context(
        run: EngineRun,
        context: std::collections::BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        run.validate()?;
        let backend = MockBackend::new(run.mock.clone())?.with_context(context);
        Ok(Self::with_backend(run, Arc::new(backend)))
    }

    pub fn with_backend(run: EngineRun, backend: Arc<dyn CompletionBackend>) -> Self {
        let cache = ResponseCache::new(run.cache_dir.clone());
        let pacer = Pacer {
            interval: Duration::from_millis(run.min_request_interval_ms),
            next: Mutex::new(Instant::now()),
        };
        Self {
            run,
            backend,
            cache,
            backend_calls: Arc::new(AtomicUsize::new(0)),
            pacer,
        }
    }

    /// A client for different sampling parameters that shares this client's
    /// backend and call counter.
    pub fn with_run(&self, run: EngineRun) -> Result<Self> {
        run.validate()?;
        let mut client = Self::with_backend(run, Arc::clone(&self.backend));
        client.backend_calls = Arc::clone(&self.backend_calls);
        Ok(client)
    }

    pub fn run(&self) -> &EngineRun {
        &self.run
    }

    /// Number of requests that reached the backend (cache misses).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn request_for(&self, prompt: &RenderedPrompt, round: u32) -> CompletionRequest {
        CompletionRequest {
            backend: self.backend.kind(),
            engine_name: self.run.engine_name.clone(),
            prompt: prompt.text.clone(),
            temperature: self.run.temperature,
            max_length: self.run.max_length,
            samples_per_call: self.run.samples_per_call,
            stop_sequence: self.run.stop_sequence.clone(),
            round,
            backend_fingerprint: self.backend.fingerprint(),
        }
    }

    pub fn complete(&self, prompt: &RenderedPrompt) -> Result<CompletionRecord> {
        self.complete_round(prompt, 0)
    }

    /// Like [`complete`](Self::complete) for the `round`-th request of an
    /// identical prompt; each round is cached separately.
    pub fn complete_round(&self, prompt: &RenderedPrompt, round: u32) -> Result<CompletionRecord> {
        let request = self.request_for(prompt, round);
        let key = request.cache_key();
        if let Some(record) = self.cache.get(&key)? {
            return Ok(record);
        }
        let response = self.call_with_retries(&request, prompt)?;
        let record = CompletionRecord {
            cache_key: key,
            prompt_digest: prompt.digest.clone(),
            engine_name: request.engine_name.clone(),
            temperature: request.temperature,
            completions: response.completions,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            call_cost_meta: response.cost_meta,
            request,
        };
        self.cache.put(&record)?;
        Ok(record)
    }

    fn call_with_retries(
        &self,
        request: &CompletionRequest,
        prompt: &RenderedPrompt,
    ) -> Result<BackendResponse> {
        let mut attempt = 0;
        loop {
            self.pacer.wait();
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(request, prompt) {
                Ok(response) => return Ok(response),
                Err(BackendError::Fatal(e)) => return Err(e),
                Err(BackendError::Transient(message)) => {
                    if attempt >= self.run.max_retries {
                        return Err(Error::Endpoint {
                            status: None,
                            message: format!(
                                "giving up after {} attempts: {message}",
                                attempt + 1
                            ),
                        });
                    }
                    let backoff = self
                        .run
                        .initial_backoff_ms
                        .saturating_mul(1u64 << attempt.min(16));
                    log::warn!("transient completion failure ({message}); retrying in {backoff} ms");
                    std::thread::sleep(Duration::from_millis(backoff));
                    attempt += 1;
                }
            }
        }
    }

    /// Completes every prompt with at most `max_parallel` requests in flight.
    /// Results keep input order; one failure does not abort the others.
    pub fn complete_batch(&self, prompts: &[RenderedPrompt]) -> Vec<Result<CompletionRecord>> {
        let jobs: Vec<(&RenderedPrompt, u32)> = prompts.iter().map(|p| (p, 0)).collect();
        self.complete_batch_rounds(&jobs)
    }

    /// Batch form of [`complete_round`](Self::complete_round).
    pub fn complete_batch_rounds(
        &self,
        jobs: &[(&RenderedPrompt, u32)],
    ) -> Vec<Result<CompletionRecord>> {
        let workers = self.run.max_parallel.min(jobs.len());
        if workers <= 1 {
            return jobs
                .iter()
                .map(|(p, round)| self.complete_round(p, *round))
                .collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<CompletionRecord>>>> =
            jobs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((prompt, round)) = jobs.get(i) else {
                        break;
                    };
                    let result = self.complete_round(prompt, *round);
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| {
                slot.into_inner()
                    .expect("slot lock")
                    .expect("every slot filled")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{build_generation_prompt, PromptTemplate};
    use std::sync::atomic::AtomicUsize;

    fn prompt(intent: &str, n: usize) -> RenderedPrompt {
        let seeds: Vec<String> = (0..n).map(|i| format!("please play song number {i}")).collect();
        build_generation_prompt(intent, intent, &seeds, &PromptTemplate::single_intent()).unwrap()
    }

    struct Flaky {
        failures_left: AtomicUsize,
        fatal_on: Option<String>,
        in_flight: AtomicUsize,
        max_seen: AtomicUsize,
    }

    impl Flaky {
        fn new(failures: usize) -> Self {
            Self {
                failures_left: AtomicUsize::new(failures),
                fatal_on: None,
                in_flight: AtomicUsize::new(0),
                max_seen: AtomicUsize::new(0),
            }
        }
    }

    impl CompletionBackend for Flaky {
        fn kind(&self) -> BackendKind {
            BackendKind::Mock
        }

        fn complete(
            &self,
            request: &CompletionRequest,
            prompt: &RenderedPrompt,
        ) -> std::result::Result<BackendResponse, BackendError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.max_seen.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            if self.fatal_on.as_deref() == Some(prompt.seed_intent.as_deref().unwrap_or("")) {
                return Err(BackendError::Fatal(Error::Endpoint {
                    status: Some(400),
                    message: "bad request".into(),
                }));
            }
            if self
                .failures_left
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
            {
                return Err(BackendError::Transient("503".into()));
            }
            Ok(BackendResponse {
                completions: vec![format!(" echo {}", request.round); request.samples_per_call],
                cost_meta: None,
            })
        }
    }

    fn run_in(dir: &std::path::Path) -> EngineRun {
        EngineRun {
            initial_backoff_ms: 1,
            ..EngineRun::mock(dir)
        }
    }

    #[test]
    fn second_identical_call_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let client = LmClient::new(run_in(dir.path())).unwrap();
        let p = prompt("music", 10);
        let first = client.complete(&p).unwrap();
        assert_eq!(client.backend_calls(), 1);
        let second = client.complete(&p).unwrap();
        assert_eq!(client.backend_calls(), 1);
        assert_eq!(first, second);

        let fresh = LmClient::new(run_in(dir.path())).unwrap();
        assert_eq!(fresh.complete(&p).unwrap(), first);
        assert_eq!(fresh.backend_calls(), 0);

        let other_round = client.complete_round(&p, 1).unwrap();
        assert_ne!(other_round.cache_key, first.cache_key);
        assert_eq!(client.backend_calls(), 2);
    }

    #[test]
    fn cache_key_tracks_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let client = LmClient::new(run_in(dir.path())).unwrap();
        let p = prompt("music", 3);
        let base = client.request_for(&p, 0);
        let variants = [
            CompletionRequest { temperature: 0.7, ..base.clone() },
            CompletionRequest { max_length: 65, ..base.clone() },
            CompletionRequest { samples_per_call: 3, ..base.clone() },
            CompletionRequest { stop_sequence: "\n".into(), ..base.clone() },
            CompletionRequest { engine_name: "davinci".into(), ..base.clone() },
            CompletionRequest { prompt: format!("{} ", base.prompt), ..base.clone() },
            CompletionRequest { round: 1, ..base.clone() },
        ];
        for v in &variants {
            assert_ne!(v.cache_key(), base.cache_key(), "{v:?}");
        }
        assert_eq!(base.clone().cache_key(), base.cache_key());
    }

    #[test]
    fn transient_failures_are_retried() {
        let dir = tempfile::tempdir().unwrap();
        let client = LmClient::with_backend(run_in(dir.path()), Arc::new(Flaky::new(2)));
        let record = client.complete(&prompt("a", 2)).unwrap();
        assert_eq!(record.completions.len(), 10);
        assert_eq!(client.backend_calls(), 3);

        let dir = tempfile::tempdir().unwrap();
        let run = EngineRun { max_retries: 1, ..run_in(dir.path()) };
        let client = LmClient::with_backend(run, Arc::new(Flaky::new(5)));
        assert!(matches!(
            client.complete(&prompt("a", 2)),
            Err(Error::Endpoint { .. })
        ));
        assert_eq!(client.backend_calls(), 2);
    }

    #[test]
    fn batch_is_ordered_bounded_and_isolates_failures() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(Flaky {
            fatal_on: Some("intent7".into()),
            ..Flaky::new(0)
        });
        let run = EngineRun { max_parallel: 4, ..run_in(dir.path()) };
        let client = LmClient::with_backend(run, backend.clone());
        let prompts: Vec<RenderedPrompt> = (0..20).map(|i| prompt(&format!("intent{i}"), 2)).collect();
        let results = client.complete_batch(&prompts);
        assert_eq!(results.len(), 20);
        assert_eq!(results.iter().filter(|r| r.is_err()).count(), 1);
        assert!(results[7].is_err());
        for (r, p) in results.iter().zip(&prompts) {
            if let Ok(record) = r {
                assert_eq!(record.prompt_digest, p.digest);
            }
        }
        assert!(backend.max_seen.load(Ordering::SeqCst) <= 4);
        assert!(backend.max_seen.load(Ordering::SeqCst) >= 2);

        let before = client.backend_calls();
        let ok: Vec<RenderedPrompt> = prompts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 7)
            .map(|(_, p)| p.clone())
            .collect();
        assert!(client.complete_batch(&ok).iter().all(|r| r.is_ok()));
        assert_eq!(client.backend_calls(), before);
    }

    #[test]
    fn missing_credential_fails_before_any_request() {
        let dir = tempfile::tempdir().unwrap();
        let run = EngineRun {
            backend: BackendKind::Remote,
            endpoint_url: Some("http://127.0.0.1:9/v1/completions".into()),
            ..run_in(dir.path())
        };
        // Only meaningful when the variable is unset in the test environment.
        if std::env::var_os(API_KEY_ENV).is_none() {
            assert!(matches!(
                LmClient::new(run),
                Err(Error::MissingCredential(API_KEY_ENV))
            ));
        }
    }

    #[test]
    fn validation() {
        let bad = EngineRun { temperature: 2.5, ..EngineRun::default() };
        assert!(bad.validate().is_err());
        let bad = EngineRun { samples_per_call: 0, ..EngineRun::default() };
        assert!(bad.validate().is_err());
        let bad = EngineRun { backend: BackendKind::Remote, ..EngineRun::default() };
        assert!(bad.validate().is_err());
    }
}
