//! Remote scorer client: one JSON protocol for quality dimensions and
//! verification sub-scores, with retry, a content-addressed response cache and
//! an in-flight limit.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assessment::{AssessmentError, Dimension, DimensionScorer, DimensionScores, Provenance};
use crate::genome::{render_text, PromptGenome, ScenarioKind};

use super::config::Backend;

pub const TOKEN_ENV: &str = "CLINEVO_REMOTE_TOKEN";

/// Scores outside [0, 1] by no more than this are clamped; anything further out is rejected.
const SCORE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub backoff_base_ms: u64,
    pub backoff_factor: f64,
    /// Response cache directory; in memory when unset.
    pub cache_dir: Option<PathBuf>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: None,
            timeout_ms: 30_000,
            max_retries: 3,
            max_in_flight: 4,
            backoff_base_ms: 500,
            backoff_factor: 2.0,
            cache_dir: None,
        }
    }
}

impl RemoteConfig {
    pub fn problems(&self, backend: Backend) -> Vec<String> {
        let mut out = Vec::new();
        if backend != Backend::Offline && self.endpoint.as_deref().is_none_or(str::is_empty) {
            out.push(format!("backend {} needs an endpoint", backend.as_str()));
        }
        if let Some(e) = &self.endpoint {
            if !(e.starts_with("http://") || e.starts_with("https://")) {
                out.push(format!("endpoint {e:?} is not an http(s) URL"));
            }
        }
        if self.timeout_ms == 0 {
            out.push("timeout_ms must be > 0".into());
        }
        if self.max_in_flight == 0 {
            out.push("max_in_flight must be >= 1".into());
        }
        if !(self.backoff_factor >= 1.0) {
            out.push(format!("backoff_factor = {} must be >= 1", self.backoff_factor));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Clarity,
    Specificity,
    Relevance,
    AccuracyRisk,
    Terminology,
    Reasoning,
    Guideline,
    Boundary,
}

impl From<Dimension> for ScoreKind {
    fn from(d: Dimension) -> Self {
        match d {
            Dimension::Clarity => ScoreKind::Clarity,
            Dimension::Specificity => ScoreKind::Specificity,
            Dimension::Relevance => ScoreKind::Relevance,
            Dimension::AccuracyRisk => ScoreKind::AccuracyRisk,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerRequest {
    pub prompt_text: String,
    pub kind: ScoreKind,
    pub scenario: ScenarioKind,
}

impl ScorerRequest {
    pub fn body(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("request serializes")
    }

    /// Hex SHA-256 of the request body; the cache key.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.body()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerResponse {
    pub score: f64,
    pub model_id: String,
    pub latency_ms: u64,
}

/// Parses and checks a response body.
pub fn parse_response(body: &[u8]) -> Result<ScorerResponse, RemoteError> {
    let mut r: ScorerResponse =
        serde_json::from_slice(body).map_err(|e| RemoteError::NonConforming(e.to_string()))?;
    if !r.score.is_finite() || r.score < -SCORE_TOLERANCE || r.score > 1.0 + SCORE_TOLERANCE {
        return Err(RemoteError::NonConforming(format!("score {} outside [0, 1]", r.score)));
    }
    r.score = r.score.clamp(0.0, 1.0);
    Ok(r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Io(String),
}

/// Sends one JSON POST. Implementations must not log the bearer token.
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, body: &[u8], bearer: Option<&str>) -> Result<HttpResponse, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl Transport for UreqTransport {
    fn post(&self, url: &str, body: &[u8], bearer: Option<&str>) -> Result<HttpResponse, TransportError> {
        let mut req = self.agent.post(url).header("content-type", "application/json");
        if let Some(t) = bearer {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        match req.send(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let body = resp
                    .body_mut()
                    .read_to_vec()
                    .map_err(|e| TransportError::Io(e.to_string()))?;
                Ok(HttpResponse { status, body })
            }
            Err(ureq::Error::Timeout(_)) => Err(TransportError::Timeout),
            Err(e) => Err(TransportError::Io(e.to_string())),
        }
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum RemoteError {
    #[error("no remote endpoint configured")]
    NotConfigured,
    #[error("remote rejected request with status {status}")]
    Permanent { status: u16 },
    #[error("remote scoring failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("non-conforming response: {0}")]
    NonConforming(String),
    #[error("response cache: {0}")]
    Cache(String),
}

/// Delay before retry number `retry` (0-based): `base * factor^retry`, scaled
/// by a jitter factor `u` in [0, 1) mapped onto [0.5, 1).
pub fn backoff_delay(retry: u32, base_ms: u64, factor: f64, u: f64) -> Duration {
    let full = base_ms as f64 * factor.powi(retry as i32);
    Duration::from_secs_f64(full * (0.5 + 0.5 * u) / 1000.0)
}

enum ResponseCache {
    Memory(Mutex<HashMap<String, Vec<u8>>>),
    Disk(PathBuf),
}

impl ResponseCache {
    fn get(&self, key: &str) -> Option<Vec<u8>> {
        match self {
            ResponseCache::Memory(m) => m.lock().unwrap().get(key).cloned(),
            ResponseCache::Disk(dir) => std::fs::read(dir.join(format!("{key}.json"))).ok(),
        }
    }

    fn put(&self, key: &str, body: &[u8]) -> Result<(), RemoteError> {
        match self {
            ResponseCache::Memory(m) => {
                m.lock().unwrap().insert(key.to_string(), body.to_vec());
                Ok(())
            }
            ResponseCache::Disk(dir) => {
                let err = |e: std::io::Error| RemoteError::Cache(e.to_string());
                std::fs::create_dir_all(dir).map_err(err)?;
                let tmp = dir.join(format!(".{key}.tmp"));
                std::fs::write(&tmp, body).map_err(err)?;
                std::fs::rename(&tmp, dir.join(format!("{key}.json"))).map_err(err)
            }
        }
    }
}

/// Counting semaphore bounding concurrent network requests.
struct InFlight {
    limit: usize,
    busy: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut busy = self.busy.lock().unwrap();
        while *busy >= self.limit {
            busy = self.freed.wait(busy).unwrap();
        }
        *busy += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.busy.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteClient {
    cfg: RemoteConfig,
    transport: Arc<dyn Transport>,
    sleeper: Arc<dyn Sleeper>,
    token: Option<String>,
    cache: ResponseCache,
    in_flight: InFlight,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteClient")
            .field("endpoint", &self.cfg.endpoint)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish_non_exhaustive()
    }
}

impl RemoteClient {
    pub fn new(
        cfg: RemoteConfig,
        transport: Arc<dyn Transport>,
        token: Option<String>,
    ) -> Result<Self, RemoteError> {
        if cfg.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(RemoteError::NotConfigured);
        }
        let cache = match &cfg.cache_dir {
            Some(dir) => ResponseCache::Disk(dir.clone()),
            None => ResponseCache::Memory(Mutex::new(HashMap::new())),
        };
        let in_flight = InFlight {
            limit: cfg.max_in_flight.max(1),
            busy: Mutex::new(0),
            freed: Condvar::new(),
        };
        Ok(RemoteClient {
            cfg,
            transport,
            sleeper: Arc::new(ThreadSleeper),
            token,
            cache,
            in_flight,
            key_locks: Mutex::new(HashMap::new()),
        })
    }

    /// Client over HTTP with the token read from the environment.
    pub fn from_env(cfg: RemoteConfig) -> Result<Self, RemoteError> {
        let transport = Arc::new(UreqTransport::new(Duration::from_millis(cfg.timeout_ms)));
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Self::new(cfg, transport, token)
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    /// Scores one request, from the cache when possible.
    pub fn score(&self, request: &ScorerRequest) -> Result<ScorerResponse, RemoteError> {
        let key = request.digest();
        let lock = Arc::clone(self.key_locks.lock().unwrap().entry(key.clone()).or_default());
        let _guard = lock.lock().unwrap();
        if let Some(body) = self.cache.get(&key) {
            match parse_response(&body) {
                Ok(r) => return Ok(r),
                Err(e) => log::warn!("ignoring unreadable cache entry {key}: {e}"),
            }
        }
        let body = self.fetch(request)?;
        let response = parse_response(&body)?;
        self.cache.put(&key, &body)?;
        Ok(response)
    }

    fn fetch(&self, request: &ScorerRequest) -> Result<Vec<u8>, RemoteError> {
        let url = self.cfg.endpoint.as_deref().ok_or(RemoteError::NotConfigured)?;
        let payload = request.body();
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let u: f64 = rand::thread_rng().gen();
                let d = backoff_delay(attempt - 1, self.cfg.backoff_base_ms, self.cfg.backoff_factor, u);
                log::debug!("retrying remote score in {d:?} after: {last}");
                self.sleeper.sleep(d);
            }
            let outcome = {
                let _permit = self.in_flight.acquire();
                self.transport.post(url, &payload, self.token.as_deref())
            };
            match outcome {
                Ok(r) if (200..300).contains(&r.status) => return Ok(r.body),
                Ok(r) if (400..500).contains(&r.status) => {
                    return Err(RemoteError::Permanent { status: r.status })
                }
                Ok(r) => last = format!("status {}", r.status),
                Err(e) => last = e.to_string(),
            }
        }
        Err(RemoteError::Exhausted { attempts, last })
    }
}

/// Quality dimensions scored by the remote service, one request each.
pub struct RemoteScorer {
    client: Arc<RemoteClient>,
}

impl RemoteScorer {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        RemoteScorer { client }
    }
}

impl DimensionScorer for RemoteScorer {
    fn provenance(&self) -> Provenance {
        Provenance::Remote
    }

    fn score(&self, genome: &PromptGenome) -> Result<DimensionScores, AssessmentError> {
        let text = render_text(genome);
        let mut out = [0.0; 4];
        for d in Dimension::ALL {
            let req = ScorerRequest {
                prompt_text: text.clone(),
                kind: d.into(),
                scenario: genome.scenario(),
            };
            out[d.index()] = self
                .client
                .score(&req)
                .map_err(|e| AssessmentError::Backend(e.to_string()))?
                .score;
        }
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod fake {
    use super::*;
    use std::collections::VecDeque;

    /// Replays scripted replies and records every call.
    #[derive(Default)]
    pub struct ScriptedTransport {
        pub replies: Mutex<VecDeque<Result<HttpResponse, TransportError>>>,
        pub calls: Mutex<Vec<(String, Vec<u8>, Option<String>)>>,
    }

    impl ScriptedTransport {
        pub fn new(replies: Vec<Result<HttpResponse, TransportError>>) -> Self {
            ScriptedTransport {
                replies: Mutex::new(replies.into()),
                calls: Mutex::default(),
            }
        }

        pub fn calls(&self) -> usize {
            self.calls.lock().unwrap().len()
        }
    }

    impl Transport for ScriptedTransport {
        fn post(&self, url: &str, body: &[u8], bearer: Option<&str>) -> Result<HttpResponse, TransportError> {
            self.calls
                .lock()
                .unwrap()
                .push((url.into(), body.to_vec(), bearer.map(String::from)));
            self.replies
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or(Err(TransportError::Io("script exhausted".into())))
        }
    }

    #[derive(Default)]
    pub struct RecordingSleeper(pub Mutex<Vec<Duration>>);

    impl Sleeper for RecordingSleeper {
        fn sleep(&self, d: Duration) {
            self.0.lock().unwrap().push(d);
        }
    }

    pub fn ok(score: f64) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: 200,
            body: format!(r#"{{"score": {score}, "model_id": "fake-1", "latency_ms": 12}}"#).into_bytes(),
        })
    }

    pub fn status(code: u16) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: code,
            body: b"{}".to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::fake::*;
    use super::*;

    fn cfg() -> RemoteConfig {
        RemoteConfig {
            endpoint: Some("http://scorer.invalid/score".into()),
            ..RemoteConfig::default()
        }
    }

    fn client(t: &Arc<ScriptedTransport>, cfg: RemoteConfig) -> (RemoteClient, Arc<RecordingSleeper>) {
        let sleeper = Arc::new(RecordingSleeper::default());
        let c = RemoteClient::new(cfg, Arc::clone(t) as Arc<dyn Transport>, Some("tkn".into()))
            .unwrap()
            .with_sleeper(Arc::clone(&sleeper) as Arc<dyn Sleeper>);
        (c, sleeper)
    }

    fn req() -> ScorerRequest {
        ScorerRequest {
            prompt_text: "You are a clinician.".into(),
            kind: ScoreKind::Clarity,
            scenario: ScenarioKind::Diagnosis,
        }
    }

    #[test]
    fn second_identical_request_is_cached() {
        let t = Arc::new(ScriptedTransport::new(vec![ok(0.7)]));
        let (c, _) = client(&t, cfg());
        assert_eq!(c.score(&req()).unwrap().score, 0.7);
        assert_eq!(c.score(&req()).unwrap().score, 0.7);
        assert_eq!(t.calls(), 1);
    }

    #[test]
    fn two_server_errors_then_success() {
        let t = Arc::new(ScriptedTransport::new(vec![status(500), status(503), ok(0.4)]));
        let (c, sleeper) = client(&t, cfg());
        assert_eq!(c.score(&req()).unwrap().score, 0.4);
        assert_eq!(t.calls(), 3);
        let delays = sleeper.0.lock().unwrap().clone();
        assert_eq!(delays.len(), 2);
        assert!(delays[0] >= Duration::from_millis(250) && delays[0] < Duration::from_millis(500));
        assert!(delays[1] >= Duration::from_millis(500) && delays[1] < Duration::from_millis(1000));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let t = Arc::new(ScriptedTransport::new(vec![status(404), ok(0.4)]));
        let (c, sleeper) = client(&t, cfg());
        assert_eq!(c.score(&req()), Err(RemoteError::Permanent { status: 404 }));
        assert_eq!(t.calls(), 1);
        assert!(sleeper.0.lock().unwrap().is_empty());
    }

    #[test]
    fn exhaustion_carries_last_cause() {
        let t = Arc::new(ScriptedTransport::new(vec![
            status(500),
            Err(TransportError::Timeout),
            status(502),
            Err(TransportError::Timeout),
        ]));
        let (c, _) = client(&t, cfg());
        match c.score(&req()) {
            Err(RemoteError::Exhausted { attempts: 4, last }) => assert!(last.contains("timed out")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_score_is_rejected() {
        let t = Arc::new(ScriptedTransport::new(vec![ok(1.3), ok(0.5)]));
        let (c, _) = client(&t, cfg());
        assert!(matches!(c.score(&req()), Err(RemoteError::NonConforming(_))));
        // Nothing was cached, so the next call goes out again.
        assert_eq!(c.score(&req()).unwrap().score, 0.5);
        assert_eq!(t.calls(), 2);
    }

    #[test]
    fn malformed_response_is_rejected() {
        assert!(parse_response(br#"{"score": 0.5}"#).is_err());
        assert!(parse_response(br#"{"score": 0.5, "model_id": "m", "latency_ms": 1, "x": 1}"#).is_err());
        assert_eq!(parse_response(br#"{"score": 1.0000000000001, "model_id": "m", "latency_ms": 1}"#).unwrap().score, 1.0);
    }

    #[test]
    fn disk_cache_keeps_original_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let t = Arc::new(ScriptedTransport::new(vec![ok(0.25)]));
        let c = RemoteConfig {
            cache_dir: Some(dir.path().to_path_buf()),
            ..cfg()
        };
        let (first, _) = client(&t, c.clone());
        first.score(&req()).unwrap();
        let stored = std::fs::read(dir.path().join(format!("{}.json", req().digest()))).unwrap();
        assert_eq!(stored, ok(0.25).unwrap().body);

        // A fresh client over the same directory never touches the network.
        let t2 = Arc::new(ScriptedTransport::new(vec![]));
        let (second, _) = client(&t2, c);
        assert_eq!(second.score(&req()).unwrap().score, 0.25);
        assert_eq!(t2.calls(), 0);
    }

    #[test]
    fn request_is_posted_as_json_with_token() {
        let t = Arc::new(ScriptedTransport::new(vec![ok(0.5)]));
        let (c, _) = client(&t, cfg());
        c.score(&req()).unwrap();
        let (url, body, bearer) = t.calls.lock().unwrap()[0].clone();
        assert_eq!(url, "http://scorer.invalid/score");
        let sent: ScorerRequest = serde_json::from_slice(&body).unwrap();
        assert_eq!(sent, req());
        assert_eq!(bearer.as_deref(), Some("tkn"));
        assert!(!format!("{c:?}").contains("tkn"));
    }

    #[test]
    fn in_flight_limit_is_respected() {
        struct Slow {
            now: Mutex<usize>,
            peak: Mutex<usize>,
        }
        impl Transport for Slow {
            fn post(&self, _: &str, _: &[u8], _: Option<&str>) -> Result<HttpResponse, TransportError> {
                {
                    let mut n = self.now.lock().unwrap();
                    *n += 1;
                    let mut p = self.peak.lock().unwrap();
                    *p = (*p).max(*n);
                }
                std::thread::sleep(Duration::from_millis(5));
                *self.now.lock().unwrap() -= 1;
                ok(0.5)
            }
        }
        let t = Arc::new(Slow {
            now: Mutex::new(0),
            peak: Mutex::new(0),
        });
        let c = RemoteClient::new(
            RemoteConfig {
                max_in_flight: 2,
                ..cfg()
            },
            Arc::clone(&t) as Arc<dyn Transport>,
            None,
        )
        .unwrap();
        std::thread::scope(|s| {
            for i in 0..8 {
                let c = &c;
                s.spawn(move || {
                    let r = ScorerRequest {
                        prompt_text: format!("prompt {i}"),
                        ..req()
                    };
                    c.score(&r).unwrap();
                });
            }
        });
        assert!(*t.peak.lock().unwrap() <= 2);
    }

    #[test]
    fn remote_scorer_sends_one_request_per_dimension() {
        let t = Arc::new(ScriptedTransport::new(vec![ok(0.1), ok(0.2), ok(0.3), ok(0.4)]));
        let (c, _) = client(&t, cfg());
        let (genome, ..) = crate::fixtures::evaluation_fixture();
        let scores = RemoteScorer::new(Arc::new(c)).score(&genome).unwrap();
        assert_eq!(scores, [0.1, 0.2, 0.3, 0.4]);
        let kinds: Vec<ScoreKind> = t
            .calls
            .lock()
            .unwrap()
            .iter()
            .map(|(_, b, _)| serde_json::from_slice::<ScorerRequest>(b).unwrap().kind)
            .collect();
        assert_eq!(
            kinds,
            [ScoreKind::Clarity, ScoreKind::Specificity, ScoreKind::Relevance, ScoreKind::AccuracyRisk]
        );
    }

    #[test]
    fn backoff_grows_geometrically() {
        assert_eq!(backoff_delay(0, 500, 2.0, 1.0), Duration::from_millis(500));
        assert_eq!(backoff_delay(2, 500, 2.0, 1.0), Duration::from_millis(2000));
        assert_eq!(backoff_delay(1, 500, 2.0, 0.0), Duration::from_millis(500));
    }
}
