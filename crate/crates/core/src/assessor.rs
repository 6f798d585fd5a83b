//! Relevance assessment: Yes/No logits become a score `σ(z_yes − z_no)`.
//!
//! [`MockAssessor`] is a seeded stand-in for the multimodal judge, driven by a
//! ground-truth table with configurable true/false positive rates.
//! `HttpAssessor` (feature `remote`) talks to an external judge over the
//! `POST /assess` protocol.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, seeded};

pub const DEFAULT_PROMPT: &str =
    "Does the candidate match the reference modified by the given text? Answer Yes or No.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssessorError {
    #[error("non-finite logits ({z_yes}, {z_no})")]
    NonFiniteLogits { z_yes: f64, z_no: f64 },
    #[error("score {0} outside (0, 1)")]
    ScoreOutOfRange(f64),
    #[error("query `{0}` not present in the oracle table")]
    UnknownQuery(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("assessor returned HTTP {0}")]
    Status(u16),
    #[error("malformed assessor response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitPair {
    pub z_yes: f64,
    pub z_no: f64,
}

/// A relevance score strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct RelevanceScore(f64);

impl RelevanceScore {
    pub fn new(s: f64) -> Result<Self, AssessorError> {
        if s > 0.0 && s < 1.0 {
            Ok(Self(s))
        } else {
            Err(AssessorError::ScoreOutOfRange(s))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

// Largest f64 below 1.0; the sigmoid saturates to exactly 1.0 past ~37.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ(z_yes − z_no)`, held inside the open unit interval even where `f64`
/// saturates.
pub fn score_from_logits(lp: LogitPair) -> Result<RelevanceScore, AssessorError> {
    if !(lp.z_yes.is_finite() && lp.z_no.is_finite()) {
        return Err(AssessorError::NonFiniteLogits {
            z_yes: lp.z_yes,
            z_no: lp.z_no,
        });
    }
    let s = sigmoid(lp.z_yes - lp.z_no).clamp(f64::MIN_POSITIVE, BELOW_ONE);
    Ok(RelevanceScore(s))
}

/// Opaque references to the media behind a composed query and a candidate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_visual: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modification_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessorRequest {
    pub query_id: String,
    pub candidate_id: String,
    pub prompt: String,
    #[serde(flatten)]
    pub payload: Payload,
}

impl AssessorRequest {
    pub fn new(query_id: impl Into<String>, candidate_id: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            candidate_id: candidate_id.into(),
            prompt: DEFAULT_PROMPT.to_string(),
            payload: Payload::default(),
        }
    }

    pub fn validate(&self) -> Result<(), AssessorError> {
        if self.query_id.is_empty() || self.candidate_id.is_empty() {
            return Err(AssessorError::InvalidRequest("ids must be nonempty".into()));
        }
        Ok(())
    }
}

pub trait Assessor: Send + Sync {
    fn assess(&self, req: &AssessorRequest) -> Result<RelevanceScore, AssessorError>;
}

impl<A: Assessor + ?Sized> Assessor for &A {
    fn assess(&self, req: &AssessorRequest) -> Result<RelevanceScore, AssessorError> {
        (**self).assess(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockNoise {
    /// Probability a ground-truth candidate scores high.
    pub tpr: f64,
    /// Probability a non-ground-truth candidate scores high.
    pub fpr: f64,
    pub seed: u64,
}

impl Default for MockNoise {
    fn default() -> Self {
        Self {
            tpr: 1.0,
            fpr: 0.0,
            seed: 0,
        }
    }
}

/// High scores land in `[0.8, 1.0)`, low scores in `(0, 0.2]`.
pub const MOCK_HIGH_FLOOR: f64 = 0.8;
pub const MOCK_LOW_CEIL: f64 = 0.2;

/// Deterministic table-driven assessor with an exact call counter.
#[derive(Debug)]
pub struct MockAssessor {
    table: HashMap<String, HashSet<String>>,
    noise: MockNoise,
    calls: AtomicUsize,
}

impl MockAssessor {
    pub fn new(table: HashMap<String, HashSet<String>>, noise: MockNoise) -> Self {
        Self {
            table,
            noise,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_pairs<I, S, T>(pairs: I, noise: MockNoise) -> Self
    where
        I: IntoIterator<Item = (S, Vec<T>)>,
        S: Into<String>,
        T: Into<String>,
    {
        let table = pairs
            .into_iter()
            .map(|(q, ts)| (q.into(), ts.into_iter().map(Into::into).collect()))
            .collect();
        Self::new(table, noise)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn noise(&self) -> MockNoise {
        self.noise
    }
}

pub fn mock_assess(
    table: &HashMap<String, HashSet<String>>,
    req: &AssessorRequest,
    noise: MockNoise,
) -> Result<RelevanceScore, AssessorError> {
    req.validate()?;
    let targets = table
        .get(&req.query_id)
        .ok_or_else(|| AssessorError::UnknownQuery(req.query_id.clone()))?;
    let mut rng = seeded(derive_seed(
        noise.seed,
        &[req.query_id.as_bytes(), req.candidate_id.as_bytes()],
    ));
    let p_high = if targets.contains(&req.candidate_id) {
        noise.tpr
    } else {
        noise.fpr
    };
    let high = rng.random::<f64>() < p_high;
    let u: f64 = rng.random();
    let s = if high {
        MOCK_HIGH_FLOOR + (1.0 - MOCK_HIGH_FLOOR) * u
    } else {
        MOCK_LOW_CEIL * (1.0 - u)
    };
    // u < 1 keeps both branches inside (0, 1).
    RelevanceScore::new(s)
}

impl Assessor for MockAssessor {
    fn assess(&self, req: &AssessorRequest) -> Result<RelevanceScore, AssessorError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        mock_assess(&self.table, req, self.noise)
    }
}

/// Wire shape of an assessor response.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum AssessResponse {
    Logits { z_yes: f64, z_no: f64 },
    Score { score: f64 },
}

impl AssessResponse {
    pub fn into_score(self) -> Result<RelevanceScore, AssessorError> {
        match self {
            AssessResponse::Logits { z_yes, z_no } => score_from_logits(LogitPair { z_yes, z_no }),
            AssessResponse::Score { score } => RelevanceScore::new(score),
        }
    }
}

pub fn parse_response(body: &str) -> Result<RelevanceScore, AssessorError> {
    serde_json::from_str::<AssessResponse>(body)
        .map_err(|e| AssessorError::Malformed(e.to_string()))?
        .into_score()
}

#[cfg(feature = "remote")]
pub use remote::{remote_assess, HttpAssessor, HttpAssessorConfig, ASSESSOR_URL_ENV};

#[cfg(feature = "remote")]
mod remote {
    use std::time::Duration;

    use serde::Serialize;

    use super::{parse_response, AssessorError, AssessorRequest, RelevanceScore};

    pub const ASSESSOR_URL_ENV: &str = "CVR_ASSESSOR_URL";

    #[derive(Debug, Clone, PartialEq)]
    pub struct HttpAssessorConfig {
        /// Base URL; requests go to `{endpoint}/assess`.
        pub endpoint: String,
        pub timeout: Duration,
        pub retries: usize,
        /// First retry delay; doubles on each further retry.
        pub backoff: Duration,
        pub send_payload: bool,
    }

    impl HttpAssessorConfig {
        pub fn new(endpoint: impl Into<String>) -> Self {
            Self {
                endpoint: endpoint.into(),
                timeout: Duration::from_secs(30),
                retries: 2,
                backoff: Duration::from_millis(250),
                send_payload: false,
            }
        }

        pub fn from_env() -> Option<Self> {
            std::env::var(ASSESSOR_URL_ENV).ok().filter(|s| !s.is_empty()).map(Self::new)
        }

        fn url(&self) -> String {
            format!("{}/assess", self.endpoint.trim_end_matches('/'))
        }
    }

    #[derive(Serialize)]
    struct WireRequest<'a> {
        query_id: &'a str,
        candidate_id: &'a str,
        prompt: &'a str,
        #[serde(flatten, skip_serializing_if = "Option::is_none")]
        payload: Option<&'a super::Payload>,
    }

    #[derive(Debug)]
    pub struct HttpAssessor {
        cfg: HttpAssessorConfig,
        agent: ureq::Agent,
    }

    enum Attempt {
        Retry(String),
        Fatal(AssessorError),
    }

    impl HttpAssessor {
        pub fn new(cfg: HttpAssessorConfig) -> Self {
            let agent = ureq::Agent::config_builder()
                .timeout_global(Some(cfg.timeout))
                .http_status_as_error(false)
                .build()
                .into();
            Self { cfg, agent }
        }

        pub fn config(&self) -> &HttpAssessorConfig {
            &self.cfg
        }

        fn attempt(&self, body: &WireRequest<'_>) -> Result<RelevanceScore, Attempt> {
            let mut resp = self
                .agent
                .post(&self.cfg.url())
                .send_json(body)
                .map_err(|e| Attempt::Retry(e.to_string()))?;
            let status = resp.status().as_u16();
            if status != 200 {
                return Err(if status >= 500 {
                    Attempt::Retry(format!("HTTP {status}"))
                } else {
                    Attempt::Fatal(AssessorError::Status(status))
                });
            }
            let text = resp
                .body_mut()
                .read_to_string()
                .map_err(|e| Attempt::Retry(e.to_string()))?;
            parse_response(&text).map_err(Attempt::Fatal)
        }
    }

    impl super::Assessor for HttpAssessor {
        fn assess(&self, req: &AssessorRequest) -> Result<RelevanceScore, AssessorError> {
            req.validate()?;
            let body = WireRequest {
                query_id: &req.query_id,
                candidate_id: &req.candidate_id,
                prompt: &req.prompt,
                payload: self.cfg.send_payload.then_some(&req.payload),
            };
            let attempts = self.cfg.retries + 1;
            let mut last = String::new();
            for attempt in 0..attempts {
                if attempt > 0 {
                    std::thread::sleep(self.cfg.backoff * (1u32 << (attempt - 1).min(16)));
                }
                match self.attempt(&body) {
                    Ok(s) => return Ok(s),
                    Err(Attempt::Fatal(e)) => return Err(e),
                    Err(Attempt::Retry(msg)) => last = msg,
                }
            }
            Err(AssessorError::Transport {
                attempts,
                message: last,
            })
        }
    }

    pub fn remote_assess(
        endpoint: &str,
        req: &AssessorRequest,
        timeout: Duration,
        retries: usize,
    ) -> Result<RelevanceScore, AssessorError> {
        use super::Assessor;
        let cfg = HttpAssessorConfig {
            timeout,
            retries,
            ..HttpAssessorConfig::new(endpoint)
        };
        HttpAssessor::new(cfg).assess(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(z_yes: f64, z_no: f64) -> f64 {
        score_from_logits(LogitPair { z_yes, z_no }).unwrap().value()
    }

    #[test]
    fn logit_examples() {
        assert_eq!(s(0.0, 0.0), 0.5);
        assert!((s(10.0, -10.0) - (1.0 - 2.061_153_6e-9)).abs() < 1e-15);
        assert!((s(-2.0, 1.0) - 0.047_425_873).abs() < 1e-9);
        assert!(score_from_logits(LogitPair { z_yes: f64::NAN, z_no: 0.0 }).is_err());
        assert!(score_from_logits(LogitPair { z_yes: f64::INFINITY, z_no: 0.0 }).is_err());
    }

    #[test]
    fn saturated_logits_stay_open() {
        let hi = s(500.0, 0.0);
        let lo = s(-5000.0, 0.0);
        assert!(hi < 1.0 && hi > 0.99);
        assert!(lo > 0.0 && lo < 1e-300);
    }

    #[test]
    fn shift_invariance_and_monotonicity() {
        for d in [-5.0, -0.25, 0.0, 0.75, 4.0] {
            assert_eq!(s(d + 0.0, 0.0), s(d + 8.0, 8.0));
            assert!(s(d + 0.01, 0.0) > s(d, 0.0));
        }
    }

    fn table() -> HashMap<String, HashSet<String>> {
        HashMap::from([("q".to_string(), HashSet::from(["g1".to_string()]))])
    }

    #[test]
    fn noiseless_and_blind_oracles() {
        let t = table();
        let exact = MockNoise { tpr: 1.0, fpr: 0.0, seed: 3 };
        let blind = MockNoise { tpr: 0.0, fpr: 0.0, seed: 3 };
        for cand in ["g1", "g2", "g3", "g4"] {
            let req = AssessorRequest::new("q", cand);
            let v = mock_assess(&t, &req, exact).unwrap().value();
            if cand == "g1" {
                assert!(v >= MOCK_HIGH_FLOOR);
            } else {
                assert!(v <= MOCK_LOW_CEIL);
            }
            assert!(mock_assess(&t, &req, blind).unwrap().value() <= MOCK_LOW_CEIL);
        }
    }

    #[test]
    fn mock_is_deterministic_and_counts() {
        let m = MockAssessor::new(table(), MockNoise { tpr: 0.5, fpr: 0.5, seed: 9 });
        let req = AssessorRequest::new("q", "g7");
        assert_eq!(m.assess(&req).unwrap(), m.assess(&req).unwrap());
        assert_eq!(m.calls(), 2);
        assert!(matches!(
            m.assess(&AssessorRequest::new("other", "g1")),
            Err(AssessorError::UnknownQuery(_))
        ));
        assert_eq!(m.calls(), 3);
    }

    #[test]
    fn mock_rates_roughly_hold() {
        let m = MockAssessor::new(table(), MockNoise { tpr: 0.9, fpr: 0.1, seed: 1 });
        let highs = (0..2000)
            .filter(|i| m.assess(&AssessorRequest::new("q", format!("n{i}"))).unwrap().value() >= 0.8)
            .count();
        assert!((120..280).contains(&highs), "{highs}");
    }

    #[test]
    fn response_parsing() {
        assert_eq!(parse_response(r#"{"z_yes":0,"z_no":0}"#).unwrap().value(), 0.5);
        assert_eq!(parse_response(r#"{"score":0.7}"#).unwrap().value(), 0.7);
        assert!(matches!(parse_response(r#"{"score":1.5}"#), Err(AssessorError::ScoreOutOfRange(_))));
        assert!(matches!(parse_response(r#"{"yes":1}"#), Err(AssessorError::Malformed(_))));
        assert!(matches!(parse_response("not json"), Err(AssessorError::Malformed(_))));
    }

    #[test]
    fn request_wire_shape() {
        let mut req = AssessorRequest::new("q1", "g9");
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            format!(r#"{{"query_id":"q1","candidate_id":"g9","prompt":"{DEFAULT_PROMPT}"}}"#)
        );
        req.payload.modification_text = Some("make it red".into());
        assert!(serde_json::to_string(&req).unwrap().ends_with(r#","modification_text":"make it red"}"#));
        assert!(AssessorRequest::new("", "g").validate().is_err());
    }
}
