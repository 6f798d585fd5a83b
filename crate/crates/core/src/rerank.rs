//! Stage-II reranking.
//!
//! 1. Budgeted scoring: the assessor scores the top `k1` candidates; if none
//!    scores above `delta` the window is extended to the top `k2`.
//! 2. Global re-scoring: the query moves toward the score-weighted centroid
//!    of the scored candidates, `e_q' = ℓ₂((1−α)·e_q + α·Σ s_g e_g / Σ s_g)`,
//!    and the whole gallery is re-scored against `e_q'`.
//! 3. Local re-scoring: inside the scored window, min-max normalized refined
//!    similarities are blended with the assessor scores,
//!    `r* = (1−β)·(r − r_min)/(r_max − r_min) + β·s`; everything outside the
//!    window keeps its refined similarity.

use serde::{Deserialize, Serialize};

use crate::assessor::{Assessor, AssessorError, AssessorRequest, Payload, RelevanceScore, DEFAULT_PROMPT};
use crate::embedding::{l2_normalize, normalize_f64, rank_rows, score_all, Embedding, RankedList, ScoredId};
use crate::error::{Error, Result};
use crate::gallery::GalleryIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    pub k1: usize,
    pub k2: usize,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Max concurrent assessor calls within one window.
    pub parallelism: usize,
    /// Initial ranking depth the scoring windows may draw from; `None` is the
    /// whole gallery.
    pub depth: Option<usize>,
    pub prompt: String,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 40,
            delta: 0.7,
            alpha: 0.2,
            beta: 0.3,
            parallelism: 1,
            depth: None,
            prompt: DEFAULT_PROMPT.to_string(),
        }
    }
}

impl RerankConfig {
    /// `k1 = k2 = 0` turns Stage II off.
    pub fn disabled() -> Self {
        Self {
            k1: 0,
            k2: 0,
            ..Self::default()
        }
    }

    pub fn with_budget(mut self, k1: usize, k2: usize) -> Self {
        self.k1 = k1;
        self.k2 = k2;
        self
    }

    pub fn is_disabled(&self) -> bool {
        self.k1 == 0 && self.k2 == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.is_disabled() || (0 < self.k1 && self.k1 < self.k2)) {
            return Err(Error::invalid(format!(
                "budget must be 0/0 or satisfy 0 < k1 < k2 (got {}/{})",
                self.k1, self.k2
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.parallelism == 0 {
            return Err(Error::invalid("parallelism must be at least 1"));
        }
        if self.depth == Some(0) {
            return Err(Error::invalid("depth must be at least 1"));
        }
        Ok(())
    }
}

/// Early-termination test. Strict: a score equal to `delta` does not stop.
#[inline]
pub fn exceeds_threshold(score: f64, delta: f64) -> bool {
    score > delta
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub id: String,
    pub score: RelevanceScore,
    /// 1-based position in the initial ranking.
    pub original_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ScoredSubset {
    pub entries: Vec<ScoredCandidate>,
    pub early_terminated: bool,
    pub calls_made: usize,
}

impl ScoredSubset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A composed query as seen by the engine: an embedding plus references the
/// assessor may need.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: String,
    pub embedding: Embedding,
    pub payload: Payload,
}

impl Query {
    pub fn new(id: impl Into<String>, embedding: Embedding) -> Self {
        Self {
            id: id.into(),
            embedding,
            payload: Payload::default(),
        }
    }
}

fn request(query: &Query, candidate: &str, prompt: &str) -> AssessorRequest {
    AssessorRequest {
        query_id: query.id.clone(),
        candidate_id: candidate.to_string(),
        prompt: prompt.to_string(),
        payload: query.payload.clone(),
    }
}

/// Scores a contiguous window; results come back in window order whatever
/// the parallelism.
fn score_window<A: Assessor + ?Sized>(
    query: &Query,
    window: &[ScoredId],
    assessor: &A,
    prompt: &str,
    parallelism: usize,
) -> std::result::Result<Vec<RelevanceScore>, AssessorError> {
    if parallelism <= 1 || window.len() <= 1 {
        return window
            .iter()
            .map(|c| assessor.assess(&request(query, &c.id, prompt)))
            .collect();
    }
    let chunk = window.len().div_ceil(parallelism);
    std::thread::scope(|scope| {
        let handles: Vec<_> = window
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|c| assessor.assess(&request(query, &c.id, prompt)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(window.len());
        for h in handles {
            for r in h.join().expect("assessor thread panicked") {
                out.push(r?);
            }
        }
        Ok(out)
    })
}

/// Adaptive budgeted scoring over the head of `initial`.
pub fn budgeted_score<A: Assessor + ?Sized>(
    query: &Query,
    initial: &RankedList,
    assessor: &A,
    cfg: &RerankConfig,
) -> std::result::Result<ScoredSubset, AssessorError> {
    if cfg.is_disabled() || initial.is_empty() {
        return Ok(ScoredSubset::default());
    }
    let avail = cfg.depth.map_or(initial.len(), |d| d.min(initial.len()));
    let n1 = cfg.k1.min(avail);
    let n2 = cfg.k2.min(avail).max(n1);
    let head = initial.entries();

    let mut scores = score_window(query, &head[..n1], assessor, &cfg.prompt, cfg.parallelism)?;
    let early = scores.iter().any(|s| exceeds_threshold(s.value(), cfg.delta));
    if !early {
        scores.extend(score_window(query, &head[n1..n2], assessor, &cfg.prompt, cfg.parallelism)?);
    }
    let entries: Vec<ScoredCandidate> = head
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (c, score))| ScoredCandidate {
            id: c.id.clone(),
            score,
            original_rank: i + 1,
        })
        .collect();
    Ok(ScoredSubset {
        calls_made: entries.len(),
        entries,
        early_terminated: early,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedQuery {
    pub embedding: Embedding,
    /// Set when the weighted centroid was degenerate and `e_q` was kept.
    pub fallback: bool,
}

/// Pulls `e_q` toward the score-weighted centroid of the scored candidates.
///
/// An empty subset or `alpha = 0` returns `e_q` untouched (for a unit `e_q`,
/// `ℓ₂(e_q) = e_q`, and skipping the renormalization keeps it bit-exact).
pub fn refine_query(e_q: &Embedding, subset: &ScoredSubset, index: &GalleryIndex, alpha: f64) -> Result<RefinedQuery> {
    if e_q.dim() != index.dim() {
        return Err(Error::DimMismatch {
            expected: index.dim(),
            actual: e_q.dim(),
        });
    }
    let unchanged = |fallback| RefinedQuery {
        embedding: e_q.clone(),
        fallback,
    };
    if subset.is_empty() || alpha == 0.0 {
        return Ok(unchanged(false));
    }
    let total: f64 = subset.entries.iter().map(|c| c.score.value()).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Ok(unchanged(true));
    }
    let mut centroid = vec![0.0f64; index.dim()];
    for c in &subset.entries {
        let row = index.lookup(&c.id)?;
        let w = c.score.value();
        for (acc, &x) in centroid.iter_mut().zip(row) {
            *acc += w * f64::from(x);
        }
    }
    let mut v: Vec<f64> = e_q
        .as_slice()
        .iter()
        .zip(&centroid)
        .map(|(&q, c)| (1.0 - alpha) * f64::from(q) + alpha * (c / total))
        .collect();
    match normalize_f64(&mut v) {
        Ok(_) => Ok(RefinedQuery {
            embedding: Embedding::from_f64(&v)?,
            fallback: false,
        }),
        Err(Error::ZeroNorm) => Ok(unchanged(true)),
        Err(e) => Err(e),
    }
}

/// Cosine similarity of the refined query with every gallery row, in row order.
pub fn global_rescore(e_q_prime: &Embedding, index: &GalleryIndex) -> Result<Vec<f64>> {
    score_all(e_q_prime.as_slice(), index)
}

/// Injects assessor scores into the scored window and ranks the whole gallery.
///
/// `refined` is row-aligned with `index`. A flat window (`r_max = r_min`)
/// gets 0.5 as its normalized term.
pub fn local_rescore(index: &GalleryIndex, refined: &[f64], subset: &ScoredSubset, beta: f64) -> Result<RankedList> {
    if refined.len() != index.len() {
        return Err(Error::DimMismatch {
            expected: index.len(),
            actual: refined.len(),
        });
    }
    let mut fused = refined.to_vec();
    let rows = subset
        .entries
        .iter()
        .map(|c| index.row_of(&c.id).ok_or_else(|| Error::UnknownId(c.id.clone())))
        .collect::<Result<Vec<_>>>()?;
    if !rows.is_empty() {
        let (lo, hi) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(refined[r]), hi.max(refined[r])));
        for (&row, c) in rows.iter().zip(&subset.entries) {
            let normalized = if hi > lo { (refined[row] - lo) / (hi - lo) } else { 0.5 };
            fused[row] = (1.0 - beta) * normalized + beta * c.score.value();
        }
    }
    Ok(rank_rows(index, &fused, index.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankTrace {
    pub query_id: String,
    pub initial: RankedList,
    pub refined_query: Embedding,
    /// Refined similarity `r_g` for each scored candidate, in window order.
    pub refined_window: Vec<ScoredId>,
    pub subset: ScoredSubset,
    pub refine_fallback: bool,
    /// Set when the assessor failed; the final ranking is then the initial one.
    pub assessor_failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    pub ranking: RankedList,
    pub trace: RerankTrace,
}

/// The full Stage-II pass for one query. The returned ranking always covers
/// the whole gallery.
pub fn rerank<A: Assessor + ?Sized>(query: &Query, index: &GalleryIndex, assessor: &A, cfg: &RerankConfig) -> Result<RerankOutcome> {
    cfg.validate()?;
    if index.is_empty() {
        return Err(Error::Empty("gallery index"));
    }
    let e_q = l2_normalize(&query.embedding)?;
    let initial_scores = score_all(e_q.as_slice(), index)?;
    let initial = rank_rows(index, &initial_scores, index.len());

    let mut trace = RerankTrace {
        query_id: query.id.clone(),
        initial: initial.clone(),
        refined_query: e_q.clone(),
        refined_window: Vec::new(),
        subset: ScoredSubset::default(),
        refine_fallback: false,
        assessor_failure: None,
    };
    if cfg.is_disabled() {
        return Ok(RerankOutcome { ranking: initial, trace });
    }

    let subset = match budgeted_score(query, &initial, assessor, cfg) {
        Ok(s) => s,
        Err(e) => {
            trace.assessor_failure = Some(e.to_string());
            return Ok(RerankOutcome { ranking: initial, trace });
        }
    };
    let refined = refine_query(&e_q, &subset, index, cfg.alpha)?;
    let r = global_rescore(&refined.embedding, index)?;
    let ranking = local_rescore(index, &r, &subset, cfg.beta)?;

    trace.refined_window = subset
        .entries
        .iter()
        .map(|c| ScoredId::new(c.id.clone(), r[index.row_of(&c.id).expect("scored ids come from the index")]))
        .collect();
    trace.refined_query = refined.embedding;
    trace.refine_fallback = refined.fallback;
    trace.subset = subset;
    Ok(RerankOutcome { ranking, trace })
}

/// Stage-I only: the initial cosine ranking of the normalized query.
pub fn initial_ranking(query: &Query, index: &GalleryIndex, depth: usize) -> Result<RankedList> {
    crate::embedding::top_k(&l2_normalize(&query.embedding)?, index, depth)
}

/// One line of a run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLine {
    pub query_id: String,
    pub ranking: Vec<ScoredId>,
    #[serde(default)]
    pub early_terminated: bool,
    #[serde(default)]
    pub calls: usize,
}

impl RunLine {
    /// Run line for `ranking`, cut to `depth` entries (`0` keeps all).
    pub fn new(query_id: impl Into<String>, ranking: &RankedList, subset: Option<&ScoredSubset>, depth: usize) -> Self {
        let n = if depth == 0 { ranking.len() } else { depth.min(ranking.len()) };
        Self {
            query_id: query_id.into(),
            ranking: ranking.entries()[..n].to_vec(),
            early_terminated: subset.is_some_and(|s| s.early_terminated),
            calls: subset.map_or(0, |s| s.calls_made),
        }
    }

    pub fn ranked(&self) -> Result<RankedList> {
        RankedList::from_sorted(self.ranking.clone())
    }
}

/// One line of a query file: `{"id", "vec", "reference_visual"?, "modification_text"?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub vec: Vec<f32>,
    #[serde(flatten)]
    pub payload: Payload,
}

impl QueryRecord {
    pub fn into_query(self) -> Result<Query> {
        let embedding = Embedding::new(self.vec).map_err(|e| match e {
            Error::NonFinite { .. } => Error::non_finite(format!("query `{}`", self.id)),
            other => other,
        })?;
        Ok(Query {
            id: self.id,
            embedding,
            payload: self.payload,
        })
    }
}

impl From<&Query> for QueryRecord {
    fn from(q: &Query) -> Self {
        Self {
            id: q.id.clone(),
            vec: q.embedding.as_slice().to_vec(),
            payload: q.payload.clone(),
        }
    }
}

/// Reads a query file; ids must be unique.
pub fn read_queries(path: impl AsRef<std::path::Path>) -> Result<Vec<Query>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for rec in crate::gallery::read_jsonl::<QueryRecord>(path)? {
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        out.push(rec.into_query()?);
    }
    if out.is_empty() {
        return Err(Error::Empty("query file"));
    }
    Ok(out)
}
