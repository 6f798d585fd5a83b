//! Vector primitives shared by every stage: normalization, cosine similarity
//! and exact top-k selection over a [`GalleryIndex`].
//!
//! Components are stored as `f32`; every reduction (dot products, norms)
//! accumulates in `f64`, sequentially and in component order. Scores that
//! come out of [`top_k`], [`cosine_sim`] and the rerank stages therefore agree
//! bit-for-bit whenever they see the same pair of vectors.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::GalleryIndex;

/// Tolerance on `|‖e‖₂ − 1|` for vectors produced by a normalizing operation.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// A fixed-dimension vector with finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("embedding"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("embedding component {i}")));
        }
        Ok(Self(values))
    }

    /// Builds an embedding from `f64` components, rounding to `f32`.
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + f64::from(x) * f64::from(y))
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine from a precomputed dot product and norms, clamped to `[-1, 1]`.
#[inline]
pub(crate) fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// Normalizes an `f64` vector in place and returns its original norm.
pub(crate) fn normalize_f64(v: &mut [f64]) -> Result<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !n.is_finite() {
        return Err(Error::non_finite("vector norm"));
    }
    if n == 0.0 {
        return Err(Error::ZeroNorm);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(n)
}

pub fn l2_normalize(e: &Embedding) -> Result<Embedding> {
    let mut v: Vec<f64> = e.as_slice().iter().map(|&x| f64::from(x)).collect();
    normalize_f64(&mut v)?;
    Embedding::from_f64(&v)
}

pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine_slices(a.as_slice(), b.as_slice())
}

pub(crate) fn cosine_slices(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(cosine_from_parts(dot(a, b), na, nb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
}

impl ScoredId {
    pub fn new(id: impl Into<String>, score: f64) -> Self {
        Self {
            id: id.into(),
            score,
        }
    }
}

/// Descending score, then ascending id.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

/// Scores non-increasing, ties by ascending id, ids unique.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedList {
    entries: Vec<ScoredId>,
}

impl RankedList {
    /// Sorts arbitrary scored ids into ranking order.
    pub fn from_unsorted(mut entries: Vec<ScoredId>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !e.score.is_finite() {
                return Err(Error::non_finite(format!("score of `{}`", e.id)));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        entries.sort_by(|a, b| rank_order(a.score, &a.id, b.score, &b.id));
        Ok(Self { entries })
    }

    /// Accepts entries that are already in ranking order, verifying it.
    pub fn from_sorted(entries: Vec<ScoredId>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if !e.score.is_finite() {
                return Err(Error::non_finite(format!("score of `{}`", e.id)));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if i > 0 {
                let prev = &entries[i - 1];
                if rank_order(prev.score, &prev.id, e.score, &e.id) != Ordering::Less {
                    return Err(Error::invalid(format!(
                        "ranking out of order at position {i} (`{}`)",
                        e.id
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub(crate) fn from_sorted_unchecked(entries: Vec<ScoredId>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[ScoredId] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id).map(|p| p + 1)
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }

    pub fn into_entries(self) -> Vec<ScoredId> {
        self.entries
    }
}

/// Cosine similarity of `query` against every gallery row, in row order.
pub(crate) fn score_all(query: &[f32], index: &GalleryIndex) -> Result<Vec<f64>> {
    if query.len() != index.dim() {
        return Err(Error::DimMismatch {
            expected: index.dim(),
            actual: query.len(),
        });
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let score_row = |row: usize| cosine_from_parts(dot(query, index.row(row)), qn, index.row_norm(row));

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok((0..index.len()).into_par_iter().map(score_row).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok((0..index.len()).map(score_row).collect())
    }
}

/// Ranks rows by per-row scores and keeps the first `k`.
pub(crate) fn rank_rows(index: &GalleryIndex, scores: &[f64], k: usize) -> RankedList {
    let cmp = |&a: &usize, &b: &usize| rank_order(scores[a], index.id(a), scores[b], index.id(b));
    let mut rows: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(rows.len());
    if k == 0 {
        return RankedList::default();
    }
    if k < rows.len() {
        rows.select_nth_unstable_by(k - 1, cmp);
        rows.truncate(k);
    }
    rows.sort_unstable_by(cmp);
    RankedList::from_sorted_unchecked(
        rows.into_iter()
            .map(|r| ScoredId::new(index.id(r), scores[r]))
            .collect(),
    )
}

/// Exact brute-force top-k by cosine similarity.
pub fn top_k(query: &Embedding, index: &GalleryIndex, k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if index.is_empty() {
        return Err(Error::Empty("gallery index"));
    }
    let scores = score_all(query.as_slice(), index)?;
    Ok(rank_rows(index, &scores, k))
}
