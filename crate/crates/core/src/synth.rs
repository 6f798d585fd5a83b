//! Seeded synthetic benchmark: a unit-sphere gallery, queries planted near
//! distinct targets, qrels with CIRR-style candidate subsets, and an oracle
//! file for the mock assessor.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::embedding::normalize_f64;
use crate::error::{Error, Result};
use crate::gallery::{write_jsonl, EmbeddingRecord};
use crate::metrics::QueryJudgment;
use crate::rerank::QueryRecord;
use crate::rng::{derive_seed, seeded, Rng};

pub const DEFAULT_SUBSET_SIZE: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n_gallery: usize,
    pub n_queries: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of the query noise.
    pub sigma: f64,
    pub seed: u64,
    /// Target plus distractors per qrels subset; `0` omits subsets.
    pub subset_size: usize,
}

impl SynthParams {
    pub fn new(n_gallery: usize, n_queries: usize, dim: usize, sigma: f64, seed: u64) -> Self {
        Self {
            n_gallery,
            n_queries,
            dim,
            sigma,
            seed,
            subset_size: DEFAULT_SUBSET_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 || self.n_gallery <= self.n_queries {
            return Err(Error::invalid(format!(
                "need gallery size > queries >= 1 (got {} and {})",
                self.n_gallery, self.n_queries
            )));
        }
        if self.dim < 2 {
            return Err(Error::invalid(format!("dim must be at least 2, got {}", self.dim)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if self.subset_size > self.n_gallery {
            return Err(Error::invalid("subset size exceeds gallery size"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub gallery: Vec<EmbeddingRecord>,
    pub queries: Vec<QueryRecord>,
    pub qrels: Vec<QueryJudgment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPaths {
    pub gallery: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    pub oracle: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            gallery: dir.join("gallery.jsonl"),
            queries: dir.join("queries.jsonl"),
            qrels: dir.join("qrels.jsonl"),
            oracle: dir.join("oracle.jsonl"),
        }
    }
}

fn id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

fn gaussian_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize_f64(&mut v).is_ok() {
            return v;
        }
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Gallery, targets, noise and subsets use independent streams derived from
/// `seed`, so e.g. changing `sigma` keeps the gallery and targets fixed.
pub fn synth_generate(p: &SynthParams) -> Result<SynthData> {
    p.validate()?;
    let gw = id_width(p.n_gallery);
    let qw = id_width(p.n_queries);

    let mut rng = seeded(derive_seed(p.seed, &[b"gallery"]));
    let rows: Vec<Vec<f64>> = (0..p.n_gallery).map(|_| gaussian_unit(&mut rng, p.dim)).collect();
    let gallery: Vec<EmbeddingRecord> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| EmbeddingRecord::new(format!("g{i:0gw$}"), to_f32(r)))
        .collect();

    let mut rng = seeded(derive_seed(p.seed, &[b"targets"]));
    let targets = sample(&mut rng, p.n_gallery, p.n_queries).into_vec();

    let mut noise_rng = seeded(derive_seed(p.seed, &[b"noise"]));
    let mut subset_rng = seeded(derive_seed(p.seed, &[b"subsets"]));
    let mut queries = Vec::with_capacity(p.n_queries);
    let mut qrels = Vec::with_capacity(p.n_queries);
    for (qi, &t) in targets.iter().enumerate() {
        let qid = format!("q{qi:0qw$}");
        let mut v: Vec<f64> = rows[t]
            .iter()
            .map(|&x| x + p.sigma * noise_rng.sample::<f64, _>(StandardNormal))
            .collect();
        if normalize_f64(&mut v).is_err() {
            v = rows[t].clone();
        }
        queries.push(QueryRecord {
            id: qid.clone(),
            vec: to_f32(&v),
            payload: Default::default(),
        });

        let subset = (p.subset_size > 0).then(|| {
            let mut members = vec![gallery[t].id.clone()];
            for j in sample(&mut subset_rng, p.n_gallery - 1, p.subset_size - 1) {
                let row = if j >= t { j + 1 } else { j };
                members.push(gallery[row].id.clone());
            }
            members.sort();
            members
        });
        qrels.push(QueryJudgment {
            query_id: qid,
            targets: vec![gallery[t].id.clone()],
            subset,
        });
    }
    Ok(SynthData { gallery, queries, qrels })
}

impl SynthData {
    /// Writes the four files; the oracle file repeats the qrels without
    /// subsets.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SynthPaths> {
        fs::create_dir_all(dir.as_ref())?;
        let paths = SynthPaths::in_dir(dir);
        write_jsonl(&paths.gallery, &self.gallery)?;
        write_jsonl(&paths.queries, &self.queries)?;
        write_jsonl(&paths.qrels, &self.qrels)?;
        write_jsonl(
            &paths.oracle,
            self.qrels.iter().map(|j| QueryJudgment::new(j.query_id.clone(), j.targets.clone())),
        )?;
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{top_k, Embedding};
    use crate::gallery::build_index;

    fn mean_target_rank(data: &SynthData) -> f64 {
        let index = build_index(data.gallery.clone(), true).unwrap();
        let total: usize = data
            .queries
            .iter()
            .zip(&data.qrels)
            .map(|(q, j)| {
                let e = Embedding::new(q.vec.clone()).unwrap();
                top_k(&e, &index, index.len()).unwrap().rank_of(&j.targets[0]).unwrap()
            })
            .sum();
        total as f64 / data.queries.len() as f64
    }

    #[test]
    fn zero_noise_puts_target_first() {
        let data = synth_generate(&SynthParams::new(300, 40, 8, 0.0, 5)).unwrap();
        assert_eq!(mean_target_rank(&data), 1.0);
    }

    #[test]
    fn heavy_noise_buries_target() {
        let data = synth_generate(&SynthParams::new(2000, 50, 16, 2.0, 5)).unwrap();
        assert!(mean_target_rank(&data) > 50.0);
    }

    #[test]
    fn shapes_and_subsets() {
        let data = synth_generate(&SynthParams::new(100, 10, 4, 0.1, 1)).unwrap();
        assert_eq!(data.gallery.len(), 100);
        assert_eq!(data.gallery[7].id, "g07");
        assert_eq!(data.queries[3].id, "q3");
        let mut targets: Vec<&str> = data.qrels.iter().map(|j| j.targets[0].as_str()).collect();
        targets.sort();
        targets.dedup();
        assert_eq!(targets.len(), 10);
        for j in &data.qrels {
            j.validate().unwrap();
            let sub = j.subset.as_ref().unwrap();
            assert_eq!(sub.len(), DEFAULT_SUBSET_SIZE);
            let mut d = sub.clone();
            d.dedup();
            assert_eq!(d.len(), sub.len());
        }
        for q in &data.queries {
            assert!(Embedding::new(q.vec.clone()).unwrap().is_unit());
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let p = SynthParams::new(50, 5, 3, 0.3, 77);
        let pa = synth_generate(&p).unwrap().write(a.path()).unwrap();
        let pb = synth_generate(&p).unwrap().write(b.path()).unwrap();
        for (x, y) in [
            (&pa.gallery, &pb.gallery),
            (&pa.queries, &pb.queries),
            (&pa.qrels, &pb.qrels),
            (&pa.oracle, &pb.oracle),
        ] {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let other = synth_generate(&SynthParams { seed: 78, ..p }).unwrap();
        assert_ne!(other, synth_generate(&SynthParams::new(50, 5, 3, 0.3, 77)).unwrap());
    }

    #[test]
    fn parameter_errors() {
        for p in [
            SynthParams::new(10, 10, 4, 0.1, 0),
            SynthParams::new(10, 0, 4, 0.1, 0),
            SynthParams::new(10, 2, 1, 0.1, 0),
            SynthParams::new(10, 2, 4, -1.0, 0),
            SynthParams::new(10, 2, 4, f64::NAN, 0),
        ] {
            assert!(synth_generate(&p).is_err(), "{p:?}");
        }
    }
}
