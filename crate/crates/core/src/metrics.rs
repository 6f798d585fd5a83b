//! Retrieval metrics: R@k, R_subset@k and mAP@k, plus run-level aggregation.
//!
//! AP@k is normalized by `min(|targets|, k)`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::RankedList;
use crate::error::{Error, Result};
use crate::gallery::read_jsonl;
use crate::rerank::RunLine;

/// One qrels line: `{"query_id": .., "targets": [..], "subset": [..]?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryJudgment {
    pub query_id: String,
    pub targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<String>>,
}

impl QueryJudgment {
    pub fn new(query_id: impl Into<String>, targets: Vec<String>) -> Self {
        Self {
            query_id: query_id.into(),
            targets,
            subset: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::invalid(format!("query `{}` has no targets", self.query_id)));
        }
        if let Some(sub) = &self.subset {
            if !sub.iter().any(|s| self.targets.contains(s)) {
                return Err(Error::invalid(format!(
                    "subset of query `{}` contains no target",
                    self.query_id
                )));
            }
        }
        Ok(())
    }

    fn target_set(&self) -> HashSet<&str> {
        self.targets.iter().map(String::as_str).collect()
    }
}

fn check(ranking: &RankedList, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if ranking.is_empty() {
        return Err(Error::Empty("ranking"));
    }
    Ok(())
}

fn hit_in_top_k<'a>(ids: impl Iterator<Item = &'a str>, targets: &HashSet<&str>, k: usize) -> f64 {
    if ids.take(k).any(|id| targets.contains(id)) {
        1.0
    } else {
        0.0
    }
}

pub fn recall_at_k(ranking: &RankedList, j: &QueryJudgment, k: usize) -> Result<f64> {
    check(ranking, k)?;
    Ok(hit_in_top_k(ranking.ids(), &j.target_set(), k))
}

/// The ranking restricted to the judgment's subset, relative order kept.
pub fn restrict_to_subset<'a>(ranking: &'a RankedList, j: &QueryJudgment) -> Result<Vec<&'a str>> {
    let subset = j
        .subset
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("query `{}` has no subset", j.query_id)))?;
    let members: HashSet<&str> = subset.iter().map(String::as_str).collect();
    let restricted: Vec<&str> = ranking.ids().filter(|id| members.contains(id)).collect();
    if restricted.len() != members.len() {
        let present: HashSet<&str> = restricted.iter().copied().collect();
        let missing = subset.iter().find(|m| !present.contains(m.as_str())).expect("some member is missing");
        return Err(Error::invalid(format!(
            "subset member `{missing}` of query `{}` is missing from the ranking (rank the full gallery for rs@k)",
            j.query_id
        )));
    }
    Ok(restricted)
}

pub fn recall_subset_at_k(ranking: &RankedList, j: &QueryJudgment, k: usize) -> Result<f64> {
    check(ranking, k)?;
    let restricted = restrict_to_subset(ranking, j)?;
    Ok(hit_in_top_k(restricted.into_iter(), &j.target_set(), k))
}

pub fn map_at_k(ranking: &RankedList, j: &QueryJudgment, k: usize) -> Result<f64> {
    check(ranking, k)?;
    let targets = j.target_set();
    if targets.is_empty() {
        return Err(Error::invalid(format!("query `{}` has no targets", j.query_id)));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.ids().take(k).enumerate() {
        if targets.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / targets.len().min(k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Recall(usize),
    RecallSubset(usize),
    Map(usize),
}

impl Metric {
    pub fn evaluate(self, ranking: &RankedList, j: &QueryJudgment) -> Result<f64> {
        match self {
            Metric::Recall(k) => recall_at_k(ranking, j, k),
            Metric::RecallSubset(k) => recall_subset_at_k(ranking, j, k),
            Metric::Map(k) => map_at_k(ranking, j, k),
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        let list = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Metric>>>()?;
        if list.is_empty() {
            return Err(Error::invalid("empty metric list"));
        }
        Ok(list)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Recall(k) => write!(f, "r@{k}"),
            Metric::RecallSubset(k) => write!(f, "rs@{k}"),
            Metric::Map(k) => write!(f, "map@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown metric `{s}` (expected r@k, rs@k or map@k)"));
        let (name, k) = s.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match name.to_ascii_lowercase().as_str() {
            "r" | "recall" => Ok(Metric::Recall(k)),
            "rs" | "r_subset" => Ok(Metric::RecallSubset(k)),
            "map" => Ok(Metric::Map(k)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub const DEFAULT_METRICS: &str = "r@1,r@5,r@10,r@50";

/// Running per-metric sums; queries are added in a fixed order so the means
/// are reproducible.
#[derive(Debug, Clone)]
pub struct Accumulator {
    metrics: Vec<Metric>,
    sums: Vec<f64>,
    n: usize,
}

impl Accumulator {
    pub fn new(metrics: &[Metric]) -> Self {
        Self {
            metrics: metrics.to_vec(),
            sums: vec![0.0; metrics.len()],
            n: 0,
        }
    }

    pub fn add(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.sums.len());
        for (s, v) in self.sums.iter_mut().zip(values) {
            *s += v;
        }
        self.n += 1;
    }

    pub fn finish(&self) -> Report {
        let n = self.n.max(1) as f64;
        let values: Vec<MetricValue> = self
            .metrics
            .iter()
            .zip(&self.sums)
            .map(|(&metric, s)| MetricValue { metric, value: s / n })
            .collect();
        let average = if values.is_empty() {
            0.0
        } else {
            values.iter().map(|v| v.value).sum::<f64>() / values.len() as f64
        };
        Report {
            values,
            average,
            queries: self.n,
        }
    }
}

pub fn evaluate_query(ranking: &RankedList, j: &QueryJudgment, metrics: &[Metric]) -> Result<Vec<f64>> {
    metrics.iter().map(|m| m.evaluate(ranking, j)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub values: Vec<MetricValue>,
    /// Mean of the per-metric means.
    pub average: f64,
    pub queries: usize,
}

impl Report {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.values.iter().find(|v| v.metric == metric).map(|v| v.value)
    }

    /// `{"metric": .., "value": ..}` per line, ending with the average as `avg`.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for v in &self.values {
            out.push_str(&serde_json::to_string(v).expect("metric value serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::json!({"metric": "avg", "value": self.average}).to_string());
        out.push('\n');
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>9}\n", "metric", "value");
        for v in &self.values {
            out.push_str(&format!("{:<10} {:>9.2}\n", v.metric.to_string(), 100.0 * v.value));
        }
        out.push_str(&format!("{:<10} {:>9.2}\n", "avg", 100.0 * self.average));
        out.push_str(&format!("({} queries)\n", self.queries));
        out
    }
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<HashMap<String, QueryJudgment>> {
    let mut map = HashMap::new();
    for j in read_jsonl::<QueryJudgment>(path)? {
        j.validate()?;
        if map.contains_key(&j.query_id) {
            return Err(Error::DuplicateId(j.query_id));
        }
        map.insert(j.query_id.clone(), j);
    }
    Ok(map)
}

/// Evaluates every run line; a run query without a judgment is an error.
pub fn evaluate_run(run: &[RunLine], qrels: &HashMap<String, QueryJudgment>, metrics: &[Metric]) -> Result<Report> {
    let per_query = |line: &RunLine| -> Result<Vec<f64>> {
        let j = qrels
            .get(&line.query_id)
            .ok_or_else(|| Error::MissingJudgment(line.query_id.clone()))?;
        evaluate_query(&line.ranked()?, j, metrics)
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Result<Vec<f64>>> = {
        use rayon::prelude::*;
        run.par_iter().map(per_query).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Result<Vec<f64>>> = run.iter().map(per_query).collect();

    let mut acc = Accumulator::new(metrics);
    for row in rows {
        acc.add(&row?);
    }
    Ok(acc.finish())
}

pub fn evaluate_files(run: impl AsRef<Path>, qrels: impl AsRef<Path>, metrics: &[Metric]) -> Result<Report> {
    let qrels = load_qrels(qrels)?;
    let run: Vec<RunLine> = read_jsonl(run)?;
    evaluate_run(&run, &qrels, metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ScoredId;

    fn ranking(ids: &[&str]) -> RankedList {
        let n = ids.len() as f64;
        RankedList::from_sorted(ids.iter().enumerate().map(|(i, id)| ScoredId::new(*id, n - i as f64)).collect()).unwrap()
    }

    fn judge(targets: &[&str]) -> QueryJudgment {
        QueryJudgment::new("q", targets.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn recall_examples() {
        let r = ranking(&["a", "t", "b", "c"]);
        assert_eq!(recall_at_k(&r, &judge(&["t"]), 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&r, &judge(&["t"]), 10).unwrap(), 1.0);
        for k in 1..5 {
            assert_eq!(recall_at_k(&r, &judge(&["a", "c"]), k).unwrap(), 1.0);
        }
        assert!(recall_at_k(&r, &judge(&["t"]), 0).is_err());
        assert!(recall_at_k(&RankedList::default(), &judge(&["t"]), 1).is_err());
    }

    #[test]
    fn recall_mean_over_two_queries() {
        let mut acc = Accumulator::new(&[Metric::Recall(1)]);
        acc.add(&[recall_at_k(&ranking(&["t", "x"]), &judge(&["t"]), 1).unwrap()]);
        acc.add(&[recall_at_k(&ranking(&["x", "t"]), &judge(&["t"]), 1).unwrap()]);
        assert_eq!(acc.finish().values[0].value, 0.5);
    }

    #[test]
    fn subset_examples() {
        let r = ranking(&["x", "s1", "y", "t", "s2", "s3", "z"]);
        let mut j = judge(&["t"]);
        j.subset = Some(vec!["s1".into(), "t".into(), "s2".into(), "s3".into()]);
        assert_eq!(recall_subset_at_k(&r, &j, 1).unwrap(), 0.0);
        assert_eq!(recall_subset_at_k(&r, &j, 2).unwrap(), 1.0);

        let mut full = judge(&["t"]);
        full.subset = Some(r.ids().map(String::from).collect());
        for k in 1..8 {
            assert_eq!(recall_subset_at_k(&r, &full, k).unwrap(), recall_at_k(&r, &full, k).unwrap());
        }

        let mut only = judge(&["t"]);
        only.subset = Some(vec!["t".into()]);
        assert_eq!(recall_subset_at_k(&r, &only, 1).unwrap(), 1.0);

        let mut missing = judge(&["t"]);
        missing.subset = Some(vec!["t".into(), "nope".into()]);
        assert!(recall_subset_at_k(&r, &missing, 1).is_err());
        assert!(recall_subset_at_k(&r, &judge(&["t"]), 1).is_err());
    }

    #[test]
    fn map_examples() {
        let r = ranking(&["t1", "a", "t2", "b", "c", "d"]);
        let ap = map_at_k(&r, &judge(&["t1", "t2"]), 5).unwrap();
        assert!((ap - 0.833_333_333_333).abs() < 1e-9);
        assert_eq!(map_at_k(&r, &judge(&["zz"]), 5).unwrap(), 0.0);
        assert_eq!(map_at_k(&r, &judge(&["t1"]), 5).unwrap(), 1.0);
        assert_eq!(map_at_k(&r, &judge(&["t2"]), 5).unwrap(), 1.0 / 3.0);
        // k smaller than |targets| caps the normalizer at k.
        assert_eq!(map_at_k(&r, &judge(&["t1", "a", "zz"]), 2).unwrap(), 1.0);
    }

    #[test]
    fn metric_names_roundtrip() {
        let list = Metric::parse_list("r@1, r@5,rs@1,map@10").unwrap();
        assert_eq!(list, [Metric::Recall(1), Metric::Recall(5), Metric::RecallSubset(1), Metric::Map(10)]);
        let names: Vec<String> = list.iter().map(ToString::to_string).collect();
        assert_eq!(names, ["r@1", "r@5", "rs@1", "map@10"]);
        for bad in ["r@0", "p@5", "r5", "map@x", ""] {
            assert!(Metric::parse_list(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn report_average_and_lines() {
        let mut acc = Accumulator::new(&[Metric::Recall(1), Metric::Recall(5)]);
        acc.add(&[0.4, 0.6]);
        let rep = acc.finish();
        assert!((rep.average - 0.5).abs() < 1e-15);
        assert_eq!(
            rep.to_json_lines(),
            "{\"metric\":\"r@1\",\"value\":0.4}\n{\"metric\":\"r@5\",\"value\":0.6}\n{\"metric\":\"avg\",\"value\":0.5}\n"
        );
        assert!(rep.to_table().contains("avg"));
    }

    #[test]
    fn run_evaluation() {
        let line = |q: &str, ids: &[&str]| RunLine {
            query_id: q.into(),
            ranking: ranking(ids).into_entries(),
            early_terminated: false,
            calls: 0,
        };
        let qrels = HashMap::from([
            ("q1".to_string(), QueryJudgment::new("q1", vec!["a".into()])),
            ("q2".to_string(), QueryJudgment::new("q2", vec!["c".into()])),
        ]);
        let run = [line("q1", &["a", "b", "c"]), line("q2", &["a", "b", "c"])];
        let rep = evaluate_run(&run, &qrels, &[Metric::Recall(1), Metric::Recall(3)]).unwrap();
        assert_eq!(rep.get(Metric::Recall(1)), Some(0.5));
        assert_eq!(rep.get(Metric::Recall(3)), Some(1.0));
        assert!(matches!(
            evaluate_run(&[line("q3", &["a"])], &qrels, &[Metric::Recall(1)]),
            Err(Error::MissingJudgment(q)) if q == "q3"
        ));
    }

    #[test]
    fn judgment_validation() {
        assert!(judge(&[]).validate().is_err());
        let mut j = judge(&["t"]);
        j.subset = Some(vec!["x".into()]);
        assert!(j.validate().is_err());
    }
}
