//! End-to-end run: index → retrieve → rerank → eval, with Stage-I and
//! Stage-II run files and a comparison report.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assessor::{Assessor, MockAssessor, MockNoise};
use crate::embedding::ScoredId;
use crate::error::{Error, Result};
use crate::gallery::{read_jsonl, write_jsonl, GalleryIndex};
use crate::metrics::{evaluate_query, load_qrels, Accumulator, Metric, QueryJudgment, Report, DEFAULT_METRICS};
use crate::rerank::{read_queries, rerank, Query, RerankConfig, RerankOutcome, RunLine, ScoredCandidate};

pub const DEFAULT_RUN_DEPTH: usize = 100;

/// Where relevance scores come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AssessorSpec {
    /// Table lookup against an oracle file in qrels format.
    Mock {
        oracle: PathBuf,
        #[serde(default = "one")]
        tpr: f64,
        #[serde(default)]
        fpr: f64,
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Remote assessor; a missing URL falls back to `CVR_ASSESSOR_URL`.
    Http {
        #[serde(default)]
        url: Option<String>,
        #[serde(default)]
        timeout_secs: Option<f64>,
        #[serde(default)]
        retries: Option<usize>,
    },
}

fn one() -> f64 {
    1.0
}

impl FromStr for AssessorSpec {
    type Err = Error;

    /// `mock:PATH[,tpr=X][,fpr=Y][,seed=N]`, `http:URL` or bare `http`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: String| Error::Config(format!("assessor `{s}`: {why}"));
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "mock" => {
                let mut parts = rest.split(',');
                let oracle = parts.next().filter(|p| !p.is_empty()).ok_or_else(|| bad("missing oracle path".into()))?;
                let (mut tpr, mut fpr, mut seed) = (1.0, 0.0, None);
                for kv in parts {
                    let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("expected key=value, got `{kv}`")))?;
                    let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad number `{v}`")));
                    match k {
                        "tpr" => tpr = num(v)?,
                        "fpr" => fpr = num(v)?,
                        "seed" => seed = Some(v.parse().map_err(|_| bad(format!("bad seed `{v}`")))?),
                        _ => return Err(bad(format!("unknown key `{k}`"))),
                    }
                }
                Ok(AssessorSpec::Mock {
                    oracle: oracle.into(),
                    tpr,
                    fpr,
                    seed,
                })
            }
            "http" | "https" => Ok(AssessorSpec::Http {
                url: (!rest.is_empty()).then(|| s.to_string()),
                timeout_secs: None,
                retries: None,
            }),
            _ => Err(bad("expected `mock:PATH` or `http:URL`".into())),
        }
    }
}

impl fmt::Display for AssessorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssessorSpec::Mock { oracle, tpr, fpr, seed } => {
                write!(f, "mock:{},tpr={tpr},fpr={fpr}", oracle.display())?;
                if let Some(s) = seed {
                    write!(f, ",seed={s}")?;
                }
                Ok(())
            }
            AssessorSpec::Http { url, .. } => f.write_str(url.as_deref().unwrap_or("http")),
        }
    }
}

/// Builds the table for a mock assessor from oracle lines.
pub fn load_oracle(path: impl AsRef<Path>, noise: MockNoise) -> Result<MockAssessor> {
    let lines: Vec<QueryJudgment> = read_jsonl(path)?;
    Ok(MockAssessor::from_pairs(lines.into_iter().map(|j| (j.query_id, j.targets)), noise))
}

impl AssessorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            AssessorSpec::Mock { oracle, tpr, fpr, .. } => {
                require_file("oracle", oracle)?;
                for (name, p) in [("tpr", tpr), ("fpr", fpr)] {
                    if !(0.0..=1.0).contains(p) {
                        return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
                    }
                }
                Ok(())
            }
            AssessorSpec::Http { timeout_secs, .. } => {
                if !cfg!(feature = "remote") {
                    return Err(Error::Config("built without remote assessor support".into()));
                }
                if self.http_url().is_none() {
                    return Err(Error::Config("http assessor needs a URL or CVR_ASSESSOR_URL".into()));
                }
                if let Some(t) = timeout_secs {
                    if !(t.is_finite() && *t > 0.0) {
                        return Err(Error::Config(format!("timeout must be positive, got {t}")));
                    }
                }
                Ok(())
            }
        }
    }

    fn http_url(&self) -> Option<String> {
        match self {
            AssessorSpec::Http { url: Some(u), .. } => Some(u.clone()),
            AssessorSpec::Http { url: None, .. } => std::env::var("CVR_ASSESSOR_URL").ok().filter(|s| !s.is_empty()),
            AssessorSpec::Mock { .. } => None,
        }
    }

    pub fn build(&self, default_seed: u64) -> Result<Box<dyn Assessor>> {
        self.validate()?;
        match self {
            AssessorSpec::Mock { oracle, tpr, fpr, seed } => {
                let noise = MockNoise {
                    tpr: *tpr,
                    fpr: *fpr,
                    seed: seed.unwrap_or(default_seed),
                };
                Ok(Box::new(load_oracle(oracle, noise)?))
            }
            #[cfg(feature = "remote")]
            AssessorSpec::Http { timeout_secs, retries, .. } => {
                use crate::assessor::{HttpAssessor, HttpAssessorConfig};
                let mut cfg = HttpAssessorConfig::new(self.http_url().expect("validated"));
                if let Some(t) = timeout_secs {
                    cfg.timeout = std::time::Duration::from_secs_f64(*t);
                }
                if let Some(r) = retries {
                    cfg.retries = *r;
                }
                Ok(Box::new(HttpAssessor::new(cfg)))
            }
            #[cfg(not(feature = "remote"))]
            AssessorSpec::Http { .. } => unreachable!("rejected by validate"),
        }
    }

    fn resolve(&mut self, base: &Path) {
        if let AssessorSpec::Mock { oracle, .. } = self {
            *oracle = base.join(&*oracle);
        }
    }
}

fn default_metrics() -> Vec<Metric> {
    Metric::parse_list(DEFAULT_METRICS).expect("default metric list parses")
}

fn default_depth() -> usize {
    DEFAULT_RUN_DEPTH
}

fn default_true() -> bool {
    true
}

/// Everything a `pipeline` run needs. Relative paths in a config file are
/// taken relative to the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Gallery in text or binary form.
    pub index: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    pub assessor: AssessorSpec,
    #[serde(default)]
    pub rerank: RerankConfig,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Normalize gallery rows on load.
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Entries kept per run-file line; `0` keeps the whole gallery. Metrics
    /// are computed on full rankings regardless.
    #[serde(default = "default_depth")]
    pub run_depth: usize,
    #[serde(default)]
    pub trace: bool,
}

fn require_file(what: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} file not found: {}", path.display())))
    }
}

impl RunConfig {
    pub fn new(index: PathBuf, queries: PathBuf, qrels: PathBuf, assessor: AssessorSpec, out_dir: PathBuf) -> Self {
        Self {
            index,
            queries,
            qrels,
            assessor,
            rerank: RerankConfig::default(),
            metrics: default_metrics(),
            out_dir,
            seed: 0,
            normalize: true,
            run_depth: DEFAULT_RUN_DEPTH,
            trace: false,
        }
    }

    pub fn from_toml_str(s: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        for p in [&mut cfg.index, &mut cfg.queries, &mut cfg.qrels, &mut cfg.out_dir] {
            *p = base.join(&*p);
        }
        cfg.assessor.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks every referenced input and parameter; runs before any compute.
    pub fn validate(&self) -> Result<()> {
        require_file("index", &self.index)?;
        require_file("queries", &self.queries)?;
        require_file("qrels", &self.qrels)?;
        self.assessor.validate()?;
        self.rerank.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.metrics.is_empty() {
            return Err(Error::Config("metric list is empty".into()));
        }
        Ok(())
    }
}

/// Audit record for one reranked query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceLine {
    pub query_id: String,
    pub refined_query: Vec<f32>,
    pub refined_window: Vec<ScoredId>,
    pub subset: Vec<ScoredCandidate>,
    pub early_terminated: bool,
    pub calls: usize,
    pub refine_fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assessor_failure: Option<String>,
}

impl TraceLine {
    pub fn from_outcome(o: &RerankOutcome) -> Self {
        let t = &o.trace;
        Self {
            query_id: t.query_id.clone(),
            refined_query: t.refined_query.as_slice().to_vec(),
            refined_window: t.refined_window.clone(),
            subset: t.subset.entries.clone(),
            early_terminated: t.subset.early_terminated,
            calls: t.subset.calls_made,
            refine_fallback: t.refine_fallback,
            assessor_failure: t.assessor_failure.clone(),
        }
    }
}

/// Per-query results; outcomes are processed as they complete so full
/// rankings are never held for every query at once.
pub fn map_queries<T, F>(queries: &[Query], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Query) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        queries.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        queries.iter().map(f).collect()
    }
}

/// Reranks every query and returns run lines cut to `depth`, with traces.
pub fn rerank_queries<A: Assessor + ?Sized>(
    queries: &[Query],
    index: &GalleryIndex,
    assessor: &A,
    cfg: &RerankConfig,
    depth: usize,
) -> Result<Vec<(RunLine, TraceLine)>> {
    cfg.validate()?;
    map_queries(queries, |q| {
        let o = rerank(q, index, assessor, cfg)?;
        Ok((RunLine::new(&q.id, &o.ranking, Some(&o.trace.subset), depth), TraceLine::from_outcome(&o)))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub stage1: RunLine,
    pub stage2: RunLine,
    pub stage1_metrics: Vec<f64>,
    pub stage2_metrics: Vec<f64>,
    pub trace: TraceLine,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub queries: usize,
    pub stage1: Report,
    pub stage2: Report,
    pub total_calls: usize,
    pub calls_per_query: f64,
    /// Fraction of queries whose scoring stopped at `k1`.
    pub early_termination_ratio: f64,
    pub assessor_failures: usize,
    pub refine_fallbacks: usize,
}

impl Comparison {
    pub fn from_results(results: &[QueryResult], metrics: &[Metric]) -> Self {
        let mut s1 = Accumulator::new(metrics);
        let mut s2 = Accumulator::new(metrics);
        let (mut calls, mut early, mut failures, mut fallbacks) = (0, 0, 0, 0);
        for r in results {
            s1.add(&r.stage1_metrics);
            s2.add(&r.stage2_metrics);
            calls += r.trace.calls;
            early += usize::from(r.trace.early_terminated);
            failures += usize::from(r.trace.assessor_failure.is_some());
            fallbacks += usize::from(r.trace.refine_fallback);
        }
        let n = results.len().max(1) as f64;
        Self {
            queries: results.len(),
            stage1: s1.finish(),
            stage2: s2.finish(),
            total_calls: calls,
            calls_per_query: calls as f64 / n,
            early_termination_ratio: early as f64 / n,
            assessor_failures: failures,
            refine_fallbacks: fallbacks,
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>9} {:>9} {:>9}\n", "metric", "stage I", "stage II", "delta");
        let rows = self
            .stage1
            .values
            .iter()
            .zip(&self.stage2.values)
            .map(|(a, b)| (a.metric.to_string(), a.value, b.value))
            .chain(std::iter::once(("avg".to_string(), self.stage1.average, self.stage2.average)));
        for (name, a, b) in rows {
            out.push_str(&format!("{name:<10} {:>9.2} {:>9.2} {:>+9.2}\n", 100.0 * a, 100.0 * b, 100.0 * (b - a)));
        }
        out.push_str(&format!(
            "queries {}  calls/query {:.2}  early-termination {:.3}  assessor failures {}\n",
            self.queries, self.calls_per_query, self.early_termination_ratio, self.assessor_failures
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRun {
    pub results: Vec<QueryResult>,
    pub comparison: Comparison,
}

/// Runs both stages in memory. Every query must have a judgment.
pub fn run_stages<A: Assessor + ?Sized>(
    index: &GalleryIndex,
    queries: &[Query],
    qrels: &HashMap<String, QueryJudgment>,
    assessor: &A,
    cfg: &RerankConfig,
    metrics: &[Metric],
    depth: usize,
) -> Result<StageRun> {
    cfg.validate()?;
    if let Some(q) = queries.iter().find(|q| !qrels.contains_key(&q.id)) {
        return Err(Error::MissingJudgment(q.id.clone()).in_stage("eval"));
    }
    let results = map_queries(queries, |q| {
        let o = rerank(q, index, assessor, cfg).map_err(|e| e.in_stage("rerank"))?;
        let j = &qrels[&q.id];
        let eval = |r| evaluate_query(r, j, metrics).map_err(|e| e.in_stage("eval"));
        Ok(QueryResult {
            stage1_metrics: eval(&o.trace.initial)?,
            stage2_metrics: eval(&o.ranking)?,
            stage1: RunLine::new(&q.id, &o.trace.initial, None, depth),
            stage2: RunLine::new(&q.id, &o.ranking, Some(&o.trace.subset), depth),
            trace: TraceLine::from_outcome(&o),
        })
    })?;
    let comparison = Comparison::from_results(&results, metrics);
    Ok(StageRun { results, comparison })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineArtifacts {
    pub stage1_run: PathBuf,
    pub stage2_run: PathBuf,
    pub report_json: PathBuf,
    pub report_table: PathBuf,
    pub trace: Option<PathBuf>,
}

impl PipelineArtifacts {
    fn in_dir(dir: &Path, trace: bool) -> Self {
        Self {
            stage1_run: dir.join("stage1.run.jsonl"),
            stage2_run: dir.join("stage2.run.jsonl"),
            report_json: dir.join("comparison.json"),
            report_table: dir.join("comparison.txt"),
            trace: trace.then(|| dir.join("trace.jsonl")),
        }
    }
}

/// Validates `cfg`, then runs every stage and writes the artifacts. Errors
/// carry the stage that raised them.
pub fn run_pipeline(cfg: &RunConfig) -> Result<(Comparison, PipelineArtifacts)> {
    cfg.validate()?;
    let index = GalleryIndex::load(&cfg.index, cfg.normalize).map_err(|e| e.in_stage("index"))?;
    let queries = read_queries(&cfg.queries).map_err(|e| e.in_stage("retrieve"))?;
    let qrels = load_qrels(&cfg.qrels).map_err(|e| e.in_stage("eval"))?;
    let assessor = cfg.assessor.build(cfg.seed).map_err(|e| e.in_stage("rerank"))?;

    let run = run_stages(&index, &queries, &qrels, assessor.as_ref(), &cfg.rerank, &cfg.metrics, cfg.run_depth)?;

    let write = |cfg: &RunConfig| -> Result<PipelineArtifacts> {
        fs::create_dir_all(&cfg.out_dir)?;
        let art = PipelineArtifacts::in_dir(&cfg.out_dir, cfg.trace);
        write_jsonl(&art.stage1_run, run.results.iter().map(|r| &r.stage1))?;
        write_jsonl(&art.stage2_run, run.results.iter().map(|r| &r.stage2))?;
        let mut json = serde_json::to_string_pretty(&run.comparison)?;
        json.push('\n');
        fs::write(&art.report_json, json)?;
        fs::write(&art.report_table, run.comparison.to_table())?;
        if let Some(t) = &art.trace {
            write_jsonl(t, run.results.iter().map(|r| &r.trace))?;
        }
        Ok(art)
    };
    let art = write(cfg).map_err(|e| e.in_stage("write"))?;
    Ok((run.comparison, art))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, SynthParams};

    fn fixture(dir: &Path, sigma: f64) -> RunConfig {
        let paths = synth_generate(&SynthParams::new(400, 30, 16, sigma, 9)).unwrap().write(dir).unwrap();
        let spec = AssessorSpec::Mock {
            oracle: paths.oracle,
            tpr: 1.0,
            fpr: 0.0,
            seed: None,
        };
        let mut cfg = RunConfig::new(paths.gallery, paths.queries, paths.qrels, spec, dir.join("out"));
        cfg.metrics = Metric::parse_list("r@1,r@5,rs@1,map@10").unwrap();
        cfg
    }

    #[test]
    fn disabled_budget_reports_match() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fixture(dir.path(), 0.3);
        cfg.rerank = RerankConfig::disabled();
        let (cmp, art) = run_pipeline(&cfg).unwrap();
        assert_eq!(cmp.stage1, cmp.stage2);
        assert_eq!(cmp.total_calls, 0);
        assert_eq!(fs::read(&art.stage1_run).unwrap(), fs::read(&art.stage2_run).unwrap());
    }

    #[test]
    fn noiseless_oracle_does_not_hurt_r1() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path(), 0.3);
        let (cmp, _) = run_pipeline(&cfg).unwrap();
        let r1 = Metric::Recall(1);
        assert!(cmp.stage2.get(r1).unwrap() >= cmp.stage1.get(r1).unwrap());
        assert!(cmp.calls_per_query >= 20.0 && cmp.calls_per_query <= 40.0);
    }

    #[test]
    fn artifacts_are_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fixture(dir.path(), 0.3);
        cfg.trace = true;
        let (_, a) = run_pipeline(&cfg).unwrap();
        let first: Vec<Vec<u8>> = [&a.stage1_run, &a.stage2_run, &a.report_json, a.trace.as_ref().unwrap()]
            .iter()
            .map(|p| fs::read(p).unwrap())
            .collect();
        let (_, b) = run_pipeline(&cfg).unwrap();
        let second: Vec<Vec<u8>> = [&b.stage1_run, &b.stage2_run, &b.report_json, b.trace.as_ref().unwrap()]
            .iter()
            .map(|p| fs::read(p).unwrap())
            .collect();
        assert_eq!(first, second);
    }

    #[test]
    fn missing_qrels_fails_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fixture(dir.path(), 0.3);
        cfg.qrels = dir.path().join("nope.jsonl");
        assert!(matches!(run_pipeline(&cfg), Err(Error::Config(m)) if m.contains("qrels")));
        assert!(!cfg.out_dir.exists());
    }

    #[test]
    fn missing_judgment_is_stage_tagged() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path(), 0.3);
        let lines: Vec<QueryJudgment> = read_jsonl(&cfg.qrels).unwrap();
        write_jsonl(&cfg.qrels, &lines[1..]).unwrap();
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage: "eval", .. }), "{err}");
    }

    #[test]
    fn assessor_spec_strings() {
        let m: AssessorSpec = "mock:o.jsonl,tpr=0.9,fpr=0.1,seed=4".parse().unwrap();
        assert_eq!(
            m,
            AssessorSpec::Mock {
                oracle: "o.jsonl".into(),
                tpr: 0.9,
                fpr: 0.1,
                seed: Some(4)
            }
        );
        assert_eq!(m.to_string().parse::<AssessorSpec>().unwrap(), m);
        let h: AssessorSpec = "http://localhost:8080".parse().unwrap();
        assert!(matches!(h, AssessorSpec::Http { url: Some(u), .. } if u == "http://localhost:8080"));
        for bad in ["mock:", "mock:o,tpr", "mock:o,zzz=1", "ftp:x", ""] {
            assert!(bad.parse::<AssessorSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn toml_config_resolves_relative_paths() {
        let text = r#"
index = "g.jsonl"
queries = "q.jsonl"
qrels = "r.jsonl"
out_dir = "out"
seed = 3
metrics = ["r@1", "map@5"]

[rerank]
k1 = 10
k2 = 20

[assessor]
kind = "mock"
oracle = "o.jsonl"
tpr = 0.95
"#;
        let cfg = RunConfig::from_toml_str(text, Path::new("/data")).unwrap();
        assert_eq!(cfg.index, Path::new("/data/g.jsonl"));
        assert_eq!(cfg.rerank.k1, 10);
        assert_eq!(cfg.rerank.delta, 0.7);
        assert_eq!(cfg.metrics, [Metric::Recall(1), Metric::Map(5)]);
        assert!(matches!(&cfg.assessor, AssessorSpec::Mock { oracle, fpr, .. } if oracle == Path::new("/data/o.jsonl") && *fpr == 0.0));
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml(), Path::new("")).unwrap(), cfg);
        assert!(RunConfig::from_toml_str("index = 1", Path::new("")).is_err());
    }
}
