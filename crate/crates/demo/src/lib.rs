//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export takes plain numbers or a JSON config and returns a JSON
//! string. The `*_json` functions hold the logic so they run natively in tests.

use std::collections::HashMap;

use serde::Deserialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use cvr_core::cluster::{kmeans_fit, plan_batches, DEFAULT_MAX_ITER};
use cvr_core::pipeline::run_stages;
use cvr_core::synth::{synth_generate, SynthParams};
use cvr_core::{apply_realign, build_index, fit_realign, Embedding, Metric, MockAssessor, MockNoise, RerankConfig};

/// Sizes above this keep the page responsive on one thread.
pub const MAX_GALLERY: usize = 20_000;
pub const MAX_QUERIES: usize = 500;
pub const MAX_POINTS: usize = 5_000;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorerConfig {
    pub gallery: usize,
    pub queries: usize,
    pub dim: usize,
    pub sigma: f64,
    pub seed: u64,
    pub tpr: f64,
    pub fpr: f64,
    pub k1: usize,
    pub k2: usize,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Ranked ids shown for the first query.
    pub show: usize,
}

impl Default for ExplorerConfig {
    fn default() -> Self {
        let r = RerankConfig::default();
        Self {
            gallery: 2000,
            queries: 100,
            dim: 32,
            sigma: 0.3,
            seed: 0,
            tpr: 0.95,
            fpr: 0.05,
            k1: r.k1,
            k2: r.k2,
            delta: r.delta,
            alpha: r.alpha,
            beta: r.beta,
            show: 10,
        }
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Stage-I versus Stage-II metrics on a seeded synthetic benchmark with a
/// noisy mock assessor.
pub fn explore_rerank_json(config: &str) -> Result<Value, String> {
    let c: ExplorerConfig = if config.trim().is_empty() { ExplorerConfig::default() } else { serde_json::from_str(config).map_err(err)? };
    if c.gallery > MAX_GALLERY || c.queries > MAX_QUERIES {
        return Err(format!("demo limits: gallery <= {MAX_GALLERY}, queries <= {MAX_QUERIES}"));
    }
    let data = synth_generate(&SynthParams::new(c.gallery, c.queries, c.dim, c.sigma, c.seed)).map_err(err)?;
    let index = build_index(data.gallery, true).map_err(err)?;
    let queries = data.queries.into_iter().map(|q| q.into_query()).collect::<Result<Vec<_>, _>>().map_err(err)?;
    let noise = MockNoise { tpr: c.tpr, fpr: c.fpr, seed: c.seed };
    let assessor = MockAssessor::from_pairs(data.qrels.iter().map(|j| (j.query_id.clone(), j.targets.clone())), noise);
    let qrels: HashMap<_, _> = data.qrels.into_iter().map(|j| (j.query_id.clone(), j)).collect();
    let cfg = RerankConfig {
        k1: c.k1,
        k2: c.k2,
        delta: c.delta,
        alpha: c.alpha,
        beta: c.beta,
        ..RerankConfig::default()
    };
    let metrics = [Metric::Recall(1), Metric::Recall(5), Metric::Recall(10), Metric::RecallSubset(1)];
    let run = run_stages(&index, &queries, &qrels, &assessor, &cfg, &metrics, c.show).map_err(err)?;

    let example = run.results.first().map(|r| {
        let ids = |line: &cvr_core::rerank::RunLine| line.ranking.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        json!({
            "query_id": r.stage1.query_id,
            "targets": qrels[&r.stage1.query_id].targets,
            "stage1": ids(&r.stage1),
            "stage2": ids(&r.stage2),
            "scored": r.trace.subset.iter().map(|s| json!({"id": s.id, "score": s.score.value()})).collect::<Vec<_>>(),
            "early_terminated": r.trace.early_terminated,
        })
    });
    Ok(json!({ "comparison": run.comparison, "example": example }))
}

fn points_2d(flat: &[f32]) -> Result<Vec<[f32; 2]>, String> {
    if !flat.len().is_multiple_of(2) {
        return Err("expected interleaved x, y coordinates".into());
    }
    if flat.len() / 2 > MAX_POINTS {
        return Err(format!("demo limit: {MAX_POINTS} points"));
    }
    Ok(flat.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
}

/// k-means on 2-D points followed by a cluster-pure batch plan.
pub fn cluster_2d_json(flat: &[f32], k: usize, batch_size: usize, seed: u64) -> Result<Value, String> {
    let points = points_2d(flat)?;
    let model = kmeans_fit(&points, k, seed, DEFAULT_MAX_ITER).map_err(err)?;
    let plan = plan_batches(&model, batch_size, seed, false).map_err(err)?;
    Ok(json!({
        "assignments": model.assignments,
        "centroids": model.centroids,
        "sizes": model.cluster_sizes(),
        "inertia_history": model.inertia_history,
        "iterations": model.iterations_run,
        "batches": plan.batches.iter().map(|b| json!({"cluster": b.cluster, "samples": b.samples})).collect::<Vec<_>>(),
    }))
}

/// Fits modality statistics on two 2-D clouds and maps every text point.
pub fn realign_2d_json(text: &[f32], image: &[f32]) -> Result<Value, String> {
    let text = points_2d(text)?;
    let image = points_2d(image)?;
    let stats = fit_realign(&text, &image).map_err(err)?;
    let aligned = text
        .iter()
        .map(|p| Ok(apply_realign(&Embedding::new(p.to_vec())?, &stats)?.into_vec()))
        .collect::<Result<Vec<_>, cvr_core::Error>>()
        .map_err(err)?;
    Ok(json!({ "stats": stats, "scale": stats.scale(), "aligned": aligned }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = exploreRerank)]
pub fn explore_rerank(config: &str) -> Result<String, JsError> {
    to_js(explore_rerank_json(config))
}

#[wasm_bindgen(js_name = cluster2d)]
pub fn cluster_2d(points: &[f32], k: usize, batch_size: usize, seed: u64) -> Result<String, JsError> {
    to_js(cluster_2d_json(points, k, batch_size, seed))
}

#[wasm_bindgen(js_name = realign2d)]
pub fn realign_2d(text: &[f32], image: &[f32]) -> Result<String, JsError> {
    to_js(realign_2d_json(text, image))
}
