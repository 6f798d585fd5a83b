use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use cvr_core::cluster::write_assignments;
use cvr_core::contrastive::{train_projector, Activation, TrainConfig};
use cvr_core::gallery::{build_index, read_records, write_jsonl, write_records, EmbeddingRecord, GalleryIndex};
use cvr_core::metrics::{evaluate_files, Metric};
use cvr_core::pipeline::{map_queries, rerank_queries, run_pipeline, AssessorSpec, RunConfig};
use cvr_core::realign::{apply_realign, fit_realign};
use cvr_core::rerank::{initial_ranking, read_queries, RerankConfig, RunLine};
use cvr_core::synth::{synth_generate, SynthParams};
use cvr_core::{Embedding, Error};

use crate::{
    ActivationArg, BudgetArgs, Command, EvalArgs, Format, IndexArgs, PipelineArgs, RealignArgs, RerankArgs, RetrieveArgs,
    SynthArgs, TrainArgs,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Index(a) => index(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Rerank(a) => rerank(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::RealignFit(a) => realign_fit(a),
        Command::TrainProjector(a) => train(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

fn require(what: &str, path: &Path) -> Result<(), Error> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} file not found: {}", path.display())))
    }
}

fn stage(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| e.in_stage(name)
}

fn parse_metrics(s: &str) -> Result<Vec<Metric>, Error> {
    Metric::parse_list(s).map_err(|e| Error::Config(e.to_string()))
}

fn index(a: IndexArgs) -> Result<()> {
    require("input", &a.input)?;
    let records = read_records(&a.input).map_err(stage("index"))?;
    let index = build_index(records, !a.no_normalize).map_err(stage("index"))?;
    match a.format {
        Format::Binary => index.save_binary(&a.out),
        Format::Text => index.save_text(&a.out),
    }
    .map_err(stage("index"))?;
    eprintln!("indexed {} rows of dim {} -> {}", index.len(), index.dim(), a.out.display());
    Ok(())
}

fn load_index(path: &Path) -> Result<GalleryIndex, Error> {
    GalleryIndex::load(path, true).map_err(stage("index"))
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    require("index", &a.index)?;
    require("queries", &a.queries)?;
    if a.k == 0 {
        return Err(Error::Config("--k must be at least 1".into()).into());
    }
    let index = load_index(&a.index)?;
    let queries = read_queries(&a.queries).map_err(stage("retrieve"))?;
    let lines = map_queries(&queries, |q| {
        let ranking = initial_ranking(q, &index, a.k)?;
        Ok(RunLine::new(&q.id, &ranking, None, 0))
    })
    .map_err(stage("retrieve"))?;
    write_jsonl(&a.out, &lines).map_err(stage("retrieve"))?;
    eprintln!("retrieved top-{} for {} queries -> {}", a.k, lines.len(), a.out.display());
    Ok(())
}

fn apply_budget(cfg: &mut RerankConfig, b: &BudgetArgs) {
    if let Some(v) = b.k1 {
        cfg.k1 = v;
    }
    if let Some(v) = b.k2 {
        cfg.k2 = v;
    }
    if let Some(v) = b.delta {
        cfg.delta = v;
    }
    if let Some(v) = b.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = b.beta {
        cfg.beta = v;
    }
    if let Some(v) = b.parallelism {
        cfg.parallelism = v;
    }
}

fn assessor_spec(flag: Option<&str>) -> Result<AssessorSpec, Error> {
    match flag {
        Some(s) => s.parse(),
        None => Ok(AssessorSpec::Http {
            url: None,
            timeout_secs: None,
            retries: None,
        }),
    }
}

fn rerank(a: RerankArgs) -> Result<()> {
    require("index", &a.index)?;
    require("queries", &a.queries)?;
    let spec = assessor_spec(a.assessor.as_deref())?;
    spec.validate()?;
    let mut cfg = RerankConfig::default();
    apply_budget(&mut cfg, &a.budget);
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;

    let index = load_index(&a.index)?;
    let queries = read_queries(&a.queries).map_err(stage("retrieve"))?;
    let assessor = spec.build(a.seed).map_err(stage("rerank"))?;
    let out = rerank_queries(&queries, &index, assessor.as_ref(), &cfg, a.run_depth).map_err(stage("rerank"))?;

    write_jsonl(&a.out, out.iter().map(|(line, _)| line)).map_err(stage("rerank"))?;
    if let Some(path) = &a.trace {
        write_jsonl(path, out.iter().map(|(_, t)| t)).map_err(stage("rerank"))?;
    }
    let n = out.len().max(1) as f64;
    let calls: usize = out.iter().map(|(l, _)| l.calls).sum();
    let early = out.iter().filter(|(l, _)| l.early_terminated).count();
    let failures = out.iter().filter(|(_, t)| t.assessor_failure.is_some()).count();
    eprintln!(
        "reranked {} queries: {:.2} calls/query, early-termination {:.3}, assessor failures {failures} -> {}",
        out.len(),
        calls as f64 / n,
        early as f64 / n,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    require("run", &a.run)?;
    require("qrels", &a.qrels)?;
    let metrics = parse_metrics(&a.metrics)?;
    let report = evaluate_files(&a.run, &a.qrels, &metrics).map_err(stage("eval"))?;
    print!("{}", report.to_table());
    if let Some(path) = &a.report {
        fs::write(path, report.to_json_lines()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let params = SynthParams {
        subset_size: a.subset_size,
        ..SynthParams::new(a.gallery_size, a.queries, a.dim, a.sigma, a.seed)
    };
    params.validate().map_err(|e| Error::Config(e.to_string()))?;
    let data = synth_generate(&params)?;
    let paths = data.write(&a.out_dir)?;
    if a.binary {
        build_index(data.gallery, true)?.save_binary(a.out_dir.join("gallery.cvre"))?;
    }
    eprintln!(
        "wrote {}, {}, {}, {}",
        paths.gallery.display(),
        paths.queries.display(),
        paths.qrels.display(),
        paths.oracle.display()
    );
    Ok(())
}

fn realign_fit(a: RealignArgs) -> Result<()> {
    require("text", &a.text)?;
    require("image", &a.image)?;
    if let Some(p) = &a.apply {
        require("apply", p)?;
    }
    let text = read_records(&a.text)?;
    let image = read_records(&a.image)?;
    let tv: Vec<&[f32]> = text.iter().map(|r| r.vec.as_slice()).collect();
    let iv: Vec<&[f32]> = image.iter().map(|r| r.vec.as_slice()).collect();
    let stats = fit_realign(&tv, &iv)?;
    stats.save(&a.out)?;
    eprintln!(
        "fit on {} text / {} image samples, scale {:.6} -> {}",
        stats.n_txt,
        stats.n_img,
        stats.scale(),
        a.out.display()
    );
    if let (Some(input), Some(out)) = (&a.apply, &a.apply_out) {
        let mapped = read_records(input)?
            .into_iter()
            .map(|r| {
                let e = apply_realign(&Embedding::new(r.vec)?, &stats)?;
                Ok(EmbeddingRecord::new(r.id, e.into_vec()))
            })
            .collect::<Result<Vec<_>, Error>>()?;
        write_records(out, mapped)?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    require("pooled", &a.pooled)?;
    require("targets", &a.targets)?;
    let pooled = read_records(&a.pooled)?;
    let mut targets: HashMap<String, Vec<f32>> = read_records(&a.targets)?.into_iter().map(|r| (r.id, r.vec)).collect();
    let mut ids = Vec::with_capacity(pooled.len());
    let mut xs = Vec::with_capacity(pooled.len());
    let mut ts = Vec::with_capacity(pooled.len());
    for r in pooled {
        let t = targets
            .remove(&r.id)
            .ok_or_else(|| Error::UnknownId(format!("{} (no target embedding)", r.id)))?;
        ids.push(r.id);
        xs.push(r.vec);
        ts.push(t);
    }
    let cfg = TrainConfig {
        clusters: a.clusters,
        batch_size: a.batch_size,
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        drop_last: a.drop_last,
        cosine_anneal: a.cosine_anneal,
        hidden: a.hidden,
        activation: match a.activation {
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::Gelu => Activation::Gelu,
        },
        init_tau: a.tau,
        ..TrainConfig::default()
    };
    let report = train_projector(&xs, &ts, &cfg)?;
    report.projector.save(&a.out)?;
    if let Some(path) = &a.assignments {
        write_assignments(path, &ids, &report.clusters)?;
    }
    if let Some(path) = &a.log {
        let log = serde_json::json!({
            "epoch_mean_loss": report.epoch_mean_loss,
            "losses": report.state.losses,
            "tau": report.projector.tau(),
            "cluster_sizes": report.clusters.cluster_sizes(),
        });
        fs::write(path, format!("{log}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    for (e, l) in report.epoch_mean_loss.iter().enumerate() {
        eprintln!("epoch {e}: mean loss {l:.6}");
    }
    eprintln!(
        "{} steps, tau {:.4}, {} parameters -> {}",
        report.state.step,
        report.projector.tau(),
        report.projector.param_count(),
        a.out.display()
    );
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    require("config", &a.config)?;
    let mut cfg = RunConfig::load(&a.config)?;
    apply_budget(&mut cfg.rerank, &a.budget);
    if let Some(s) = &a.assessor {
        cfg.assessor = s.parse()?;
    }
    if let Some(m) = &a.metrics {
        cfg.metrics = parse_metrics(m)?;
    }
    if let Some(d) = a.out_dir {
        cfg.out_dir = d;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.run_depth {
        cfg.run_depth = d;
    }
    cfg.trace |= a.trace;
    let (cmp, art) = run_pipeline(&cfg)?;
    print!("{}", cmp.to_table());
    eprintln!("wrote {} and {}", art.stage1_run.display(), art.stage2_run.display());
    Ok(())
}
