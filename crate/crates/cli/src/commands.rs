use std::fs;
use std::io::Write;
use std::path::Path;

use nar_core::bench_data::{
    first_unlabeled, generate_synthetic, load_records, split_indices, RecordSpace,
};
use nar_core::checkpoint;
use nar_core::encoding::{ArchitectureRecord, EncodingLayout};
use nar_core::model::Nar;
use nar_core::search::{search as run_search, NarRanker, SearchSummary};
use nar_core::trainer::{build_labels, kendall_tau, train as run_train, TrainedRanker};
use serde::Serialize;

use crate::config::RunConfig;
use crate::Failure;

pub struct Context {
    pub config: RunConfig,
    /// Verbatim text of the config file, if one was given.
    pub original: Option<String>,
    pub seed_flag: Option<u64>,
}

fn prepare_out(ctx: &Context) -> Result<(), Failure> {
    let out = &ctx.config.out;
    fs::create_dir_all(out)
        .map_err(|e| Failure::config(format!("creating {}: {e}", out.display())))?;
    let resolved = serde_json::to_string_pretty(&ctx.config).expect("serializable config");
    fs::write(out.join("config.json"), resolved + "\n")?;
    if let Some(text) = &ctx.original {
        fs::write(out.join("config.input.json"), text)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable output");
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Records from the configured file, or the configured synthetic space.
fn records(config: &RunConfig, layout: &EncodingLayout) -> Result<Vec<ArchitectureRecord>, Failure> {
    match &config.records {
        Some(path) => {
            if !path.exists() {
                return Err(Failure::data(format!("record file {} not found", path.display())));
            }
            Ok(load_records(path, layout)?)
        }
        None => {
            if layout != &config.synthetic.layout() {
                return Err(Failure::config(format!(
                    "profile {:?} needs a record file",
                    config.profile
                )));
            }
            Ok(generate_synthetic(&config.synthetic)?.into_space().records().to_vec())
        }
    }
}

fn require_labels(records: &[ArchitectureRecord]) -> Result<(), Failure> {
    if let Some(r) = first_unlabeled(records) {
        return Err(Failure::data(format!("record {} has no accuracy", r.id)));
    }
    Ok(())
}

pub fn synth(ctx: &Context) -> Result<(), Failure> {
    let mut spec = ctx.config.synthetic.clone();
    if let Some(seed) = ctx.seed_flag {
        spec.seed = seed;
    }
    let space = generate_synthetic(&spec)?;
    prepare_out(ctx)?;
    let path = ctx.config.out.join("space.jsonl");
    nar_core::bench_data::write_records(&path, space.space().records())?;
    write_json(&ctx.config.out.join("oracle.json"), &space.weights)?;
    println!("wrote {} structures to {}", space.space().len(), path.display());
    Ok(())
}

pub fn train(ctx: &Context) -> Result<(), Failure> {
    let c = &ctx.config;
    let layout = c.layout();
    let all = records(c, &layout)?;
    require_labels(&all)?;
    let split = split_indices(all.len(), &c.split, c.seed)?;
    let train_set: Vec<ArchitectureRecord> = split.train.iter().map(|&i| all[i].clone()).collect();
    prepare_out(ctx)?;
    let model = Nar::new(c.model.clone(), c.seed)?;
    let (ranker, log) = run_train(model, c.train.clone(), layout, &train_set)?;
    checkpoint::save(&ranker, &c.checkpoint_path())?;

    let mut w = std::io::BufWriter::new(fs::File::create(c.out.join("train_log.jsonl"))?);
    for entry in &log {
        serde_json::to_writer(&mut w, entry).map_err(|e| Failure::data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let ids: Vec<&str> = split.train.iter().map(|&i| all[i].id.as_str()).collect();
    write_json(&c.out.join("train_ids.json"), &ids)?;
    if !split.validation.is_empty() {
        let val: Vec<&ArchitectureRecord> = split.validation.iter().map(|&i| &all[i]).collect();
        let heldout: Vec<ArchitectureRecord> = val.iter().map(|&r| r.clone()).collect();
        nar_core::bench_data::write_records(&c.out.join("heldout.jsonl"), &heldout)?;
        let metrics = ranker.validate(&val)?;
        write_json(&c.out.join("metrics.json"), &metrics)?;
        println!(
            "validation on {}: kendall tau {:.4}, tier accuracy {:.4}, adjacent-tier accuracy {:.4}",
            metrics.count, metrics.kendall_tau, metrics.tier_accuracy, metrics.adjacent_tier_accuracy
        );
    }
    println!(
        "trained {} iterations on {} records; checkpoint {}",
        log.len(),
        train_set.len(),
        c.checkpoint_path().display()
    );
    Ok(())
}

fn load_ranker(c: &RunConfig) -> Result<TrainedRanker, Failure> {
    let path = c.checkpoint_path();
    if !path.exists() {
        return Err(Failure::data(format!("checkpoint {} not found", path.display())));
    }
    Ok(checkpoint::load(&path)?)
}

#[derive(Serialize)]
struct RepeatSummary {
    runs: Vec<SearchSummary>,
    best_accuracy_mean: f64,
    best_accuracy_std: f64,
    best_rank_mean: Option<f64>,
    best_permille_mean: Option<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn search(ctx: &Context) -> Result<(), Failure> {
    let c = &ctx.config;
    let ranker = load_ranker(c)?;
    let all = records(c, &ranker.layout)?;
    require_labels(&all)?;
    let space = RecordSpace::new(ranker.layout, all)?;
    let mut config = c.search.clone();
    config.sample_size = config.sample_size.max(config.top_k);
    prepare_out(ctx)?;
    let mut runs = Vec::with_capacity(c.repeats);
    for r in 0..c.repeats {
        config.seed = c.seed + r as u64;
        let mut nar = NarRanker {
            inner: ranker.clone(),
        };
        let report = run_search(&mut nar, &ranker.buckets, &space, &space, &config)?;
        report.write_jsonl(&c.out.join(format!("search_seed{}.jsonl", config.seed)))?;
        let s = &report.summary;
        println!(
            "seed {}: best {} accuracy {:.6} rank {} ({:.3} permille), {} queries",
            config.seed,
            s.best_id.as_deref().unwrap_or("-"),
            s.best_accuracy.unwrap_or(f64::NAN),
            s.best_rank.map_or("-".into(), |r| r.to_string()),
            s.best_permille.unwrap_or(f64::NAN),
            s.queries
        );
        runs.push(report.summary);
    }
    let acc: Vec<f64> = runs.iter().filter_map(|s| s.best_accuracy).collect();
    if acc.is_empty() {
        return Err(Failure::data("no search run evaluated any architecture"));
    }
    let (mean, std) = mean_std(&acc);
    let ranks: Vec<f64> = runs.iter().filter_map(|s| s.best_rank).map(|r| r as f64).collect();
    let permille: Vec<f64> = runs.iter().filter_map(|s| s.best_permille).collect();
    let summary = RepeatSummary {
        best_accuracy_mean: mean,
        best_accuracy_std: std,
        best_rank_mean: (!ranks.is_empty()).then(|| mean_std(&ranks).0),
        best_permille_mean: (!permille.is_empty()).then(|| mean_std(&permille).0),
        runs,
    };
    write_json(&c.out.join("summary.json"), &summary)?;
    println!("best accuracy {mean:.6} ± {std:.6} over {} runs", c.repeats);
    Ok(())
}

#[derive(Serialize)]
struct ScatterRow {
    id: String,
    score: f64,
    accuracy: f64,
    true_rank: usize,
    true_tier: usize,
    predicted_tier: usize,
}

#[derive(Serialize)]
struct EvalMetrics {
    count: usize,
    kendall_tau: f64,
    tier_accuracy: f64,
    adjacent_tier_accuracy: f64,
}

pub fn eval(ctx: &Context) -> Result<(), Failure> {
    let c = &ctx.config;
    let ranker = load_ranker(c)?;
    let recs = records(c, &ranker.layout)?;
    if recs.is_empty() {
        return Err(Failure::data("record file is empty"));
    }
    require_labels(&recs)?;
    let refs: Vec<&ArchitectureRecord> = recs.iter().collect();
    let pred = ranker.predict(&refs)?;
    let truths: Vec<f64> = recs.iter().map(|r| r.test_accuracy().expect("labelled")).collect();
    let ids: Vec<&str> = recs.iter().map(|r| r.id.as_str()).collect();
    let tiers = ranker.model.config().tiers;
    let true_tiers = if recs.len() >= tiers {
        build_labels(&truths, &ids, tiers)?
    } else {
        vec![0; recs.len()]
    };
    let mut order: Vec<usize> = (0..recs.len()).collect();
    order.sort_by(|&a, &b| truths[b].total_cmp(&truths[a]).then_with(|| ids[a].cmp(ids[b])));
    let mut rank = vec![0; recs.len()];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos + 1;
    }
    let predicted = pred.tiers();
    let rows: Vec<ScatterRow> = (0..recs.len())
        .map(|i| ScatterRow {
            id: recs[i].id.clone(),
            score: pred.scores[i],
            accuracy: truths[i],
            true_rank: rank[i],
            true_tier: true_tiers[i],
            predicted_tier: predicted[i],
        })
        .collect();
    let (tier_accuracy, adjacent_tier_accuracy) =
        nar_core::trainer::tier_agreement(&predicted, &true_tiers)?;
    let metrics = EvalMetrics {
        count: recs.len(),
        kendall_tau: kendall_tau(&pred.scores, &truths)?,
        tier_accuracy,
        adjacent_tier_accuracy,
    };
    prepare_out(ctx)?;
    write_json(&c.out.join("eval_metrics.json"), &metrics)?;
    write_json(&c.out.join("scatter.json"), &rows)?;
    let mut csv = String::from("id,score,accuracy,true_rank,true_tier,predicted_tier\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id, r.score, r.accuracy, r.true_rank, r.true_tier, r.predicted_tier
        ));
    }
    fs::write(c.out.join("scatter.csv"), csv)?;
    println!(
        "kendall tau {:.4} over {} records (tier accuracy {:.4})",
        metrics.kendall_tau, metrics.count, metrics.tier_accuracy
    );
    Ok(())
}
