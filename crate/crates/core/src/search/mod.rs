//! Search without a controller: tier-1 statistics propose constraints,
//! cells are sampled under them, and the ranker picks candidates to query.

mod sampler;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use sampler::{sample_cell_dag, sample_cell_dag7, sample_cell_fixed4, sample_constraint};

use crate::bench_data::{CellStructure, Oracle, RecordSpace};
use crate::encoding::{ArchitectureRecord, Family};
use crate::error::{Error, Result};
use crate::tiers::{select_distribution, BatchHistogram, Selection, SelectionRule, TierBucket};
use crate::trainer::TrainedRanker;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    /// Every sample drawn uniformly from the space.
    Random,
    /// A random share plus constraint-guided samples with KL-gated selection.
    Statistics,
    /// Like `Statistics`, but constraints always come from tier 1's interval.
    Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub iterations: usize,
    /// Samples classified per iteration.
    pub sample_size: usize,
    /// Share of each iteration's samples drawn uniformly from the space.
    pub random_fraction: f64,
    /// Guided samples sharing one pair of constraints.
    pub reuse: usize,
    pub top_k: usize,
    pub rule: SelectionRule,
    pub mode: SearchMode,
    /// Rejections tolerated per guided sample before accepting anyway.
    pub retry_cap: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            iterations: 50,
            sample_size: 256,
            random_fraction: 0.5,
            reuse: 25,
            top_k: 5,
            rule: SelectionRule::default(),
            mode: SearchMode::Statistics,
            retry_cap: 20,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.random_fraction) {
            return Err(Error::invalid(format!(
                "random_fraction {} outside [0, 1]",
                self.random_fraction
            )));
        }
        if self.sample_size == 0 || self.iterations == 0 || self.top_k == 0 || self.reuse == 0 {
            return Err(Error::invalid(
                "iterations, sample_size, top_k and reuse must be positive",
            ));
        }
        if self.reuse > self.sample_size || self.top_k > self.sample_size {
            return Err(Error::invalid(format!(
                "reuse {} and top_k {} must not exceed sample_size {}",
                self.reuse, self.top_k, self.sample_size
            )));
        }
        Ok(())
    }

    /// Number of uniformly drawn samples per iteration.
    pub fn random_count(&self) -> usize {
        let p = match self.mode {
            SearchMode::Random => 1.0,
            _ => self.random_fraction,
        };
        ((p * self.sample_size as f64).ceil() as usize).min(self.sample_size)
    }
}

/// Predicted tiers (0-based, 0 best) and scores for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub tiers: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Anything that can sort samples into tiers and score them. Implementations
/// may update internal state (such as tier embeddings) after each call.
pub trait Ranker {
    fn classify(&mut self, records: &[&ArchitectureRecord]) -> Result<Ranked>;
}

/// The trained network; tier embeddings follow its own predictions.
pub struct NarRanker {
    pub inner: TrainedRanker,
}

impl Ranker for NarRanker {
    fn classify(&mut self, records: &[&ArchitectureRecord]) -> Result<Ranked> {
        let pred = self.inner.predict(records)?;
        let tiers = pred.tiers();
        for (t, bucket) in self.inner.buckets.iter_mut().enumerate() {
            let members: Vec<_> = tiers
                .iter()
                .zip(&pred.features)
                .filter(|(p, _)| **p == t)
                .map(|(_, f)| f.clone())
                .collect();
            bucket.update_embedding(&members)?;
        }
        Ok(Ranked {
            tiers,
            scores: pred.scores,
        })
    }
}

/// Classifier that knows the answer: tiers are true global quantiles of the
/// space and the score is the accuracy itself. Upper bound for the loop.
pub struct PerfectRanker<'a> {
    pub space: &'a RecordSpace,
    pub tiers: usize,
}

impl Ranker for PerfectRanker<'_> {
    fn classify(&mut self, records: &[&ArchitectureRecord]) -> Result<Ranked> {
        let n = self.space.len();
        let mut tiers = Vec::with_capacity(records.len());
        let mut scores = Vec::with_capacity(records.len());
        for r in records {
            let rank = self.space.true_rank(&r.id)?.rank;
            tiers.push((rank - 1) * self.tiers / n);
            scores.push(r.test_accuracy().unwrap_or(0.0));
        }
        Ok(Ranked { tiers, scores })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub predicted_tier: usize,
    pub score: f64,
    pub accuracy: Option<f64>,
    pub cached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub random_samples: usize,
    pub guided_samples: usize,
    /// Guided samples accepted only because the retry cap was reached.
    pub forced_accepts: usize,
    /// Predicted-tier population of the classified samples.
    pub tier_counts: Vec<usize>,
    pub candidates: Vec<Candidate>,
    pub best_id: Option<String>,
    pub best_accuracy: Option<f64>,
    pub best_rank: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub mode: SearchMode,
    pub seed: u64,
    pub iterations: usize,
    pub top_k: usize,
    /// Candidate evaluations, counted once per candidate per iteration.
    pub queries: usize,
    pub unique_queries: usize,
    pub cache_hits: usize,
    pub space_size: usize,
    pub best_id: Option<String>,
    pub best_accuracy: Option<f64>,
    pub best_rank: Option<usize>,
    pub best_permille: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub iterations: Vec<IterationReport>,
    pub summary: SearchSummary,
}

impl SearchReport {
    /// One JSON line per iteration followed by `{"summary": …}`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for it in &self.iterations {
            out.push_str(&serde_json::to_string(it)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({ "summary": self.summary }))?);
        out.push('\n');
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_jsonl()?.as_bytes())?;
        w.flush()?;
        Ok(())
    }
}

/// Round-robin view of the frozen per-batch histograms.
struct Statistics<'a> {
    flops: Vec<&'a [BatchHistogram]>,
    params: Vec<&'a [BatchHistogram]>,
    op_dist: Vec<f64>,
    cursor_flops: usize,
    cursor_params: usize,
}

impl<'a> Statistics<'a> {
    fn new(buckets: &'a [TierBucket], codes: &[u8]) -> Result<Self> {
        let top = buckets
            .first()
            .ok_or_else(|| Error::invalid("no tier buckets"))?;
        if top.flops_log.is_empty() || top.params_log.is_empty() {
            return Err(Error::invalid("tier 1 collected no histograms"));
        }
        Ok(Statistics {
            flops: buckets.iter().map(|b| b.flops_log.as_slice()).collect(),
            params: buckets.iter().map(|b| b.params_log.as_slice()).collect(),
            op_dist: top.op_distribution(codes),
            cursor_flops: 0,
            cursor_params: 0,
        })
    }

    fn select(logs: &[&[BatchHistogram]], cursor: usize, mode: SearchMode, rule: &SelectionRule) -> Result<Selection> {
        let idx = cursor % logs[0].len();
        let at: Vec<Option<&BatchHistogram>> = logs.iter().map(|l| l.get(idx)).collect();
        let top = at[0].expect("tier 1 histogram");
        match mode {
            SearchMode::Interval => Ok(Selection::IntervalOnly {
                lo: top.tau_min,
                hi: top.tau_max,
            }),
            _ => select_distribution(&at, top.batch_size, rule),
        }
    }

    fn next_bounds<R: Rng + ?Sized>(&mut self, mode: SearchMode, rule: &SelectionRule, rng: &mut R) -> Result<(f64, f64)> {
        let f = Self::select(&self.flops, self.cursor_flops, mode, rule)?;
        let p = Self::select(&self.params, self.cursor_params, mode, rule)?;
        self.cursor_flops += 1;
        self.cursor_params += 1;
        Ok((sample_constraint(&f, rng)?, sample_constraint(&p, rng)?))
    }
}

fn sample_structure<R: Rng + ?Sized>(
    space: &RecordSpace,
    max_edges: usize,
    op_dist: &[f64],
    rng: &mut R,
) -> Result<CellStructure> {
    match space.layout().family {
        Family::Fixed4 => sample_cell_fixed4(op_dist, rng),
        _ => sample_cell_dag(space.layout().resolution, max_edges, op_dist, rng),
    }
}

/// Runs the sampling loop. `statistics` are the trained buckets; they stay
/// frozen while the ranker's own embeddings may evolve.
pub fn search(
    ranker: &mut dyn Ranker,
    statistics: &[TierBucket],
    space: &RecordSpace,
    oracle: &dyn Oracle,
    config: &SearchConfig,
) -> Result<SearchReport> {
    config.validate()?;
    if space.is_empty() {
        return Err(Error::invalid("search space is empty"));
    }
    let tiers = statistics.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let random_n = config.random_count();
    let guided_n = config.sample_size - random_n;
    let mut stats = if guided_n > 0 {
        Some(Statistics::new(statistics, space.sample_codes())?)
    } else {
        None
    };
    let max_edges = space
        .records()
        .iter()
        .map(ArchitectureRecord::edge_count)
        .max()
        .unwrap_or(0)
        .max(space.layout().resolution.saturating_sub(1));

    let mut cache: HashMap<String, f64> = HashMap::new();
    let (mut queries, mut cache_hits) = (0, 0);
    let mut best: Option<(String, f64)> = None;
    let mut reports = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations {
        let mut samples: Vec<&ArchitectureRecord> = index::sample(&mut rng, space.len(), random_n.min(space.len()))
            .into_iter()
            .map(|i| space.get(i))
            .collect();
        let mut forced = 0;
        let mut bounds = (f64::INFINITY, f64::INFINITY);
        for g in 0..guided_n {
            let st = stats.as_mut().expect("statistics for guided sampling");
            if g % config.reuse == 0 {
                bounds = st.next_bounds(config.mode, &config.rule, &mut rng)?;
            }
            let mut chosen = None;
            let mut fallback = None;
            for _ in 0..=config.retry_cap {
                let cell = sample_structure(space, max_edges, &st.op_dist, &mut rng)?;
                let Some(r) = space.resolve(&cell) else {
                    continue;
                };
                if r.total_flops <= bounds.0 && r.total_params <= bounds.1 {
                    chosen = Some(r);
                    break;
                }
                fallback = Some(r);
            }
            let record = match chosen {
                Some(r) => r,
                None => {
                    forced += 1;
                    match fallback {
                        Some(r) => r,
                        None => space.get(rng.gen_range(0..space.len())),
                    }
                }
            };
            samples.push(record);
        }
        // identical structures can be drawn twice; classify each once
        let mut seen = std::collections::HashSet::new();
        samples.retain(|r| seen.insert(r.id.as_str()));

        let ranked = ranker.classify(&samples)?;
        let width = ranked.tiers.iter().map(|t| t + 1).max().unwrap_or(0).max(tiers);
        let mut tier_counts = vec![0; width];
        for &t in &ranked.tiers {
            tier_counts[t] += 1;
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by(|&a, &b| {
            ranked.tiers[a]
                .cmp(&ranked.tiers[b])
                .then(ranked.scores[b].total_cmp(&ranked.scores[a]))
                .then_with(|| samples[a].id.cmp(&samples[b].id))
        });
        let mut candidates = Vec::with_capacity(config.top_k);
        let mut error = None;
        for &i in order.iter().take(config.top_k) {
            let id = &samples[i].id;
            let (accuracy, cached) = match cache.get(id) {
                Some(&a) => (Some(a), true),
                None => match oracle.query(id) {
                    Ok(a) => {
                        cache.insert(id.clone(), a);
                        (Some(a), false)
                    }
                    Err(e) => {
                        error = Some(e.to_string());
                        (None, false)
                    }
                },
            };
            queries += 1;
            cache_hits += usize::from(cached);
            candidates.push(Candidate {
                id: id.clone(),
                predicted_tier: ranked.tiers[i],
                score: ranked.scores[i],
                accuracy,
                cached,
            });
            if error.is_some() {
                break;
            }
        }
        if error.is_none() {
            for c in &candidates {
                let a = c.accuracy.expect("answered query");
                if best.as_ref().map_or(true, |(_, b)| a > *b) {
                    best = Some((c.id.clone(), a));
                }
            }
        }
        let best_rank = best
            .as_ref()
            .and_then(|(id, _)| space.true_rank(id).ok())
            .map(|r| r.rank);
        reports.push(IterationReport {
            iteration,
            random_samples: random_n,
            guided_samples: guided_n,
            forced_accepts: forced,
            tier_counts,
            candidates,
            best_id: best.as_ref().map(|(id, _)| id.clone()),
            best_accuracy: best.as_ref().map(|(_, a)| *a),
            best_rank,
            error,
        });
    }

    let best_true = best.as_ref().and_then(|(id, _)| space.true_rank(id).ok());
    Ok(SearchReport {
        iterations: reports,
        summary: SearchSummary {
            mode: config.mode,
            seed: config.seed,
            iterations: config.iterations,
            top_k: config.top_k,
            queries,
            unique_queries: cache.len(),
            cache_hits,
            space_size: space.len(),
            best_id: best.as_ref().map(|(id, _)| id.clone()),
            best_accuracy: best.as_ref().map(|(_, a)| *a),
            best_rank: best_true.map(|r| r.rank),
            best_permille: best_true.map(|r| r.permille),
        },
    })
}
