//! Training loop: per-batch tier labels, joint loss, AdamW, bucket updates,
//! and held-out metrics.

mod labels;
mod metrics;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use labels::{build_labels, tier_sizes};
pub use metrics::{kendall_tau, tier_agreement, Metrics};

use crate::encoding::{encode, ArchitectureRecord, ChannelStats, EncodingLayout, FeatureTensor};
use crate::error::{Error, Result};
use crate::model::{Nar, Prediction};
use crate::numcore::{clip_global_norm, lr_at_step, AdamW, AdamWConfig, Graph, Tensor};
use crate::tiers::{new_buckets, TierBucket, DEFAULT_BINS};

/// Inference batch size for bulk prediction.
const PREDICT_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Batch size `k`; also the histogram normalizer.
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup: u64,
    pub optimizer: AdamWConfig,
    /// Multiplier on the warm-up schedule.
    pub lr_factor: f64,
    pub clip_norm: f64,
    /// Histogram bins per batch (`q`).
    pub bins: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 35,
            warmup: 50,
            optimizer: AdamWConfig::default(),
            lr_factor: 1.0,
            clip_norm: 5.0,
            bins: DEFAULT_BINS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, tiers: usize) -> Result<()> {
        if self.batch_size < tiers.max(2) {
            return Err(Error::invalid(format!(
                "batch size {} smaller than tier count {}",
                self.batch_size, tiers
            )));
        }
        if self.epochs == 0 || self.warmup == 0 || self.bins == 0 {
            return Err(Error::invalid("epochs, warmup and bins must be positive"));
        }
        if !(self.lr_factor > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::invalid("lr_factor and clip_norm must be positive"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: u64,
    pub epoch: usize,
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "L2")]
    pub l2: f64,
    pub total: f64,
    pub lr: f64,
    /// Cumulative members per tier bucket.
    pub tier_counts: Vec<u64>,
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
}

/// A model together with everything needed to apply it: input statistics,
/// layout and tier buckets.
#[derive(Clone, Debug)]
pub struct TrainedRanker {
    pub model: Nar,
    pub stats: ChannelStats,
    pub layout: EncodingLayout,
    pub buckets: Vec<TierBucket>,
}

impl TrainedRanker {
    pub fn embeddings(&self) -> Vec<Tensor> {
        self.buckets.iter().map(|b| b.embedding.clone()).collect()
    }

    /// Standardized `[N, P²]` patches of a record.
    pub fn patches(&self, record: &ArchitectureRecord) -> Result<Tensor> {
        Ok(self.stats.apply(&encode(record, &self.layout)?).to_patches())
    }

    /// Frozen-model predictions for `records` against the current embeddings.
    pub fn predict(&self, records: &[&ArchitectureRecord]) -> Result<Prediction> {
        let patches = records
            .iter()
            .map(|r| self.patches(r))
            .collect::<Result<Vec<_>>>()?;
        predict_patches(&self.model, &self.embeddings(), &patches)
    }

    /// Kendall τ, tier accuracy and adjacent-tier accuracy on held-out
    /// records. Reference tiers come from labelling the whole set as one batch.
    pub fn validate(&self, records: &[&ArchitectureRecord]) -> Result<Metrics> {
        if records.is_empty() {
            return Err(Error::invalid("validation set is empty"));
        }
        let truths = truths(records, ArchitectureRecord::test_accuracy)?;
        let pred = self.predict(records)?;
        let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let tiers = self.model.config().tiers;
        let (tier_accuracy, adjacent_tier_accuracy) = if records.len() >= tiers {
            tier_agreement(&pred.tiers(), &build_labels(&truths, &ids, tiers)?)?
        } else {
            (f64::NAN, f64::NAN)
        };
        Ok(Metrics {
            count: records.len(),
            kendall_tau: kendall_tau(&pred.scores, &truths)?,
            tier_accuracy,
            adjacent_tier_accuracy,
        })
    }
}

fn truths(
    records: &[&ArchitectureRecord],
    get: fn(&ArchitectureRecord) -> Option<f64>,
) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            get(r).ok_or_else(|| Error::Record {
                id: r.id.clone(),
                reason: "missing accuracy".into(),
            })
        })
        .collect()
}

/// Chunked inference over prepared patches.
pub fn predict_patches(model: &Nar, embeddings: &[Tensor], patches: &[Tensor]) -> Result<Prediction> {
    let mut all = Prediction {
        features: Vec::with_capacity(patches.len()),
        scores: Vec::with_capacity(patches.len()),
        probs: Vec::with_capacity(patches.len()),
    };
    for chunk in patches.chunks(PREDICT_CHUNK) {
        let p = model.predict(&Tensor::stack(chunk)?, embeddings)?;
        all.features.extend(p.features);
        all.scores.extend(p.scores);
        all.probs.extend(p.probs);
    }
    Ok(all)
}

/// Stateful driver for the training loop.
pub struct Trainer<'a> {
    model: Nar,
    optimizer: AdamW,
    buckets: Vec<TierBucket>,
    stats: ChannelStats,
    layout: EncodingLayout,
    config: TrainConfig,
    records: &'a [ArchitectureRecord],
    patches: Vec<Tensor>,
    truths: Vec<f64>,
    rng: ChaCha8Rng,
    iteration: u64,
    epoch: usize,
    log: Vec<LogEntry>,
}

impl<'a> Trainer<'a> {
    /// Encodes and standardizes `records` (statistics fit on them) and sets
    /// up the optimizer and empty buckets.
    pub fn new(
        model: Nar,
        config: TrainConfig,
        layout: EncodingLayout,
        records: &'a [ArchitectureRecord],
    ) -> Result<Self> {
        let mc = model.config();
        config.validate(mc.tiers)?;
        if mc.channels != layout.channels() || mc.resolution != layout.resolution {
            return Err(Error::invalid(format!(
                "model expects ({}, {}) patches, layout produces ({}, {})",
                mc.channels,
                mc.resolution,
                layout.channels(),
                layout.resolution
            )));
        }
        if records.len() < mc.tiers.max(2) {
            return Err(Error::invalid(format!(
                "{} training records cannot fill {} tiers",
                records.len(),
                mc.tiers
            )));
        }
        let refs: Vec<&ArchitectureRecord> = records.iter().collect();
        let truths = truths(&refs, ArchitectureRecord::train_accuracy)?;
        let raw = records
            .iter()
            .map(|r| encode(r, &layout))
            .collect::<Result<Vec<FeatureTensor>>>()?;
        let stats = ChannelStats::fit(&raw)?;
        let patches = raw.iter().map(|t| stats.apply(t).to_patches()).collect();
        let buckets = new_buckets(mc.tiers, mc.channels, mc.d_model);
        let optimizer = AdamW::new(config.optimizer.clone(), model.params());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            optimizer,
            buckets,
            stats,
            layout,
            config,
            records,
            patches,
            truths,
            rng,
            iteration: 0,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &Nar {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Nar {
        &mut self.model
    }

    pub fn buckets(&self) -> &[TierBucket] {
        &self.buckets
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    fn embeddings(&self) -> Vec<Tensor> {
        self.buckets.iter().map(|b| b.embedding.clone()).collect()
    }

    fn batch_inputs(&self, batch: &[usize]) -> Result<(Tensor, Vec<usize>, Vec<f64>)> {
        let patches: Vec<Tensor> = batch.iter().map(|&i| self.patches[i].clone()).collect();
        let truths: Vec<f64> = batch.iter().map(|&i| self.truths[i]).collect();
        let ids: Vec<&str> = batch.iter().map(|&i| self.records[i].id.as_str()).collect();
        let labels = build_labels(&truths, &ids, self.model.config().tiers)?;
        Ok((Tensor::stack(&patches)?, labels, truths))
    }

    /// Loss of a batch under the current state without dropout or updates.
    pub fn batch_loss(&self, batch: &[usize]) -> Result<LossTerms> {
        let (patches, labels, truths) = self.batch_inputs(batch)?;
        let mut g = Graph::inference();
        let out = self.model.forward(&mut g, &patches, &self.embeddings(), None)?;
        let (total, l1, l2) = self.model.joint_loss(&mut g, &out, &labels, &truths)?;
        Ok(LossTerms {
            total: g.value(total).data()[0],
            l1: g.value(l1).data()[0],
            l2: g.value(l2).data()[0],
        })
    }

    /// One optimization step on the records at `batch`, followed by bucket
    /// updates with the ground-truth tiers.
    pub fn step(&mut self, batch: &[usize]) -> Result<LogEntry> {
        let (patches, labels, truths) = self.batch_inputs(batch)?;
        let iteration = self.iteration + 1;
        let embeddings = self.embeddings();
        let mut g = Graph::new();
        let dropout = (self.model.config().dropout > 0.0).then_some(&mut self.rng);
        let out = self.model.forward(&mut g, &patches, &embeddings, dropout)?;
        let (total, l1, l2) = self.model.joint_loss(&mut g, &out, &labels, &truths)?;
        let terms = LossTerms {
            total: g.value(total).data()[0],
            l1: g.value(l1).data()[0],
            l2: g.value(l2).data()[0],
        };
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at iteration {iteration}")));
        }
        let mut grads = g.backward(total)?.for_store(self.model.params());
        clip_global_norm(&mut grads, self.config.clip_norm);
        let lr = self.config.lr_factor
            * lr_at_step(iteration, self.model.config().d_model, self.config.warmup)?;
        self.optimizer
            .step(self.model.params_mut(), &grads, lr)
            .map_err(|e| Error::NonFinite(format!("iteration {iteration}: {e}")))?;

        let (n, d) = (self.model.config().channels, self.model.config().d_model);
        let feats = g.value(out.features).data();
        let k = batch.len();
        for (tier, bucket) in self.buckets.iter_mut().enumerate() {
            let members: Vec<usize> = (0..k).filter(|&m| labels[m] == tier).collect();
            let features = members
                .iter()
                .map(|&m| Tensor::new(vec![n, d], feats[m * n * d..(m + 1) * n * d].to_vec()))
                .collect::<Result<Vec<_>>>()?;
            bucket.update_embedding(&features)?;
            let recs: Vec<&ArchitectureRecord> =
                members.iter().map(|&m| &self.records[batch[m]]).collect();
            let flops: Vec<f64> = recs.iter().map(|r| r.total_flops).collect();
            let params: Vec<f64> = recs.iter().map(|r| r.total_params).collect();
            bucket.record_batch(&flops, &params, k, self.config.bins)?;
            for r in recs {
                bucket.update_op_counts(r.family, r.op_codes())?;
            }
        }

        self.iteration = iteration;
        let entry = LogEntry {
            iteration,
            epoch: self.epoch,
            l1: terms.l1,
            l2: terms.l2,
            total: terms.total,
            lr,
            tier_counts: self.buckets.iter().map(|b| b.count).collect(),
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Seeded reshuffle, then one step per batch. A trailing batch too small
    /// to fill every tier is dropped.
    pub fn run_epoch(&mut self) -> Result<()> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.shuffle(&mut self.rng);
        let min = self.model.config().tiers.max(2);
        for batch in order.chunks(self.config.batch_size) {
            if batch.len() >= min {
                self.step(batch)?;
            }
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn finish(self) -> (TrainedRanker, Vec<LogEntry>) {
        (
            TrainedRanker {
                model: self.model,
                stats: self.stats,
                layout: self.layout,
                buckets: self.buckets,
            },
            self.log,
        )
    }
}

/// Runs every configured epoch.
pub fn train(
    model: Nar,
    config: TrainConfig,
    layout: EncodingLayout,
    records: &[ArchitectureRecord],
) -> Result<(TrainedRanker, Vec<LogEntry>)> {
    let epochs = config.epochs;
    let mut trainer = Trainer::new(model, config, layout, records)?;
    for _ in 0..epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}
