//! Single-file model checkpoint: magic, JSON header, little-endian f64 blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoding::{ChannelStats, EncodingLayout};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Nar};
use crate::numcore::Tensor;
use crate::tiers::TierBucket;
use crate::trainer::TrainedRanker;

const MAGIC: &[u8; 8] = b"NARCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    layout: EncodingLayout,
    stats: ChannelStats,
    buckets: Vec<TierBucket>,
    params: Vec<TensorEntry>,
}

pub fn to_bytes(ranker: &TrainedRanker) -> Result<Vec<u8>> {
    let params = ranker.model.params();
    let header = Header {
        config: ranker.model.config().clone(),
        layout: ranker.layout,
        stats: ranker.stats.clone(),
        buckets: ranker.buckets.clone(),
        params: params
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedRanker> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut blob = &bytes[16 + len..];
    let mut values = Vec::with_capacity(header.params.len());
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        if blob.len() < n * 8 {
            return Err(bad("truncated parameter blob"));
        }
        let data = blob[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blob = &blob[n * 8..];
        values.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    if !blob.is_empty() {
        return Err(bad("trailing bytes after parameter blob"));
    }
    let mut model = Nar::new(header.config, 0)?;
    model.load_params(values)?;
    Ok(TrainedRanker {
        model,
        stats: header.stats,
        layout: header.layout,
        buckets: header.buckets,
    })
}

pub fn save(ranker: &TrainedRanker, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ranker)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainedRanker> {
    from_bytes(&std::fs::read(path)?)
}
