use serde::{Deserialize, Serialize};

use super::record::{fixed4_edge_index, ArchitectureRecord, Family};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Tensor geometry of a family: `P × P` channels, one operation channel
/// followed by a FLOPs and a #params channel per cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingLayout {
    pub family: Family,
    pub resolution: usize,
    pub cells: usize,
}

impl EncodingLayout {
    pub const fn dag7() -> Self {
        EncodingLayout {
            family: Family::Dag7,
            resolution: 7,
            cells: 9,
        }
    }

    pub const fn fixed4() -> Self {
        EncodingLayout {
            family: Family::Fixed4,
            resolution: 4,
            cells: 15,
        }
    }

    pub const fn synth(nodes: usize, cells: usize) -> Self {
        EncodingLayout {
            family: Family::Synth,
            resolution: nodes,
            cells,
        }
    }

    pub fn channels(&self) -> usize {
        1 + 2 * self.cells
    }

    pub fn patch_len(&self) -> usize {
        self.resolution * self.resolution
    }
}

/// `N × P × P` channel-stacked encoding of one record.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub channels: usize,
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl FeatureTensor {
    fn zeros(channels: usize, resolution: usize) -> Self {
        FeatureTensor {
            channels,
            resolution,
            values: vec![0.0; channels * resolution * resolution],
        }
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        let p = self.resolution;
        self.values[(c * p + i) * p + j]
    }

    fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let p = self.resolution;
        self.values[(c * p + i) * p + j] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.resolution * self.resolution;
        &self.values[c * n..(c + 1) * n]
    }

    /// Little-endian `f64` bytes, channel-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Flattened patches `[N, P²]`.
    pub fn to_patches(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.resolution * self.resolution],
            self.values.clone(),
        )
        .expect("consistent feature tensor")
    }
}

/// Encodes a record under its family's layout.
pub fn encode(record: &ArchitectureRecord, layout: &EncodingLayout) -> Result<FeatureTensor> {
    if record.family != layout.family {
        return Err(Error::Record {
            id: record.id.clone(),
            reason: format!(
                "family {:?} does not match layout {:?}",
                record.family, layout.family
            ),
        });
    }
    record.validate(layout.resolution, layout.cells)?;
    let p = layout.resolution;
    let v = record.num_nodes();
    let mut t = FeatureTensor::zeros(layout.channels(), p);
    // Entry (i, j) carries the source node's value on every edge i -> j.
    for i in 0..v {
        for j in 0..v {
            if record.adjacency[i][j] == 0 {
                continue;
            }
            let op = match record.family {
                Family::Fixed4 => record.edge_ops[fixed4_edge_index(i, j)],
                _ => record.node_ops[i],
            };
            t.set(0, i, j, f64::from(op));
            for (c, cell) in record.cells.iter().enumerate() {
                t.set(1 + 2 * c, i, j, cell.flops[i]);
                t.set(2 + 2 * c, i, j, cell.params[i]);
            }
        }
    }
    Ok(t)
}

/// `(19, 7, 7)` encoding of a 7-node, 9-cell record.
pub fn encode_dag7(record: &ArchitectureRecord) -> Result<FeatureTensor> {
    encode(record, &EncodingLayout::dag7())
}

/// `(31, 4, 4)` encoding of a fixed 4-node, 15-cell record.
pub fn encode_fixed4(record: &ArchitectureRecord) -> Result<FeatureTensor> {
    encode(record, &EncodingLayout::fixed4())
}

/// Per-channel mean and standard deviation over a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit(tensors: &[FeatureTensor]) -> Result<Self> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::invalid("channel statistics need at least one tensor"))?;
        let (n, pp) = (first.channels, first.resolution * first.resolution);
        let count = (tensors.len() * pp) as f64;
        let mut mean = vec![0.0; n];
        for t in tensors {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += t.channel(c).iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for t in tensors {
            for (c, v) in var.iter_mut().enumerate() {
                *v += t.channel(c).iter().map(|x| (x - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn apply(&self, t: &FeatureTensor) -> FeatureTensor {
        let pp = t.resolution * t.resolution;
        let mut out = t.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            let c = i / pp;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }
}

/// Fixed sine/cosine positional table `[n, d]`:
/// even columns `sin(pos / 10000^(2i/d))`, odd columns the matching cosine.
pub fn positional_table(n: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[n, d], |idx| {
        let (pos, col) = (idx / d, idx % d);
        let pair = (col / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `x₀ = x_p · E + E_pos` for one record, channel order preserved.
pub fn patchify(t: &FeatureTensor, proj: &Tensor, pos: &Tensor) -> Result<Tensor> {
    let pp = t.resolution * t.resolution;
    if proj.shape().len() != 2 || proj.shape()[0] != pp {
        return Err(Error::shape("patchify", &[&[t.channels, pp], proj.shape()]));
    }
    let d = proj.shape()[1];
    if pos.shape() != [t.channels, d] {
        return Err(Error::shape("patchify", &[&[t.channels, d], pos.shape()]));
    }
    let mut out = t.to_patches().matmul(proj)?;
    for (o, p) in out.data_mut().iter_mut().zip(pos.data()) {
        *o += p;
    }
    Ok(out)
}
