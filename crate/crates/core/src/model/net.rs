use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::positional_table;
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub tiers: usize,
    /// Patches per architecture (`N`).
    pub channels: usize,
    /// Patch side length (`P`).
    pub resolution: usize,
    /// Weight of the ranking loss in the joint objective.
    pub lambda: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 6,
            d_model: 64,
            heads: 4,
            ffn_dim: 256,
            tiers: 5,
            channels: 19,
            resolution: 7,
            lambda: 1.0,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.tiers < 2 {
            return bad(format!("need at least 2 tiers, got {}", self.tiers));
        }
        if self.layers == 0 || self.ffn_dim == 0 || self.channels == 0 || self.resolution == 0 {
            return bad("layers, ffn_dim, channels and resolution must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be a nonnegative real", self.lambda));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.resolution * self.resolution
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Attention {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: Attention,
    norm_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ffn: Norm,
    ffn: FeedForward,
}

/// Two-layer bias-free head `ReLU(x W₁) W₂`.
#[derive(Clone, Debug)]
struct Head {
    w1: ParamId,
    w2: ParamId,
}

/// The ranker: patch projection, encoder, score head, tier-matching decoder
/// and tier-probability head.
#[derive(Clone, Debug)]
pub struct Nar {
    config: ModelConfig,
    params: ParamStore,
    proj: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    score_head: Head,
    prob_head: Head,
    pos: Tensor,
}

/// Handles to the outputs of one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `x_α`, `[B, N, D]`.
    pub features: Var,
    /// `ŷ`, `[B]`.
    pub scores: Var,
    /// Pre-softmax tier logits, `[B, T]`.
    pub logits: Var,
}

/// Detached inference results for a batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub features: Vec<Tensor>,
    pub scores: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
}

impl Prediction {
    /// Most probable tier (0-based) per sample; ties resolve to the better tier.
    pub fn tiers(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|p| {
                let mut best = 0;
                for (i, v) in p.iter().enumerate() {
                    if *v > p[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn matrix(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        self.store.add_glorot(name, fan_in, fan_out, self.rng)
    }

    fn vector(&mut self, name: String, n: usize, value: f64) -> ParamId {
        self.store.add(name, Tensor::full(&[n], value))
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.vector(format!("{name}.gamma"), d, 1.0),
            beta: self.vector(format!("{name}.beta"), d, 0.0),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        let mut pair = |s: &str| {
            (
                self.matrix(format!("{name}.w{s}"), d, d),
                self.vector(format!("{name}.b{s}"), d, 0.0),
            )
        };
        let (wq, bq) = pair("q");
        let (wk, bk) = pair("k");
        let (wv, bv) = pair("v");
        let (wo, bo) = pair("o");
        Attention {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            w1: self.matrix(format!("{name}.w1"), d, hidden),
            b1: self.vector(format!("{name}.b1"), hidden, 0.0),
            w2: self.matrix(format!("{name}.w2"), hidden, d),
            b2: self.vector(format!("{name}.b2"), d, 0.0),
        }
    }

    fn head(&mut self, name: &str, d: usize, out: usize) -> Head {
        Head {
            w1: self.matrix(format!("{name}.w1"), d, d),
            w2: self.matrix(format!("{name}.w2"), d, out),
        }
    }
}

/// Optional dropout context threaded through a training forward pass.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

impl Nar {
    /// Seeded Glorot-uniform initialization; biases zero, norms identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut b = Builder {
            store: ParamStore::default(),
            rng: &mut rng,
        };
        let proj = b.matrix("patch.proj".into(), config.patch_len(), d);
        let encoder = (0..config.layers)
            .map(|l| EncoderLayer {
                norm_attn: b.norm(&format!("enc.{l}.norm_attn"), d),
                attn: b.attention(&format!("enc.{l}.attn"), d),
                norm_ffn: b.norm(&format!("enc.{l}.norm_ffn"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let encoder_norm = b.norm("enc.norm", d);
        let decoder = (0..config.layers)
            .map(|l| DecoderLayer {
                norm_self: b.norm(&format!("dec.{l}.norm_self"), d),
                self_attn: b.attention(&format!("dec.{l}.self_attn"), d),
                norm_cross: b.norm(&format!("dec.{l}.norm_cross"), d),
                cross_attn: b.attention(&format!("dec.{l}.cross_attn"), d),
                norm_ffn: b.norm(&format!("dec.{l}.norm_ffn"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let decoder_norm = b.norm("dec.norm", d);
        let score_head = b.head("score", d, 1);
        let prob_head = b.head("prob", d, config.tiers);
        let params = b.store;
        let pos = positional_table(config.channels, d);
        Ok(Nar {
            config,
            params,
            proj,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            score_head,
            prob_head,
            pos,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sine/cosine table `[N, D]` added to patches and tier embeddings.
    pub fn positional(&self) -> &Tensor {
        &self.pos
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn linear(&self, g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = self.p(g, w);
        let y = g.matmul(x, wv)?;
        let bv = self.p(g, b);
        g.add(y, bv)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: &Norm) -> Result<Var> {
        let y = g.layer_norm(x);
        let gamma = self.p(g, n.gamma);
        let y = g.mul(y, gamma)?;
        let beta = self.p(g, n.beta);
        g.add(y, beta)
    }

    fn attend(&self, g: &mut Graph, query: Var, context: Var, a: &Attention) -> Result<Var> {
        let q = self.linear(g, query, a.wq, a.bq)?;
        let k = self.linear(g, context, a.wk, a.bk)?;
        let v = self.linear(g, context, a.wv, a.bv)?;
        let o = g.attention(q, k, v, self.config.heads)?;
        self.linear(g, o, a.wo, a.bo)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, f: &FeedForward) -> Result<Var> {
        let h = self.linear(g, x, f.w1, f.b1)?;
        let h = g.relu(h);
        self.linear(g, h, f.w2, f.b2)
    }

    fn residual(&self, g: &mut Graph, x: Var, branch: Var, rng: &mut DropoutRng) -> Result<Var> {
        let branch = match rng {
            Some(r) => g.dropout(branch, self.config.dropout, *r),
            None => branch,
        };
        g.add(x, branch)
    }

    fn check_stream(&self, g: &Graph, x: Var, op: &'static str) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.config.channels || s[2] != self.config.d_model {
            return Err(Error::shape(
                op,
                &[s, &[0, self.config.channels, self.config.d_model]],
            ));
        }
        Ok(())
    }

    /// `x₀ = x_p E + E_pos` for patches `[B, N, P²]`.
    pub fn patchify(&self, g: &mut Graph, patches: Var) -> Result<Var> {
        let s = g.shape(patches);
        if s.len() != 3 || s[1] != self.config.channels || s[2] != self.config.patch_len() {
            return Err(Error::shape(
                "patchify",
                &[s, &[0, self.config.channels, self.config.patch_len()]],
            ));
        }
        let e = self.p(g, self.proj);
        let x = g.matmul(patches, e)?;
        let pos = g.constant(self.pos.clone());
        g.add(x, pos)
    }

    /// Pre-norm encoder stack followed by a final layer norm.
    pub fn encoder_forward(&self, g: &mut Graph, x0: Var, mut rng: DropoutRng) -> Result<Var> {
        self.check_stream(g, x0, "encoder")?;
        let mut x = x0;
        for layer in &self.encoder {
            let h = self.norm(g, x, &layer.norm_attn)?;
            let h = self.attend(g, h, h, &layer.attn)?;
            x = self.residual(g, x, h, &mut rng)?;
            let h = self.norm(g, x, &layer.norm_ffn)?;
            let h = self.feed_forward(g, h, &layer.ffn)?;
            x = self.residual(g, x, h, &mut rng)?;
        }
        self.norm(g, x, &self.encoder_norm)
    }

    fn head(&self, g: &mut Graph, x: Var, head: &Head) -> Result<Var> {
        let pooled = g.mean(x, 1)?;
        let w1 = self.p(g, head.w1);
        let h = g.matmul(pooled, w1)?;
        let h = g.relu(h);
        let w2 = self.p(g, head.w2);
        g.matmul(h, w2)
    }

    /// `ŷ = ReLU(mean_N(x_α) W¹_r) W²_r`, one score per sample.
    pub fn score_head(&self, g: &mut Graph, features: Var) -> Result<Var> {
        self.check_stream(g, features, "score_head")?;
        let y = self.head(g, features, &self.score_head)?;
        let b = g.shape(y)[0];
        g.reshape(y, &[b])
    }

    /// Matches one tier stream `[B, N, D]` (embedding plus positions) against
    /// the architecture features; returns `z_i`.
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        tier_stream: Var,
        features: Var,
        mut rng: DropoutRng,
    ) -> Result<Var> {
        self.check_stream(g, tier_stream, "decoder")?;
        self.check_stream(g, features, "decoder")?;
        if g.shape(tier_stream)[0] != g.shape(features)[0] {
            return Err(Error::shape(
                "decoder",
                &[g.shape(tier_stream), g.shape(features)],
            ));
        }
        let mut z = tier_stream;
        for layer in &self.decoder {
            let h = self.norm(g, z, &layer.norm_self)?;
            let h = self.attend(g, h, h, &layer.self_attn)?;
            let q = self.residual(g, z, h, &mut rng)?;
            let h = self.norm(g, q, &layer.norm_cross)?;
            let h = self.attend(g, h, features, &layer.cross_attn)?;
            let zc = self.residual(g, q, h, &mut rng)?;
            let h = self.norm(g, zc, &layer.norm_ffn)?;
            let h = self.feed_forward(g, h, &layer.ffn)?;
            z = self.residual(g, zc, h, &mut rng)?;
        }
        self.norm(g, z, &self.decoder_norm)
    }

    /// Tier logits from the per-tier decoder outputs: `ReLU(mean_N(Σ z_i) W¹_p) W²_p`.
    pub fn tier_logits(&self, g: &mut Graph, z_list: &[Var]) -> Result<Var> {
        let (&first, rest) = z_list
            .split_first()
            .ok_or_else(|| Error::invalid("no tier outputs to combine"))?;
        let mut z = first;
        for &zi in rest {
            z = g.add(z, zi)?;
        }
        self.head(g, z, &self.prob_head)
    }

    /// Tier stream input for one tier: embedding plus positions, repeated per sample.
    pub fn tier_stream(&self, embedding: &Tensor, batch: usize) -> Result<Tensor> {
        let (n, d) = (self.config.channels, self.config.d_model);
        if embedding.shape() != [n, d] {
            return Err(Error::shape("tier_stream", &[embedding.shape(), &[n, d]]));
        }
        let row: Vec<f64> = embedding
            .data()
            .iter()
            .zip(self.pos.data())
            .map(|(e, p)| e + p)
            .collect();
        let mut data = Vec::with_capacity(batch * row.len());
        for _ in 0..batch {
            data.extend_from_slice(&row);
        }
        Tensor::new(vec![batch, n, d], data)
    }

    /// Full batched pass over patches `[B, N, P²]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        patches: &Tensor,
        tier_embeddings: &[Tensor],
        mut rng: DropoutRng,
    ) -> Result<Outputs> {
        if tier_embeddings.len() != self.config.tiers {
            return Err(Error::invalid(format!(
                "{} tier embeddings for {} tiers",
                tier_embeddings.len(),
                self.config.tiers
            )));
        }
        let batch = patches.shape()[0];
        let xp = g.constant(patches.clone());
        let x0 = self.patchify(g, xp)?;
        let features = self.encoder_forward(g, x0, rng.as_deref_mut())?;
        let scores = self.score_head(g, features)?;
        let mut z_list = Vec::with_capacity(tier_embeddings.len());
        for e in tier_embeddings {
            let stream = g.constant(self.tier_stream(e, batch)?);
            z_list.push(self.decoder_forward(g, stream, features, rng.as_deref_mut())?);
        }
        let logits = self.tier_logits(g, &z_list)?;
        Ok(Outputs {
            features,
            scores,
            logits,
        })
    }

    /// `L = L₂ + λ L₁` on the tape.
    pub fn joint_loss(
        &self,
        g: &mut Graph,
        out: &Outputs,
        labels: &[usize],
        truths: &[f64],
    ) -> Result<(Var, Var, Var)> {
        let l1 = g.ranking_loss(out.scores, truths)?;
        let l2 = g.cross_entropy(out.logits, labels)?;
        let weighted = g.scale(l1, self.config.lambda);
        let total = g.add(l2, weighted)?;
        Ok((total, l1, l2))
    }

    /// Frozen-parameter evaluation of a batch.
    pub fn predict(&self, patches: &Tensor, tier_embeddings: &[Tensor]) -> Result<Prediction> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, patches, tier_embeddings, None)?;
        let probs_var = g.softmax(out.logits, 1)?;
        let (b, n, d) = (
            patches.shape()[0],
            self.config.channels,
            self.config.d_model,
        );
        let feats = g.value(out.features).data();
        let features = (0..b)
            .map(|i| Tensor::new(vec![n, d], feats[i * n * d..(i + 1) * n * d].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let t = self.config.tiers;
        let probs = g
            .value(probs_var)
            .data()
            .chunks(t)
            .map(<[f64]>::to_vec)
            .collect();
        Ok(Prediction {
            features,
            scores: g.value(out.scores).data().to_vec(),
            probs,
        })
    }

    /// Replaces parameter values by name; every name must exist with the same shape.
    pub fn load_params(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors for a model with {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (name, t) in values {
            let id = self
                .params
                .by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let p = self.params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }

    /// Names of every parameter belonging to the given group prefix.
    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(_, p)| p.name.clone()).collect()
    }

    /// Sets every parameter whose name starts with one of `prefixes` to zero.
    pub fn zero_params(&mut self, prefixes: &[&str]) {
        for p in self.params.iter_mut() {
            if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Seeded random tensor helper used for probes and tests.
    pub fn random_embedding(&self, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(&[self.config.channels, self.config.d_model], |_| {
            rng.gen_range(-1.0..1.0)
        })
    }
}
