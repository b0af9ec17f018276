//! Finite-difference verification of the tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Nar};
use crate::error::Result;
use crate::numcore::{Graph, Tensor};

/// Tiny ranker used by the finite-difference suite.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        ffn_dim: 32,
        tiers: 5,
        channels: 19,
        resolution: 7,
        lambda: 0.7,
        dropout: 0.0,
    }
}

pub struct GradCheck {
    pub worst: f64,
    pub worst_param: String,
    pub tensors_checked: usize,
    pub entries_checked: usize,
}

/// Compares tape gradients of the joint loss against central differences
/// (step 1e-5) on `per_tensor` random entries of every parameter tensor.
pub fn finite_difference_check(seed: u64, per_tensor: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config();
    let model = Nar::new(cfg.clone(), seed)?;
    let batch = 4;
    let patches = Tensor::from_fn(&[batch, cfg.channels, cfg.patch_len()], |_| {
        rng.gen_range(-1.0..1.0)
    });
    let embeddings: Vec<Tensor> = (0..cfg.tiers).map(|_| model.random_embedding(&mut rng)).collect();
    let labels = [0usize, 3, 1, 4];
    let truths = [0.91, 0.42, 0.77, 0.13];

    let loss_of = |m: &Nar| -> Result<f64> {
        let mut g = Graph::inference();
        let out = m.forward(&mut g, &patches, &embeddings, None)?;
        let (total, _, _) = m.joint_loss(&mut g, &out, &labels, &truths)?;
        Ok(g.value(total).data()[0])
    };

    let mut g = Graph::new();
    let out = model.forward(&mut g, &patches, &embeddings, None)?;
    let (total, _, _) = model.joint_loss(&mut g, &out, &labels, &truths)?;
    let grads = g.backward(total)?.for_store(model.params());

    let h = 1e-5;
    let mut report = GradCheck {
        worst: 0.0,
        worst_param: String::new(),
        tensors_checked: 0,
        entries_checked: 0,
    };
    let names = model.param_names();
    for (pi, name) in names.iter().enumerate() {
        let n = grads[pi].len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for idx in picks {
            let mut plus = model.clone();
            let id = plus.params().by_name(name).expect("name from param_names");
            plus.params_mut().get_mut(id).value.data_mut()[idx] += h;
            let mut minus = model.clone();
            minus.params_mut().get_mut(id).value.data_mut()[idx] -= h;
            let numeric = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
            let analytic = grads[pi].data()[idx];
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            if err > report.worst {
                report.worst = err;
                report.worst_param = format!("{name}[{idx}]");
            }
            report.entries_checked += 1;
        }
        report.tensors_checked += 1;
    }
    Ok(report)
}
