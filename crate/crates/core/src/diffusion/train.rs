//! Denoising-objective training with momentum SGD.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{
    chw_to_pixels, Architecture, DenoiserGrads, ForwardOptions, LayerBiases, StructureBranch,
    ToyDenoiser, NULL_TOKEN,
};
use super::nn::Grads;
use super::schedule::{make_schedule, noise_mix};
use crate::error::{domain_err, Error, Result};
use crate::attention::TokenSet;
use crate::layout::{BinaryMask, LabelMap};
use crate::tensor::Tensor;

/// One training sample: a clean latent, its caption tokens and its layout.
#[derive(Debug, Clone)]
pub struct TrainExample {
    /// `C x H x W`.
    pub latent: Tensor,
    pub tokens: Vec<usize>,
    pub layout: LabelMap,
    /// Object mask and the caption positions describing it. When present the
    /// example is sometimes trained under mask-guided attention.
    pub guide: Option<(BinaryMask, TokenSet)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Probability of replacing the caption with the null caption.
    pub caption_dropout: f64,
    /// Probability of feeding the layout through the structure branch.
    pub branch_rate: f64,
    /// Probability of training a guided example with its mask biases.
    #[serde(default)]
    pub guided_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            clip_norm: 1.0,
            caption_dropout: 0.1,
            branch_rate: 0.5,
            guided_rate: 0.5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub denoiser: ToyDenoiser,
    pub branch: StructureBranch,
    /// Mean loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Loss and gradients of one noised sample.
#[derive(Debug, Clone)]
pub struct SampleGrads {
    pub loss: f64,
    pub denoiser: DenoiserGrads,
    pub branch: Option<Grads>,
}

/// Mean squared error between predicted and true noise for a single sample,
/// with gradients for the denoiser and, when a layout is given, the branch.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    model: &ToyDenoiser,
    branch: Option<(&StructureBranch, &LabelMap)>,
    x0: &[f64],
    tokens: &[usize],
    timestep: usize,
    noise: &[f64],
    ab: f64,
    biases: Option<&LayerBiases>,
) -> Result<SampleGrads> {
    let xt = noise_mix(x0, noise, ab);
    let branch_pass = match branch {
        Some((b, layout)) => Some((b, b.forward(layout)?)),
        None => None,
    };
    let opts = ForwardOptions {
        biases,
        structure: branch_pass.as_ref().map(|(_, (out, _))| out),
        ..Default::default()
    };
    let out = model.forward(&xt, timestep, tokens, opts)?;
    let n = out.eps.len() as f64;
    let mut loss = 0.0;
    let mut g_eps = Vec::with_capacity(out.eps.len());
    for (p, t) in out.eps.iter().zip(noise) {
        let d = p - t;
        loss += d * d;
        g_eps.push(2.0 * d / n);
    }
    loss /= n;
    let grads = model.backward(&out.cache, &g_eps);
    let branch_grads = branch_pass.map(|(b, (_, cache))| b.backward(&cache, &grads.branch));
    Ok(SampleGrads {
        loss,
        denoiser: grads,
        branch: branch_grads,
    })
}

fn clip(grads: &mut [&mut Grads], max_norm: f64) {
    let total: f64 = grads.iter().map(|g| g.data.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = libm::sqrt(total);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
}

fn momentum_step(params: &mut [f64], velocity: &mut [f64], grads: &[f64], lr: f64, momentum: f64) {
    for ((w, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

/// Trains a fresh denoiser and structure branch on `examples`.
///
/// The run is a deterministic function of `examples`, `arch` and `config`.
pub fn train_toy(examples: &[TrainExample], arch: Architecture, config: &TrainConfig) -> Result<TrainedModel> {
    if examples.is_empty() {
        return Err(domain_err!("training needs at least one example"));
    }
    if config.batch_size == 0 {
        return Err(domain_err!("batch size must be positive"));
    }
    let schedule = make_schedule(arch.train_steps, arch.beta_min, arch.beta_max)?;
    let mut model = ToyDenoiser::new(arch.clone(), config.seed)?;
    let mut branch = StructureBranch::new(arch.clone(), config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7261_696e));
    let latents = examples
        .iter()
        .map(|e| chw_to_pixels(&e.latent))
        .collect::<Result<Vec<_>>>()?;
    let mut vel_model = alloc::vec![0.0; model.params().len()];
    let mut vel_branch = alloc::vec![0.0; branch.params().len()];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let null = [NULL_TOKEN];
    let grids = arch.attention_grids();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut g_model = model.params().zeros_like();
            let mut g_branch = branch.params().zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &examples[i];
                let t = rng.random_range(1..=schedule.train_steps());
                let noise: Vec<f64> = (0..latents[i].len())
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let drop_caption = rng.random::<f64>() < config.caption_dropout;
                let use_branch = rng.random::<f64>() < config.branch_rate;
                let tokens: &[usize] = if drop_caption { &null } else { &ex.tokens };
                let guided = rng.random::<f64>() < config.guided_rate;
                let biases = match &ex.guide {
                    Some((mask, attr)) if guided => Some(if drop_caption {
                        LayerBiases::from_mask(mask, grids, None)?
                    } else {
                        LayerBiases::from_mask(mask, grids, Some((attr, tokens.len(), 0.0)))?
                    }),
                    _ => None,
                };
                let sg = sample_loss(
                    &model,
                    use_branch.then_some((&branch, &ex.layout)),
                    &latents[i],
                    tokens,
                    t,
                    &noise,
                    schedule.alpha_bar(t),
                    biases.as_ref(),
                )?;
                if !sg.loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: alloc::format!("loss {} at timestep {t} on example {i}", sg.loss),
                    });
                }
                batch_loss += sg.loss;
                g_model.add_assign(&sg.denoiser.params);
                if let Some(gb) = &sg.branch {
                    g_branch.add_assign(gb);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            g_model.scale(inv);
            g_branch.scale(inv);
            clip(&mut [&mut g_model, &mut g_branch], config.clip_norm);
            momentum_step(
                model.params_mut().flat_mut(),
                &mut vel_model,
                &g_model.data,
                config.learning_rate,
                config.momentum,
            );
            momentum_step(
                branch.params_mut().flat_mut(),
                &mut vel_branch,
                &g_branch.data,
                config.learning_rate,
                config.momentum,
            );
            if !model.params().all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: "non-finite weights after update".into(),
                });
            }
            epoch_loss += batch_loss;
        }
        epoch_losses.push(epoch_loss / examples.len() as f64);
    }
    model.params_mut().round_to_f32();
    branch.params_mut().round_to_f32();
    model.mark_trained();
    Ok(TrainedModel {
        denoiser: model,
        branch,
        epoch_losses,
    })
}
