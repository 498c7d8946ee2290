//! DDIM inversion and sampling over the toy denoiser.

use alloc::vec::Vec;

use super::model::{chw_to_pixels, pixels_to_chw, ForwardOptions, ToyDenoiser};
use super::schedule::{ddim_transfer_clamped, NoiseSchedule};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Latents live in `[-1, 1]`; predicted clean signals are clamped to it.
pub const DATA_BOUND: f64 = 1.0;

/// Quantities captured while inverting the source at one sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Sampling step this record serves (0 = noisiest).
    pub step: usize,
    /// Schedule level the record was taken at.
    pub level: usize,
    /// Latent at `level`, `C x H x W`.
    pub latent: Tensor,
    /// Injected decoder features, one tensor per guidance branch
    /// (conditional first). Each is `N x width`.
    pub features: Vec<Tensor>,
    /// Self-attention maps per branch, coarse then fine resolution.
    pub maps: Vec<[Tensor; 2]>,
}

/// Records of an inversion in sampling order, plus the noisiest latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub final_latent: Tensor,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One denoiser evaluation as seen by the inversion driver: the noise estimate
/// and the per-branch features and maps to record.
pub struct Evaluation {
    pub eps: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    pub maps: Vec<[Vec<f64>; 2]>,
}

/// Runs the DDIM recurrence from `x0` up to the noisiest level with `steps`
/// updates. `eval(step, level, x)` is called with the sampling step that will
/// later revisit `level` (`None` for the clean level, which sampling never
/// evaluates). Only the steps for which `keep(step)` holds are recorded.
pub fn invert_with<F, K>(
    x0: &[f64],
    dims: [usize; 3],
    steps: usize,
    schedule: &NoiseSchedule,
    mut eval: F,
    keep: K,
) -> Result<Trajectory>
where
    F: FnMut(Option<usize>, usize, &[f64]) -> Result<Evaluation>,
    K: Fn(usize) -> bool,
{
    let [c, h, w] = dims;
    if x0.len() != c * h * w {
        return Err(shape_err!("latent has {} values, expected {c}x{h}x{w}", x0.len()));
    }
    if steps == 0 {
        return Ok(Trajectory {
            records: Vec::new(),
            final_latent: pixels_to_chw(x0, c, h, w)?,
        });
    }
    let levels = schedule.levels(steps)?;
    let mut x = x0.to_vec();
    let mut records = Vec::new();
    for j in 0..=steps {
        let step = (j > 0).then(|| steps - j);
        let ev = eval(step, levels[j], &x)?;
        if let Some(s) = step {
            if keep(s) {
                records.push(StepRecord {
                    step: s,
                    level: levels[j],
                    latent: pixels_to_chw(&x, c, h, w)?,
                    features: ev
                        .features
                        .iter()
                        .map(|f| Tensor::from_f64(&[h * w, f.len() / (h * w)], f))
                        .collect::<Result<_>>()?,
                    maps: ev
                        .maps
                        .iter()
                        .map(|[coarse, fine]| {
                            let nc = (h / 2) * (w / 2);
                            Ok([
                                Tensor::from_f64(&[nc, nc], coarse)?,
                                Tensor::from_f64(&[h * w, h * w], fine)?,
                            ])
                        })
                        .collect::<Result<_>>()?,
                });
            }
        }
        if j < steps {
            x = ddim_transfer_clamped(
                &x,
                &ev.eps,
                schedule.alpha_bar(levels[j]),
                schedule.alpha_bar(levels[j + 1]),
                DATA_BOUND,
            );
        }
    }
    records.reverse();
    Ok(Trajectory {
        records,
        final_latent: pixels_to_chw(&x, c, h, w)?,
    })
}

/// Runs `steps` DDIM updates from the noisiest level down to the clean one.
/// `eval(step, level, x)` returns the noise estimate.
pub fn sample_with<F>(x_start: &[f64], steps: usize, schedule: &NoiseSchedule, mut eval: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, usize, &[f64]) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Ok(x_start.to_vec());
    }
    let levels = schedule.levels(steps)?;
    let mut x = x_start.to_vec();
    for s in 0..steps {
        let (from, to) = (levels[steps - s], levels[steps - s - 1]);
        let eps = eval(s, from, &x)?;
        x = ddim_transfer_clamped(&x, &eps, schedule.alpha_bar(from), schedule.alpha_bar(to), DATA_BOUND);
    }
    Ok(x)
}

fn latent_dims(model: &ToyDenoiser, x: &Tensor) -> Result<[usize; 3]> {
    let a = model.architecture();
    let want = [a.in_channels, a.grid, a.grid];
    if x.dims() != want {
        return Err(shape_err!("latent dims {:?}, model expects {:?}", x.dims(), want));
    }
    Ok(want)
}

/// Unguided DDIM inversion of `x0` under `tokens`, recording every step.
pub fn ddim_invert(
    x0: &Tensor,
    tokens: &[usize],
    steps: usize,
    schedule: &NoiseSchedule,
    model: &ToyDenoiser,
) -> Result<Trajectory> {
    let dims = latent_dims(model, x0)?;
    invert_with(
        &chw_to_pixels(x0)?,
        dims,
        steps,
        schedule,
        |_, level, x| {
            let out = model.forward(x, level, tokens, ForwardOptions::default())?;
            Ok(Evaluation {
                eps: out.eps,
                features: alloc::vec![out.features],
                maps: alloc::vec![out.maps],
            })
        },
        |_| true,
    )
}

/// Unguided DDIM sampling from `x_start` under `tokens`.
pub fn ddim_sample(
    x_start: &Tensor,
    tokens: &[usize],
    steps: usize,
    schedule: &NoiseSchedule,
    model: &ToyDenoiser,
) -> Result<Tensor> {
    let [c, h, w] = latent_dims(model, x_start)?;
    let x = sample_with(&chw_to_pixels(x_start)?, steps, schedule, |_, level, x| {
        Ok(model.forward(x, level, tokens, ForwardOptions::default())?.eps)
    })?;
    pixels_to_chw(&x, c, h, w)
}
