use alloc::vec::Vec;

use crate::error::{domain_err, shape_err, Result};
use crate::tensor::Tensor;

/// Linear beta schedule with cumulative products `alpha_bar[t]` for
/// `t = 0..=T`, where `alpha_bar[0] = 1` is the clean signal.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

pub fn make_schedule(t_train: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(domain_err!("schedule needs at least one timestep"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(domain_err!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        ));
    }
    let betas: Vec<f64> = if t_train == 1 {
        alloc::vec![beta_min]
    } else {
        let span = (t_train - 1) as f64;
        (0..t_train)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / span)
            .collect()
    };
    let mut alphas_bar = Vec::with_capacity(t_train + 1);
    alphas_bar.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alphas_bar.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas_bar })
}

impl NoiseSchedule {
    /// Number of training timesteps `T`.
    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t = 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    /// Evenly spaced levels `0 = l_0 < l_1 < ... < l_steps = T` visited by a
    /// `steps`-step sampler.
    pub fn levels(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.train_steps();
        if steps > t {
            return Err(domain_err!("{steps} sampling steps exceed {t} training steps"));
        }
        Ok((0..=steps).map(|i| i * t / steps.max(1)).collect())
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.train_steps() {
            return Err(domain_err!("timestep {t} beyond schedule length {}", self.train_steps()));
        }
        Ok(())
    }
}

/// Deterministic DDIM transfer of `x` from level `from` to level `to` using the
/// noise estimate `eps`. Works in both directions.
pub(crate) fn ddim_transfer(x: &[f64], eps: &[f64], ab_from: f64, ab_to: f64) -> Vec<f64> {
    let (sa_from, sn_from) = (libm::sqrt(ab_from), libm::sqrt(1.0 - ab_from));
    let (sa_to, sn_to) = (libm::sqrt(ab_to), libm::sqrt(1.0 - ab_to));
    x.iter()
        .zip(eps)
        .map(|(&xt, &e)| {
            let x0 = (xt - sn_from * e) / sa_from;
            sa_to * x0 + sn_to * e
        })
        .collect()
}

/// [`ddim_transfer`] with the predicted clean signal clamped to
/// `[-bound, bound]` and the noise estimate re-derived from the clamp, so a
/// poor estimate at high noise cannot throw the latent off the data range.
pub(crate) fn ddim_transfer_clamped(x: &[f64], eps: &[f64], ab_from: f64, ab_to: f64, bound: f64) -> Vec<f64> {
    let (sa_from, sn_from) = (libm::sqrt(ab_from), libm::sqrt(1.0 - ab_from));
    let (sa_to, sn_to) = (libm::sqrt(ab_to), libm::sqrt(1.0 - ab_to));
    x.iter()
        .zip(eps)
        .map(|(&xt, &e)| {
            let x0 = ((xt - sn_from * e) / sa_from).clamp(-bound, bound);
            let e = if sn_from > 0.0 { (xt - sa_from * x0) / sn_from } else { e };
            sa_to * x0 + sn_to * e
        })
        .collect()
}

/// One deterministic DDIM update from `t` down to `t_prev`.
pub fn ddim_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    x_t.ensure_same_shape(eps_hat)?;
    schedule.check(t)?;
    if t_prev > t {
        return Err(domain_err!("ddim_step goes from t={t} down, got t_prev={t_prev}"));
    }
    let out = ddim_transfer(
        &x_t.to_f64(),
        &eps_hat.to_f64(),
        schedule.alpha_bar(t),
        schedule.alpha_bar(t_prev),
    );
    Tensor::from_f64(x_t.dims(), &out)
}

/// Inverse of [`ddim_step`]: moves from `t` up to `t_next`.
pub fn ddim_inverse_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    x_t.ensure_same_shape(eps_hat)?;
    schedule.check(t_next)?;
    if t_next < t {
        return Err(domain_err!("inverse step goes from t={t} up, got t_next={t_next}"));
    }
    let out = ddim_transfer(
        &x_t.to_f64(),
        &eps_hat.to_f64(),
        schedule.alpha_bar(t),
        schedule.alpha_bar(t_next),
    );
    Tensor::from_f64(x_t.dims(), &out)
}

/// Forward noising `sqrt(ab) x0 + sqrt(1 - ab) noise`.
pub fn add_noise(x0: &Tensor, noise: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    x0.ensure_same_shape(noise)?;
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    let out: Vec<f64> = noise_mix(&x0.to_f64(), &noise.to_f64(), ab);
    Tensor::from_f64(x0.dims(), &out)
}

pub(crate) fn noise_mix(x0: &[f64], noise: &[f64], ab: f64) -> Vec<f64> {
    let (sa, sn) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    x0.iter().zip(noise).map(|(&x, &n)| sa * x + sn * n).collect()
}

/// Classifier-free guidance `uncond + scale * (cond - uncond)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f32) -> Result<Tensor> {
    if eps_uncond.dims() != eps_cond.dims() {
        return Err(shape_err!(
            "guidance inputs differ: {:?} vs {:?}",
            eps_uncond.dims(),
            eps_cond.dims()
        ));
    }
    let out = cfg_mix(&eps_uncond.to_f64(), &eps_cond.to_f64(), scale as f64);
    Tensor::from_f64(eps_cond.dims(), &out)
}

pub(crate) fn cfg_mix(uncond: &[f64], cond: &[f64], scale: f64) -> Vec<f64> {
    uncond
        .iter()
        .zip(cond)
        .map(|(&u, &c)| u + scale * (c - u))
        .collect()
}
