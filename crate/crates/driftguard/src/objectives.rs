//! Training objectives: the conditional denoising loss, the prior-preservation
//! variant, and the Lipschitz-regularized total with its parameter-distance
//! penalty.
//!
//! Noise draws (t, eps) are sampled per batch item. Every loss has a
//! `*_given` form taking explicit draws so tests can pin the stochastic part;
//! the RNG-taking wrappers sample draws and delegate.

use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{accumulate_backward, forward, Gradients, ModelParams};
use crate::rng::Rng;

/// Norm variant for the parameter-distance regularizer.
///
/// Distances accumulate tensor-by-tensor (one term per parameter group). For
/// `L1` and `L2Squared` this equals the flattened-vector norm; for plain `L2`
/// it is the sum of per-tensor Euclidean norms, which differs from the
/// flattened norm whenever more than one tensor changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
    L2Squared,
}

impl Norm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::L2Squared => "l2sq",
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            "l2sq" | "l2_squared" => Ok(Norm::L2Squared),
            other => Err(Error::Config(format!(
                "unknown norm '{other}' (expected l1, l2 or l2sq)"
            ))),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Loss components; `total = denoise + prior_weight * prior + lambda * lipschitz`
/// with unused terms held at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub denoise: f64,
    pub prior: f64,
    pub lipschitz: f64,
    pub total: f64,
    pub lambda: f64,
    pub prior_weight: f64,
}

impl LossBreakdown {
    fn denoise_only(loss: f64) -> Self {
        LossBreakdown {
            denoise: loss,
            prior: 0.0,
            lipschitz: 0.0,
            total: loss,
            lambda: 0.0,
            prior_weight: 0.0,
        }
    }
}

/// One (timestep, noise) draw for a batch item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: [f64; 2],
}

/// Per-item draws: timestep uniform over 0..timesteps, then a standard-normal
/// noise pair. The t-before-eps order per item is part of the determinism
/// contract.
pub fn draw_noise(rng: &mut Rng, n: usize, timesteps: usize) -> Vec<NoiseDraw> {
    (0..n)
        .map(|_| NoiseDraw {
            t: rng.below(timesteps),
            eps: rng.normal2(),
        })
        .collect()
}

/// Denoising loss with explicit draws: mean over the batch of
/// `||eps - eps_hat(x_t, c, t)||^2`, plus its exact gradient.
pub fn denoise_loss_given(
    params: &ModelParams,
    batch: &[([f64; 2], usize)],
    draws: &[NoiseDraw],
    sched: &NoiseSchedule,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Input("denoise loss needs a non-empty batch".into()));
    }
    if batch.len() != draws.len() {
        return Err(Error::Internal(format!(
            "batch has {} items but {} draws",
            batch.len(),
            draws.len()
        )));
    }
    let mut grads = Gradients::zeros(params.arch);
    let inv_n = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (&(x0, c), draw) in batch.iter().zip(draws) {
        let x_t = forward_diffuse(x0, draw.t, draw.eps, sched);
        let (eps_hat, cache) = forward(params, x_t, draw.t, c)?;
        let r = [eps_hat[0] - draw.eps[0], eps_hat[1] - draw.eps[1]];
        loss += r[0] * r[0] + r[1] * r[1];
        accumulate_backward(params, &cache, [2.0 * r[0] * inv_n, 2.0 * r[1] * inv_n], &mut grads)?;
    }
    Ok((loss * inv_n, grads))
}

/// Denoising loss with fresh per-item draws from `rng`.
pub fn denoise_loss(
    params: &ModelParams,
    batch: &[([f64; 2], usize)],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(LossBreakdown, Gradients)> {
    let draws = draw_noise(rng, batch.len(), sched.steps());
    let (loss, grads) = denoise_loss_given(params, batch, &draws, sched)?;
    Ok((LossBreakdown::denoise_only(loss), grads))
}

/// Parameter distance between two congruent parameter sets, accumulated
/// tensor-by-tensor under the chosen norm.
pub fn param_distance(a: &ModelParams, b: &ModelParams, norm: Norm) -> Result<f64> {
    if !a.congruent(b) {
        return Err(Error::Input("param_distance: architecture mismatch".into()));
    }
    let mut total = 0.0;
    for ((_, ta), (_, tb)) in a.tensors().into_iter().zip(b.tensors()) {
        match norm {
            Norm::L1 => {
                total += ta.iter().zip(tb).map(|(x, y)| (x - y).abs()).sum::<f64>();
            }
            Norm::L2 => {
                let sq: f64 = ta.iter().zip(tb).map(|(x, y)| (x - y).powi(2)).sum();
                total += sq.sqrt();
            }
            Norm::L2Squared => {
                total += ta.iter().zip(tb).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            }
        }
    }
    Ok(total)
}

/// Adds `lambda * d(param_distance)/d(per)` into `grads`.
fn accumulate_distance_gradient(
    grads: &mut Gradients,
    per: &ModelParams,
    base: &ModelParams,
    lambda: f64,
    norm: Norm,
) {
    for (((_, g), (_, tp)), (_, tb)) in grads
        .tensors_mut()
        .into_iter()
        .zip(per.tensors())
        .zip(base.tensors())
    {
        match norm {
            Norm::L1 => {
                for (gv, (p, b)) in g.iter_mut().zip(tp.iter().zip(tb)) {
                    let d = p - b;
                    if d > 0.0 {
                        *gv += lambda;
                    } else if d < 0.0 {
                        *gv -= lambda;
                    }
                }
            }
            Norm::L2 => {
                let sq: f64 = tp.iter().zip(tb).map(|(p, b)| (p - b).powi(2)).sum();
                if sq > 0.0 {
                    let inv = 1.0 / sq.sqrt();
                    for (gv, (p, b)) in g.iter_mut().zip(tp.iter().zip(tb)) {
                        *gv += lambda * (p - b) * inv;
                    }
                }
            }
            Norm::L2Squared => {
                for (gv, (p, b)) in g.iter_mut().zip(tp.iter().zip(tb)) {
                    *gv += lambda * 2.0 * (p - b);
                }
            }
        }
    }
}

/// Lipschitz-regularized objective with explicit draws:
/// `denoise(per) + lambda * param_distance(per, base, norm)`.
///
/// `base` is the frozen teacher; gradients flow only to `per`. With
/// `lambda == 0` the regularizer is skipped entirely, making the result
/// bit-identical to the plain denoising loss.
pub fn lipschitz_total_given(
    params_per: &ModelParams,
    params_base: &ModelParams,
    batch: &[([f64; 2], usize)],
    draws: &[NoiseDraw],
    lambda: f64,
    norm: Norm,
    sched: &NoiseSchedule,
) -> Result<(LossBreakdown, Gradients)> {
    if !params_per.congruent(params_base) {
        return Err(Error::Input("lipschitz_total: architecture mismatch".into()));
    }
    let (denoise, mut grads) = denoise_loss_given(params_per, batch, draws, sched)?;
    let lipschitz = if lambda == 0.0 {
        0.0
    } else {
        let dist = param_distance(params_per, params_base, norm)?;
        accumulate_distance_gradient(&mut grads, params_per, params_base, lambda, norm);
        dist
    };
    Ok((
        LossBreakdown {
            denoise,
            prior: 0.0,
            lipschitz,
            total: denoise + lambda * lipschitz,
            lambda,
            prior_weight: 0.0,
        },
        grads,
    ))
}

/// Lipschitz-regularized objective with fresh draws from `rng`.
pub fn lipschitz_total(
    params_per: &ModelParams,
    params_base: &ModelParams,
    batch: &[([f64; 2], usize)],
    lambda: f64,
    norm: Norm,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(LossBreakdown, Gradients)> {
    let draws = draw_noise(rng, batch.len(), sched.steps());
    lipschitz_total_given(params_per, params_base, batch, &draws, lambda, norm, sched)
}

/// Prior-preservation objective with explicit draws:
/// `denoise(target) + prior_weight * denoise(prior)`.
///
/// With `prior_weight == 0` the prior batch is not evaluated and the result is
/// identical to the plain denoising loss on the target batch.
pub fn prior_preservation_given(
    params: &ModelParams,
    batch_target: &[([f64; 2], usize)],
    draws_target: &[NoiseDraw],
    batch_prior: &[([f64; 2], usize)],
    draws_prior: &[NoiseDraw],
    prior_weight: f64,
    sched: &NoiseSchedule,
) -> Result<(LossBreakdown, Gradients)> {
    if batch_target.is_empty() || batch_prior.is_empty() {
        return Err(Error::Input(
            "prior preservation needs non-empty target and prior batches".into(),
        ));
    }
    let (target_loss, mut grads) = denoise_loss_given(params, batch_target, draws_target, sched)?;
    let prior_loss = if prior_weight == 0.0 {
        0.0
    } else {
        let (pl, pg) = denoise_loss_given(params, batch_prior, draws_prior, sched)?;
        grads.add_scaled(&pg, prior_weight);
        pl
    };
    Ok((
        LossBreakdown {
            denoise: target_loss,
            prior: prior_loss,
            lipschitz: 0.0,
            total: target_loss + prior_weight * prior_loss,
            lambda: 0.0,
            prior_weight,
        },
        grads,
    ))
}

/// Prior-preservation objective with fresh draws from `rng`; target-batch
/// draws are consumed before prior-batch draws.
pub fn prior_preservation_total(
    params: &ModelParams,
    batch_target: &[([f64; 2], usize)],
    batch_prior: &[([f64; 2], usize)],
    prior_weight: f64,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(LossBreakdown, Gradients)> {
    if batch_target.is_empty() || batch_prior.is_empty() {
        return Err(Error::Input(
            "prior preservation needs non-empty target and prior batches".into(),
        ));
    }
    let draws_target = draw_noise(rng, batch_target.len(), sched.steps());
    let draws_prior = draw_noise(rng, batch_prior.len(), sched.steps());
    prior_preservation_given(
        params,
        batch_target,
        &draws_target,
        batch_prior,
        &draws_prior,
        prior_weight,
        sched,
    )
}
