//! The DDPM engine: closed-form forward corruption, training-pair
//! assembly, the reverse sampling step with sigma_t^2 = beta_tilde_t, and
//! subset-of-steps sampling.
//!
//! Everything operates on flat real sequences; band structure and audio
//! semantics live one level up. An analytic Gaussian-posterior denoiser
//! provides exact ground truth for testing the chain end to end.

use crate::conditioner::ConditioningFrames;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedule::{NoiseSchedule, StepPlan};

/// Noise predictor: given the corrupted sequence at step `t` and optional
/// conditioning, estimate the standard-normal noise that produced it.
/// Implementations must return a finite sequence of the input's length.
pub trait Denoiser {
    fn predict(&self, x_t: &[f64], t: usize, cond: Option<&ConditioningFrames>)
        -> Result<Vec<f64>>;
}

/// Closed-form posterior denoiser for data drawn from N(mu, s^2) per
/// dimension. Exact, so it verifies the sampling loop without any
/// training in the loop.
#[derive(Debug, Clone, Copy)]
pub struct GaussianOracle {
    mu: f64,
    s: f64,
}

impl GaussianOracle {
    pub fn new(mu: f64, s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() || !mu.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "GaussianOracle needs finite mu and s > 0, got mu={mu}, s={s}"
            )));
        }
        Ok(Self { mu, s })
    }
}

/// Posterior mean of the noise given `x_t` when the clean data is
/// N(mu, s^2) per dimension:
/// E[eps | x_t] = sqrt(1-abar_t) * (x_t - sqrt(abar_t)*mu) / (abar_t*s^2 + 1 - abar_t).
pub fn oracle_eps(
    x_t: &[f64],
    t: usize,
    mu: f64,
    s: f64,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if !(s > 0.0) {
        return Err(Error::InvalidParameter(format!("oracle needs s > 0, got {s}")));
    }
    if t < 1 {
        return Err(Error::StepOutOfRange { t, t_max: sched.t_max() });
    }
    let abar = sched.alpha_bar(t)?;
    let scale = (1.0 - abar).sqrt() / (abar * s * s + 1.0 - abar);
    let shift = abar.sqrt() * mu;
    Ok(x_t.iter().map(|&x| scale * (x - shift)).collect())
}

/// A [`GaussianOracle`] bound to the schedule its posterior is computed
/// under. The oracle's formula needs alpha-bar lookups, so the pairing is
/// what implements [`Denoiser`]; trained models bake their schedule in
/// instead.
#[derive(Debug, Clone)]
pub struct OracleWithSchedule<'a> {
    pub oracle: GaussianOracle,
    pub sched: &'a NoiseSchedule,
}

impl Denoiser for OracleWithSchedule<'_> {
    fn predict(
        &self,
        x_t: &[f64],
        t: usize,
        _cond: Option<&ConditioningFrames>,
    ) -> Result<Vec<f64>> {
        oracle_eps(x_t, t, self.oracle.mu, self.oracle.s, self.sched)
    }
}

/// Closed-form forward corruption:
/// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
pub fn forward_sample(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::LengthMismatch { left: x0.len(), right: eps.len() });
    }
    if t < 1 {
        return Err(Error::StepOutOfRange { t, t_max: sched.t_max() });
    }
    let abar = sched.alpha_bar(t)?;
    let a = abar.sqrt();
    let b = (1.0 - abar).sqrt();
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// One supervised example for noise prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Draw t uniform on {1..T} and eps standard normal, then corrupt.
pub fn training_pair(
    x0: &[f64],
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<TrainingPair> {
    if let Some(bad) = x0.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("training pair assembly: input contains {bad}"),
            step: 0,
        });
    }
    let t = 1 + rng.uniform_usize(sched.t_max());
    let eps = rng.normal_vec(x0.len());
    let x_t = forward_sample(x0, t, &eps, sched)?;
    Ok(TrainingPair { x_t, t, eps })
}

/// Mean squared error between true and predicted noise.
pub fn noise_loss(eps: &[f64], eps_hat: &[f64]) -> Result<f64> {
    if eps.len() != eps_hat.len() {
        return Err(Error::LengthMismatch { left: eps.len(), right: eps_hat.len() });
    }
    if eps.is_empty() {
        return Err(Error::InvalidParameter("loss over zero samples".into()));
    }
    let sum: f64 = eps.iter().zip(eps_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / eps.len() as f64)
}

/// Reverse update with explicit coefficients:
/// x_prev = (x_t - beta/sqrt(1-abar) * eps_hat) / sqrt(1-beta)
///          + sqrt(beta_tilde) * noise.
/// `noise` omitted means zero (the final-step convention).
pub fn reverse_step_with(
    x_t: &[f64],
    beta: f64,
    alpha_bar: f64,
    beta_tilde: f64,
    eps_hat: &[f64],
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if x_t.len() != eps_hat.len() {
        return Err(Error::LengthMismatch { left: x_t.len(), right: eps_hat.len() });
    }
    if let Some(z) = noise {
        if z.len() != x_t.len() {
            return Err(Error::LengthMismatch { left: x_t.len(), right: z.len() });
        }
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameter(format!("beta must be in (0,1), got {beta}")));
    }
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha_bar must be in (0,1), got {alpha_bar}"
        )));
    }
    if !(beta_tilde >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "beta_tilde must be >= 0, got {beta_tilde}"
        )));
    }
    let inv = 1.0 / (1.0 - beta).sqrt();
    let coef = beta / (1.0 - alpha_bar).sqrt();
    let sigma = beta_tilde.sqrt();
    let mut out = Vec::with_capacity(x_t.len());
    for i in 0..x_t.len() {
        let mean = inv * (x_t[i] - coef * eps_hat[i]);
        let z = noise.map_or(0.0, |n| n[i]);
        out.push(mean + sigma * z);
    }
    Ok(out)
}

/// Reverse update using the stored schedule row at `t`.
pub fn reverse_step(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    reverse_step_with(
        x_t,
        sched.beta(t)?,
        sched.alpha_bar(t)?,
        sched.beta_tilde(t)?,
        eps_hat,
        noise,
    )
}

/// One row of a sampling trace: the step index, the state norm on entry,
/// and the norm of the noise prediction made there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub x_norm: f64,
    pub eps_norm: f64,
}

/// Render trace rows as CSV for the debug artifact.
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("t,x_norm,eps_norm\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.t, r.x_norm, r.eps_norm));
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Run the reverse chain over `plan.steps()` descending, starting from
/// `prior`. Between retained steps t_lo < t_hi the coefficients come from
/// the alpha-bar table at those two indices (beta_hat = 1 - abar_hi/abar_lo,
/// beta_tilde_hat = (1-abar_lo)/(1-abar_hi) * beta_hat); adjacent steps use
/// the stored rows verbatim so a dense plan reproduces full sampling
/// bit-exactly. Gaussian noise is injected at every step except the last.
pub fn sample(
    denoiser: &dyn Denoiser,
    cond: Option<&ConditioningFrames>,
    sched: &NoiseSchedule,
    plan: &StepPlan,
    prior: &[f64],
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    Ok(sample_traced(denoiser, cond, sched, plan, prior, rng)?.0)
}

/// [`sample`] that also records per-step diagnostics.
pub fn sample_traced(
    denoiser: &dyn Denoiser,
    cond: Option<&ConditioningFrames>,
    sched: &NoiseSchedule,
    plan: &StepPlan,
    prior: &[f64],
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<TraceRow>)> {
    if prior.is_empty() {
        return Err(Error::InvalidParameter("prior must be non-empty".into()));
    }
    let steps = plan.steps();
    if steps.last().is_some_and(|&hi| hi > sched.t_max()) {
        return Err(Error::StepOutOfRange {
            t: *steps.last().unwrap(),
            t_max: sched.t_max(),
        });
    }
    let mut x = prior.to_vec();
    let mut trace = Vec::with_capacity(steps.len());
    for k in (0..steps.len()).rev() {
        let t_hi = steps[k];
        let t_lo = if k > 0 { steps[k - 1] } else { 0 };
        let eps_hat = denoiser.predict(&x, t_hi, cond)?;
        if eps_hat.len() != x.len() {
            return Err(Error::Shape(format!(
                "denoiser returned {} values for {} inputs at t={t_hi}",
                eps_hat.len(),
                x.len()
            )));
        }
        if eps_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "denoiser output while sampling".into(),
                step: t_hi as u64,
            });
        }
        trace.push(TraceRow {
            t: t_hi,
            x_norm: norm(&x),
            eps_norm: norm(&eps_hat),
        });
        let (beta, beta_tilde) = if t_lo + 1 == t_hi {
            (sched.beta(t_hi)?, sched.beta_tilde(t_hi)?)
        } else {
            let a_hi = sched.alpha_bar(t_hi)?;
            let a_lo = sched.alpha_bar(t_lo)?;
            let beta_hat = 1.0 - a_hi / a_lo;
            (beta_hat, (1.0 - a_lo) / (1.0 - a_hi) * beta_hat)
        };
        let noise = if k > 0 { Some(rng.normal_vec(x.len())) } else { None };
        x = reverse_step_with(
            &x,
            beta,
            sched.alpha_bar(t_hi)?,
            beta_tilde,
            &eps_hat,
            noise.as_deref(),
        )?;
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("reverse chain state diverged to {bad}"),
                step: t_hi as u64,
            });
        }
    }
    Ok((x, trace))
}

/// KL divergence between the schedule's terminal forward distribution
/// N(sqrt(abar_T) x0, (1-abar_T) I) and the standard-normal prior it is
/// approximated by, for a `dim`-dimensional x0 with squared norm
/// `x0_norm_sq`.
pub fn prior_kl(sched: &NoiseSchedule, dim: usize, x0_norm_sq: f64) -> Result<f64> {
    if dim == 0 || !(x0_norm_sq >= 0.0) {
        return Err(Error::InvalidParameter(
            "prior_kl needs dim >= 1 and x0_norm_sq >= 0".into(),
        ));
    }
    let abar = sched.alpha_bar(sched.t_max())?;
    let var = 1.0 - abar;
    let d = dim as f64;
    Ok(0.5 * (d * var - d + abar * x0_norm_sq - d * var.ln()))
}
