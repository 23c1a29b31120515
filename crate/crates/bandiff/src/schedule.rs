//! Noise schedules for the diffusion chain: linear, cosine, and the p-power
//! family, plus the step-subset plan used for fast sampling.
//!
//! A schedule is the table (β_t, ᾱ_t, β̃_t) for t = 1..T, where
//! ᾱ_t = Π_{s≤t}(1−β_s) and β̃_t = (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t with ᾱ_0 := 1.
//! The running product is accumulated in double-double arithmetic before
//! rounding each entry to a 64-bit float; a plain sequential product drifts
//! measurably over 1000 factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which construction produced a schedule; recorded in checkpoints so
/// decode-time tables match train-time tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleVariant {
    Linear { beta0: f64, beta_t: f64 },
    Cosine { offset: f64 },
    Power { p: f64, beta0: f64, beta_t: f64 },
}

/// Immutable schedule table over steps 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
    variant: ScheduleVariant,
}

/// Ascending subset of {1..T} visited during sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    steps: Vec<usize>,
}

fn check_range(beta0: f64, beta_t: f64, t_max: usize) -> Result<()> {
    if !(beta0 > 0.0 && beta0 < beta_t && beta_t < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < beta0 < betaT < 1, got beta0={beta0}, betaT={beta_t}"
        )));
    }
    if t_max < 1 {
        return Err(Error::InvalidParameter("T must be >= 1".into()));
    }
    Ok(())
}

/// p-power schedule: β_t = (β₀^{1/p} + (t/T)(β_T^{1/p} − β₀^{1/p}))^p.
///
/// The endpoint t = T returns β_T exactly rather than through the power
/// round trip.
pub fn power_schedule(p: f64, beta0: f64, beta_t: f64, t_max: usize) -> Result<NoiseSchedule> {
    check_range(beta0, beta_t, t_max)?;
    if p <= 0.0 {
        return Err(Error::InvalidParameter(format!("p must be > 0, got {p}")));
    }
    let lo = beta0.powf(1.0 / p);
    let hi = beta_t.powf(1.0 / p);
    let betas = (1..=t_max)
        .map(|t| {
            if t == t_max {
                beta_t
            } else {
                let frac = t as f64 / t_max as f64;
                (lo + frac * (hi - lo)).powf(p)
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas, ScheduleVariant::Power { p, beta0, beta_t })
}

/// Straight-line interpolation of β between β₀ and β_T.
pub fn linear_schedule(beta0: f64, beta_t: f64, t_max: usize) -> Result<NoiseSchedule> {
    check_range(beta0, beta_t, t_max)?;
    let betas = (1..=t_max)
        .map(|t| beta0 + (t as f64 / t_max as f64) * (beta_t - beta0))
        .collect();
    NoiseSchedule::from_betas(betas, ScheduleVariant::Linear { beta0, beta_t })
}

/// Squared-cosine schedule: ᾱ_t ∝ cos²((t/T + offset)/(1 + offset)·π/2),
/// with β_t = 1 − ᾱ_t/ᾱ_{t−1} clipped to ≤ 0.999 and the ᾱ table rebuilt
/// from the clipped betas so the product invariant holds.
pub fn cosine_schedule(t_max: usize, offset: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::InvalidParameter("T must be >= 1".into()));
    }
    if offset <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "cosine offset must be > 0, got {offset}"
        )));
    }
    let f = |t: usize| -> f64 {
        let arg = (t as f64 / t_max as f64 + offset) / (1.0 + offset)
            * std::f64::consts::FRAC_PI_2;
        arg.cos().powi(2)
    };
    let mut prev = f(0);
    let betas = (1..=t_max)
        .map(|t| {
            let cur = f(t);
            let beta = (1.0 - cur / prev).min(0.999);
            prev = cur;
            beta
        })
        .collect();
    NoiseSchedule::from_betas(betas, ScheduleVariant::Cosine { offset })
}

impl NoiseSchedule {
    /// Build the ᾱ and β̃ tables from a β sequence, validating invariants.
    fn from_betas(betas: Vec<f64>, variant: ScheduleVariant) -> Result<Self> {
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "beta[{}] = {b} outside (0, 1)",
                    i + 1
                )));
            }
        }
        // Double-double running product: hi + lo carries ~32 digits so the
        // stored f64 table entries are correctly rounded products.
        let mut hi = 1.0f64;
        let mut lo = 0.0f64;
        let mut alphas_bar = Vec::with_capacity(betas.len());
        for &b in &betas {
            let a = 1.0 - b;
            let p = hi * a;
            let e = hi.mul_add(a, -p) + lo * a;
            hi = p + e;
            lo = (p - hi) + e;
            alphas_bar.push(hi);
        }
        for (i, pair) in alphas_bar.windows(2).enumerate() {
            if pair[1] >= pair[0] {
                return Err(Error::InvalidParameter(format!(
                    "alpha_bar not strictly decreasing at t = {}",
                    i + 2
                )));
            }
        }
        if alphas_bar[alphas_bar.len() - 1] <= 0.0 || alphas_bar[0] >= 1.0 {
            return Err(Error::InvalidParameter(
                "alpha_bar left the open interval (0, 1)".into(),
            ));
        }
        // beta_tilde[0] is 0 exactly: with abar_0 := 1 the posterior
        // variance limit at the first step vanishes.
        let beta_tilde = betas
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let a_prev = if i == 0 { 1.0 } else { alphas_bar[i - 1] };
                (1.0 - a_prev) / (1.0 - alphas_bar[i]) * b
            })
            .collect();
        Ok(Self {
            t_max: betas.len(),
            betas,
            alphas_bar,
            beta_tilde,
            variant,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn variant(&self) -> ScheduleVariant {
        self.variant
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(Error::StepOutOfRange {
                t,
                t_max: self.t_max,
            });
        }
        Ok(())
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for t in 0..=T, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alphas_bar[t - 1])
    }

    /// β̃_t for t in 1..=T; β̃_1 = 0.
    pub fn beta_tilde(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta_tilde[t - 1])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn beta_tildes(&self) -> &[f64] {
        &self.beta_tilde
    }

    /// CSV table `t,beta,alpha_bar,beta_tilde`, one row per step, floats in
    /// shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,beta_tilde\n");
        for t in 1..=self.t_max {
            out.push_str(&format!(
                "{},{},{},{}\n",
                t,
                self.betas[t - 1],
                self.alphas_bar[t - 1],
                self.beta_tilde[t - 1]
            ));
        }
        out
    }
}

impl StepPlan {
    /// The subset {round(i·T/N) : i = 1..N}, deduplicated, ascending.
    pub fn subsample(t_max: usize, n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidParameter("plan needs N >= 1".into()));
        }
        if n > t_max {
            return Err(Error::InvalidParameter(format!(
                "N = {n} exceeds T = {t_max}"
            )));
        }
        let mut steps: Vec<usize> = (1..=n)
            .map(|i| (i as f64 * t_max as f64 / n as f64).round() as usize)
            .collect();
        steps.dedup();
        Ok(Self { steps })
    }

    /// Every step 1..=T.
    pub fn full(t_max: usize) -> Self {
        Self {
            steps: (1..=t_max).collect(),
        }
    }

    /// Explicit plan; must be strictly ascending within 1..=T.
    pub fn from_steps(steps: Vec<usize>, t_max: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidParameter("plan needs >= 1 step".into()));
        }
        for pair in steps.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidParameter(
                    "plan steps must be strictly ascending".into(),
                ));
            }
        }
        if steps[0] < 1 || *steps.last().unwrap() > t_max {
            return Err(Error::StepOutOfRange {
                t: *steps.last().unwrap(),
                t_max,
            });
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn n(&self) -> usize {
        self.steps.len()
    }
}
