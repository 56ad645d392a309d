//! Denoising-diffusion machinery over velocity fields: the variance
//! schedule, closed-form forward noising, single reverse step, and the full
//! sampling loop with a pluggable noise predictor.

use crate::denoiser::{ConditioningPack, EpsPredictor};
use crate::error::{Error, Result};
use crate::grid::VectorField;
use crate::Scalar;
use rand::Rng;

/// Default number of diffusion steps.
pub const DEFAULT_T: usize = 1000;
/// Default schedule endpoints at `T = 1000`; other step counts scale them
/// so the forward process still ends near an isotropic Gaussian.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Standard deviation of the initial draw of the reverse process.
pub const DEFAULT_INIT_STD: f64 = 0.1;

/// Variance schedule: beta, alpha = 1 - beta, alpha_bar = prod(alpha), and
/// the posterior sampling std per step. Index 0 corresponds to tau = 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<T: Scalar> {
    beta: Vec<T>,
    alpha: Vec<T>,
    alpha_bar: Vec<T>,
    posterior_sigma: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Linear beta ramp from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::InvalidParameter(
                "schedule needs at least one step".into(),
            ));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let mut beta = Vec::with_capacity(t_max);
        for tau in 0..t_max {
            let f = if t_max == 1 {
                0.0
            } else {
                tau as f64 / (t_max - 1) as f64
            };
            beta.push(T::of_f64(beta_start + f * (beta_end - beta_start)));
        }
        Self::from_betas(beta)
    }

    /// Default linear schedule for `t_max` steps: the standard endpoints
    /// are scaled by `1000 / t_max` so the cumulative noise level at the
    /// last step is independent of the step count.
    pub fn scaled_linear(t_max: usize) -> Result<Self> {
        let scale = DEFAULT_T as f64 / t_max as f64;
        let end = (DEFAULT_BETA_END * scale).min(0.995);
        let start = (DEFAULT_BETA_START * scale).min(end / 2.0);
        Self::linear(t_max, start, end)
    }

    /// A zero-step schedule: sampling returns the initial draw unchanged.
    pub fn empty() -> Self {
        Self {
            beta: Vec::new(),
            alpha: Vec::new(),
            alpha_bar: Vec::new(),
            posterior_sigma: Vec::new(),
        }
    }

    fn from_betas(beta: Vec<T>) -> Result<Self> {
        for w in beta.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidParameter(
                    "beta schedule must be strictly increasing".into(),
                ));
            }
        }
        if beta
            .iter()
            .any(|&b| !(b > T::zero() && b < T::one()) || !b.is_finite())
        {
            return Err(Error::InvalidParameter(
                "beta values must lie strictly inside (0, 1)".into(),
            ));
        }
        let mut alpha = Vec::with_capacity(beta.len());
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = T::one();
        for &b in &beta {
            let a = T::one() - b;
            prod = prod * a;
            alpha.push(a);
            alpha_bar.push(prod);
        }
        // posterior std: sqrt(beta_t * (1 - abar_{t-1}) / (1 - abar_t)),
        // with abar_0 = 1 so sigma_1 = 0
        let mut posterior_sigma = Vec::with_capacity(beta.len());
        for tau in 0..beta.len() {
            let abar_prev = if tau == 0 { T::one() } else { alpha_bar[tau - 1] };
            let var = beta[tau] * (T::one() - abar_prev) / (T::one() - alpha_bar[tau]);
            posterior_sigma.push(var.sqrt());
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            posterior_sigma,
        })
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    fn check_tau(&self, tau: usize) -> Result<()> {
        if tau < 1 || tau > self.t_max() {
            return Err(Error::IndexOutOfRange {
                index: tau,
                len: self.t_max(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, tau: usize) -> T {
        self.beta[tau - 1]
    }

    pub fn alpha(&self, tau: usize) -> T {
        self.alpha[tau - 1]
    }

    pub fn alpha_bar(&self, tau: usize) -> T {
        self.alpha_bar[tau - 1]
    }

    pub fn posterior_sigma(&self, tau: usize) -> T {
        self.posterior_sigma[tau - 1]
    }

    /// Closed-form noising: `y_tau = sqrt(abar) y0 + sqrt(1 - abar) eps`.
    pub fn forward_sample(
        &self,
        y0: &VectorField<T>,
        tau: usize,
        eps: &VectorField<T>,
    ) -> Result<VectorField<T>> {
        self.check_tau(tau)?;
        let abar = self.alpha_bar(tau);
        let mut out = y0.scaled(abar.sqrt());
        out.add_scaled(eps, (T::one() - abar).sqrt());
        Ok(out)
    }

    /// One forward step: `y_tau = sqrt(1 - beta) y_{tau-1} + sqrt(beta) eps`.
    pub fn forward_step(
        &self,
        y_prev: &VectorField<T>,
        tau: usize,
        eps: &VectorField<T>,
    ) -> Result<VectorField<T>> {
        self.check_tau(tau)?;
        let b = self.beta(tau);
        let mut out = y_prev.scaled((T::one() - b).sqrt());
        out.add_scaled(eps, b.sqrt());
        Ok(out)
    }

    /// Invert the closed form: `y0_hat = (y_tau - sqrt(1-abar) eps_hat) / sqrt(abar)`.
    pub fn predict_x0(
        &self,
        y_tau: &VectorField<T>,
        tau: usize,
        eps_hat: &VectorField<T>,
    ) -> Result<VectorField<T>> {
        self.check_tau(tau)?;
        let abar = self.alpha_bar(tau);
        let mut out = y_tau.clone();
        out.add_scaled(eps_hat, -(T::one() - abar).sqrt());
        Ok(out.scaled(T::one() / abar.sqrt()))
    }

    /// Cotangent of [`Self::predict_x0`] w.r.t. `eps_hat` (the map is linear).
    pub fn predict_x0_eps_cotangent(&self, tau: usize, d_y0: &VectorField<T>) -> Result<VectorField<T>> {
        self.check_tau(tau)?;
        let abar = self.alpha_bar(tau);
        Ok(d_y0.scaled(-(T::one() - abar).sqrt() / abar.sqrt()))
    }

    /// One ancestral reverse step:
    /// `y_{tau-1} = (y_tau - (1-alpha)/sqrt(1-abar) eps_hat) / sqrt(alpha) + sigma z`.
    pub fn reverse_step(
        &self,
        y_tau: &VectorField<T>,
        tau: usize,
        eps_hat: &VectorField<T>,
        z: &VectorField<T>,
    ) -> Result<VectorField<T>> {
        self.check_tau(tau)?;
        let a = self.alpha(tau);
        let abar = self.alpha_bar(tau);
        let coef = (T::one() - a) / (T::one() - abar).sqrt();
        let mut out = y_tau.clone();
        out.add_scaled(eps_hat, -coef);
        let mut out = out.scaled(T::one() / a.sqrt());
        out.add_scaled(z, self.posterior_sigma(tau));
        Ok(out)
    }
}

/// One point of a diffusion trajectory: the diffused field and its step.
#[derive(Debug, Clone)]
pub struct DiffusionState<T: Scalar> {
    pub y: VectorField<T>,
    pub tau: usize,
}

impl<T: Scalar> DiffusionState<T> {
    pub fn new(y: VectorField<T>, tau: usize, sched: &NoiseSchedule<T>) -> Result<Self> {
        if tau > sched.t_max() {
            return Err(Error::IndexOutOfRange {
                index: tau,
                len: sched.t_max(),
            });
        }
        if !y.is_finite() {
            return Err(Error::InvalidParameter(
                "diffusion state contains non-finite values".into(),
            ));
        }
        Ok(Self { y, tau })
    }
}

/// Draw a velocity field with i.i.d. normal components of std `std`.
pub fn normal_field<T: Scalar, R: Rng + ?Sized>(
    grid: crate::GridSpec,
    std: T,
    rng: &mut R,
) -> VectorField<T> {
    let mut f = VectorField::zeros(grid);
    for v in f.data_mut() {
        *v = T::standard_normal(rng) * std;
    }
    f
}

/// Run the full reverse chain: draw `y_T ~ N(0, init_std^2 I)`, denoise down
/// to `y_0`, and return it as the predicted initial velocity.
///
/// `x0_clamp`, when set, applies the standard static-thresholding
/// stabilization: each step clamps the implied clean estimate to
/// `[-bound, bound]` componentwise and re-derives the noise consistent
/// with it, which keeps the chain amplitude bounded no matter how far the
/// predictor drifts off-distribution.
///
/// `noise_scale` scales the per-step injection `sigma z`: 1 is ancestral
/// sampling, 0 the deterministic chain (the conditional-mean estimate).
pub fn sample<T: Scalar, P: EpsPredictor<T> + ?Sized, R: Rng + ?Sized>(
    sched: &NoiseSchedule<T>,
    denoiser: &P,
    cond: &ConditioningPack<T>,
    init_std: T,
    x0_clamp: Option<T>,
    noise_scale: T,
    rng: &mut R,
) -> Result<VectorField<T>> {
    let grid = *cond.grid();
    let mut state = DiffusionState::new(normal_field(grid, init_std, rng), sched.t_max(), sched)?;
    for tau in (1..=sched.t_max()).rev() {
        let mut eps_hat = denoiser.predict(&state.y, tau, cond)?;
        if let Some(bound) = x0_clamp {
            let x0 = sched.predict_x0(&state.y, tau, &eps_hat)?;
            let x0c = x0.clamped(bound);
            // noise consistent with the thresholded estimate
            let abar = sched.alpha_bar(tau);
            let mut e = state.y.clone();
            e.add_scaled(&x0c, -abar.sqrt());
            eps_hat = e.scaled(T::one() / (T::one() - abar).sqrt());
        }
        let z = if tau > 1 && noise_scale != T::zero() {
            normal_field(grid, noise_scale, rng)
        } else {
            VectorField::zeros(grid)
        };
        let y_prev = sched.reverse_step(&state.y, tau, &eps_hat, &z)?;
        state = DiffusionState::new(y_prev, tau - 1, sched).map_err(|_| Error::Divergence {
            step: tau,
            what: "reverse diffusion produced non-finite values".into(),
        })?;
    }
    Ok(state.y)
}

/// A noise predictor that knows the target field: it returns the per-step
/// consistent noise `(y_tau - sqrt(abar) y0) / sqrt(1 - abar)`. Useful as a
/// best-case oracle for the sampling loop.
pub struct OracleEpsPredictor<'a, T: Scalar> {
    pub target: &'a VectorField<T>,
    pub sched: &'a NoiseSchedule<T>,
}

impl<T: Scalar> EpsPredictor<T> for OracleEpsPredictor<'_, T> {
    fn predict(
        &self,
        y_tau: &VectorField<T>,
        tau: usize,
        _cond: &ConditioningPack<T>,
    ) -> Result<VectorField<T>> {
        let abar = self.sched.alpha_bar(tau);
        let mut out = y_tau.clone();
        out.add_scaled(self.target, -abar.sqrt());
        Ok(out.scaled(T::one() / (T::one() - abar).sqrt()))
    }
}
