//! Discrete diffusion noise schedule and the single-step forward/reverse
//! kernels.
//!
//! The forward marginal is `q(x_t | x) = N(sqrt(abar_t) x, (1 - abar_t) I)`
//! and the reverse update is
//!
//! ```text
//! x_{t-1} = sqrt(abar_{t-1}) beta_t / (1 - abar_t) * xhat0
//!         + sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t) * x_t
//!         + sqrt(tilde_beta_t) * z
//! ```
//!
//! with `abar_0 := 1`, which makes the t = 1 step return `xhat0` exactly.

use crate::error::{Error, Result};

/// Immutable noise schedule: `beta_t`, `alpha_t = 1 - beta_t`,
/// `abar_t = prod alpha_s`, and the posterior variance `tilde_beta_t`.
///
/// Arrays are indexed directly by timestep; index 0 holds the `abar_0 = 1`
/// convention and is unused for `beta`/`alpha`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    one_minus_alpha_bar: Vec<f64>,
    tilde_beta: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta interpolation over `t_max` steps, endpoints inclusive.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::Config("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid beta range [{beta_start}, {beta_end}]: need 0 < start <= end < 1"
            )));
        }
        let mut beta = vec![f64::NAN; t_max + 1];
        for t in 1..=t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                (t - 1) as f64 / (t_max - 1) as f64
            };
            beta[t] = beta_start + frac * (beta_end - beta_start);
        }
        Ok(Self::from_betas(t_max, beta))
    }

    /// Builds the derived arrays from explicit per-step betas
    /// (`beta[t]` for `t in 1..=t_max`; `beta[0]` is ignored).
    pub fn from_betas(t_max: usize, beta: Vec<f64>) -> Self {
        assert_eq!(beta.len(), t_max + 1);
        let mut alpha = vec![f64::NAN; t_max + 1];
        let mut alpha_bar = vec![1.0; t_max + 1];
        let mut one_minus = vec![0.0; t_max + 1];
        let mut tilde = vec![f64::NAN; t_max + 1];
        for t in 1..=t_max {
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
            // 1 - abar_1 = beta_1 exactly; the general subtraction loses a
            // few ulps there, which the t = 1 identity step cannot afford.
            one_minus[t] = if t == 1 { beta[1] } else { 1.0 - alpha_bar[t] };
            tilde[t] = one_minus[t - 1] / one_minus[t] * beta[t];
        }
        NoiseSchedule {
            t_max,
            beta,
            alpha,
            alpha_bar,
            one_minus_alpha_bar: one_minus,
            tilde_beta: tilde,
        }
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "beta defined for 1..=T");
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "alpha defined for 1..=T");
        self.alpha[t]
    }

    /// `abar_t` with `abar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max);
        self.alpha_bar[t]
    }

    /// `1 - abar_t`, with the t = 0 and t = 1 values stored exactly.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max);
        self.one_minus_alpha_bar[t]
    }

    /// Posterior variance `tilde_beta_t = (1 - abar_{t-1})/(1 - abar_t) * beta_t`.
    pub fn tilde_beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t));
        self.tilde_beta[t]
    }

    /// Coefficients `(c0, c1, sigma)` of the reverse update
    /// `x_{t-1} = c0 * xhat0 + c1 * x_t + sigma * z`.
    pub fn reverse_coefficients(&self, t: usize) -> (f64, f64, f64) {
        assert!(
            (1..=self.t_max).contains(&t),
            "reverse step defined for t in 1..=T"
        );
        let om = self.one_minus_alpha_bar[t];
        let c0 = self.alpha_bar[t - 1].sqrt() * self.beta[t] / om;
        let c1 = self.alpha[t].sqrt() * self.one_minus_alpha_bar[t - 1] / om;
        (c0, c1, self.tilde_beta[t].sqrt())
    }

    /// Effective coefficients for a strided reverse step from `t_hi` directly
    /// to `t_lo < t_hi`, treating `abar` ratios as the step's alpha. With
    /// `t_lo == 0` the update degenerates to the identity on `xhat0`
    /// (`abar_0 = 1`), mirroring the native t = 1 step.
    pub fn strided_coefficients(&self, t_hi: usize, t_lo: usize) -> (f64, f64, f64) {
        assert!(t_lo < t_hi && t_hi <= self.t_max);
        if t_lo == 0 {
            return (1.0, 0.0, 0.0);
        }
        let ab_hi = self.alpha_bar[t_hi];
        let ab_lo = self.alpha_bar[t_lo];
        let alpha_eff = ab_hi / ab_lo;
        let beta_eff = 1.0 - alpha_eff;
        let om_hi = self.one_minus_alpha_bar[t_hi];
        let om_lo = self.one_minus_alpha_bar[t_lo];
        let c0 = ab_lo.sqrt() * beta_eff / om_hi;
        let c1 = alpha_eff.sqrt() * om_lo / om_hi;
        let sigma = (om_lo / om_hi * beta_eff).sqrt();
        (c0, c1, sigma)
    }
}

/// `x_t = sqrt(abar_t) x + sqrt(1 - abar_t) z`; `t = 0` returns `x` exactly.
pub fn forward_diffuse(x: &[f64], t: usize, z: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if x.len() != z.len() {
        return Err(Error::Shape(format!(
            "forward_diffuse dimension mismatch: x has {}, z has {}",
            x.len(),
            z.len()
        )));
    }
    let a = sched.alpha_bar(t).sqrt();
    let b = sched.one_minus_alpha_bar(t).sqrt();
    Ok(x.iter().zip(z).map(|(&xv, &zv)| a * xv + b * zv).collect())
}

/// One reverse update at step `t in 1..=T`. `z` must be zero at `t = 1`.
pub fn reverse_step(
    x_hat0: &[f64],
    x_t: &[f64],
    t: usize,
    z: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::Contract("reverse_step requires t >= 1".into()));
    }
    if x_hat0.len() != x_t.len() || x_t.len() != z.len() {
        return Err(Error::Shape("reverse_step dimension mismatch".into()));
    }
    let (c0, c1, sigma) = sched.reverse_coefficients(t);
    Ok((0..x_t.len())
        .map(|i| c0 * x_hat0[i] + c1 * x_t[i] + sigma * z[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.tilde_beta(1), 0.0);
    }

    #[test]
    fn two_step_hand_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        assert!((s.alpha_bar(2) - 0.9 * 0.7).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.63).abs() < 1e-12);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        for t_max in [1usize, 2, 10, 500] {
            let s = NoiseSchedule::linear(t_max, 1e-4, 0.02).unwrap();
            for t in 1..=t_max {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
            if t_max > 1 {
                assert!(s.alpha_bar(t_max) < s.alpha_bar(1));
            }
        }
    }

    #[test]
    fn invalid_beta_range_rejected() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn forward_t0_is_identity() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x = vec![0.3, -1.7, 2.5];
        let z = vec![1.0, 1.0, 1.0];
        assert_eq!(forward_diffuse(&x, 0, &z, &s).unwrap(), x);
    }

    #[test]
    fn forward_pure_noise_limit() {
        let s = NoiseSchedule::linear(2000, 1e-4, 0.02).unwrap();
        let x = vec![1.0, -1.0];
        let z = vec![0.5, 0.25];
        let xt = forward_diffuse(&x, 2000, &z, &s).unwrap();
        let bound = s.alpha_bar(2000).sqrt() * (2.0f64).sqrt() + 1e-9;
        let dist: f64 = xt
            .iter()
            .zip(&z)
            .map(|(a, b)| {
                // noise coefficient is < 1, so compare against scaled z
                let zb = s.one_minus_alpha_bar(2000).sqrt() * b;
                (a - zb) * (a - zb)
            })
            .sum::<f64>()
            .sqrt();
        assert!(dist <= bound, "dist {dist} bound {bound}");
    }

    #[test]
    fn forward_plug_in_arithmetic() {
        // T = 1 with beta = 0.36 puts abar_1 = 0.64.
        let s = NoiseSchedule::from_betas(1, vec![f64::NAN, 0.36]);
        let xt = forward_diffuse(&[1.0, 0.0], 1, &[0.0, 1.0], &s).unwrap();
        assert!((xt[0] - 0.8).abs() < 1e-12);
        assert!((xt[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn forward_dimension_mismatch_errors() {
        let s = NoiseSchedule::linear(5, 1e-4, 0.02).unwrap();
        assert!(forward_diffuse(&[1.0], 1, &[1.0, 2.0], &s).is_err());
    }

    #[test]
    fn reverse_t1_returns_xhat0_exactly() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let xhat = vec![0.123456789, -9.87, 0.0];
        let xt = vec![5.0, 5.0, 5.0];
        let z = vec![0.0; 3];
        let out = reverse_step(&xhat, &xt, 1, &z, &s).unwrap();
        assert_eq!(out, xhat, "t=1 with z=0 must be the identity on xhat0");
    }

    #[test]
    fn reverse_t0_is_contract_violation() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(reverse_step(&[1.0], &[1.0], 0, &[0.0], &s).is_err());
    }

    #[test]
    fn reverse_coefficient_sum_matches_direct_evaluation() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        for t in 1..=10 {
            let (c0, c1, _) = s.reverse_coefficients(t);
            let direct = (s.alpha_bar(t - 1).sqrt() * s.beta(t)
                + s.alpha(t).sqrt() * s.one_minus_alpha_bar(t - 1))
                / s.one_minus_alpha_bar(t);
            assert!((c0 + c1 - direct).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn reverse_is_linear_in_shared_vector() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let v = vec![0.4, -1.2];
        for t in 1..=10 {
            let (c0, c1, _) = s.reverse_coefficients(t);
            let out = reverse_step(&v, &v, t, &[0.0, 0.0], &s).unwrap();
            for i in 0..2 {
                assert!((out[i] - (c0 + c1) * v[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_final_step_is_identity() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let (c0, c1, sigma) = s.strided_coefficients(37, 0);
        assert_eq!((c0, c1, sigma), (1.0, 0.0, 0.0));
    }

    #[test]
    fn strided_adjacent_matches_native() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        for t in 2..=50 {
            let (a0, a1, asig) = s.strided_coefficients(t, t - 1);
            let (b0, b1, bsig) = s.reverse_coefficients(t);
            assert!((a0 - b0).abs() < 1e-12, "t={t}");
            assert!((a1 - b1).abs() < 1e-12, "t={t}");
            assert!((asig - bsig).abs() < 1e-12, "t={t}");
        }
    }

    proptest! {
        #[test]
        fn recurrence_matches_product(t_max in 1usize..200, b0 in 1e-5f64..0.01, spread in 0.0f64..0.1) {
            let s = NoiseSchedule::linear(t_max, b0, b0 + spread).unwrap();
            let mut prod = 1.0f64;
            for t in 1..=t_max {
                prod *= s.alpha(t);
                prop_assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() <= 1e-12);
                prop_assert!((s.alpha_bar(t) - prod).abs() <= 1e-12);
            }
        }

        #[test]
        fn forward_is_exact_affine_combination(
            t in 0usize..=64,
            x in proptest::collection::vec(-3.0f64..3.0, 4),
            z in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let s = NoiseSchedule::linear(64, 1e-4, 0.02).unwrap();
            let out = forward_diffuse(&x, t, &z, &s).unwrap();
            let a = s.alpha_bar(t).sqrt();
            let b = s.one_minus_alpha_bar(t).sqrt();
            for i in 0..4 {
                // identical expression, identical rounding: exact equality
                prop_assert_eq!(out[i], a * x[i] + b * z[i]);
            }
        }
    }
}
