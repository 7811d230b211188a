//! Inference: one-step and multi-step generation of the oracle item
//! embedding, followed by exact dot-product ranking over the corpus.
//!
//! Multi-step generation walks an evenly strided sub-schedule that always
//! includes `T` and `1`; each stride reuses the reverse update with effective
//! coefficients built from the `abar` ratio across the stride. The final
//! stride targets step 0 where the update degenerates to the identity on the
//! denoised estimate, so `steps = 1` reduces to a single denoiser call.

use std::collections::HashSet;
use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nets::Denoiser;
use crate::schedule::NoiseSchedule;
use crate::seeding::normal_vec;
use crate::tape::Tensor;

/// Noise handling along the reverse trajectory. `Deterministic` zeroes every
/// injected `z` so unit tests can trace the exact update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Stochastic,
    Deterministic,
}

/// Generated embedding, its ranked top-K, and generation-only wall time.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub generated: Vec<f64>,
    pub top_k: Vec<(u32, f64)>,
    pub elapsed: f64,
}

/// Evenly strided timesteps over `[1..=t_max]`, ascending, always containing
/// `1` and `t_max`; `steps = 1` yields `[t_max]`.
pub fn strided_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1 && steps <= t_max, "need 1 <= steps <= T");
    if steps == 1 {
        return vec![t_max];
    }
    let q = (t_max - 1) as f64 / (steps - 1) as f64;
    let out: Vec<usize> = (0..steps)
        .map(|s| 1 + (s as f64 * q).round() as usize)
        .collect();
    debug_assert!(out.windows(2).all(|w| w[0] < w[1]), "stride must ascend");
    debug_assert_eq!(*out.first().unwrap(), 1);
    debug_assert_eq!(*out.last().unwrap(), t_max);
    out
}

/// Single denoiser call at `t = T` on seeded Gaussian noise.
pub fn generate_one_step(
    g: &[f64],
    den: &mut dyn Denoiser,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let x_t = normal_vec(rng, den.dim());
    den.denoise(&x_t, g, sched.t_max())
}

/// Multi-step reverse trajectory from explicit starting noise, returning the
/// endpoint and the denoiser outputs observed along the way (used by the
/// trajectory-chaining probes).
pub fn generate_multi_step_traced(
    g: &[f64],
    den: &mut dyn Denoiser,
    sched: &NoiseSchedule,
    steps: usize,
    x_start: Vec<f64>,
    mode: NoiseMode,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if steps < 1 || steps > sched.t_max() {
        return Err(Error::Contract(format!(
            "steps must lie in 1..=T, got {steps} for T={}",
            sched.t_max()
        )));
    }
    let taus = strided_timesteps(sched.t_max(), steps);
    let d = den.dim();
    let mut x = x_start;
    let mut outputs = Vec::with_capacity(steps);
    for s in (0..steps).rev() {
        let t_hi = taus[s];
        let t_lo = if s == 0 { 0 } else { taus[s - 1] };
        let x_hat0 = den.denoise(&x, g, t_hi)?;
        outputs.push(x_hat0.clone());
        let (c0, c1, sigma) = sched.strided_coefficients(t_hi, t_lo);
        // z = 0 on the final stride; elsewhere only in stochastic mode
        let z = if s == 0 || mode == NoiseMode::Deterministic {
            vec![0.0; d]
        } else {
            normal_vec(rng, d)
        };
        let mut next = vec![0.0; d];
        for i in 0..d {
            next[i] = c0 * x_hat0[i] + c1 * x[i] + sigma * z[i];
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "reverse trajectory diverged at t={t_hi}"
            )));
        }
        x = next;
    }
    Ok((x, outputs))
}

/// Iterated reverse generation with `steps <= T` denoiser calls, starting
/// from seeded Gaussian noise.
pub fn generate_multi_step(
    g: &[f64],
    den: &mut dyn Denoiser,
    sched: &NoiseSchedule,
    steps: usize,
    mode: NoiseMode,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let x_start = normal_vec(rng, den.dim());
    let (x0, _) = generate_multi_step_traced(g, den, sched, steps, x_start, mode, rng)?;
    Ok(x0)
}

/// Ranks corpus items by dot product with the generated embedding. The pad
/// row is always excluded; ties break toward the lower item index.
pub fn rank(
    x0: &[f64],
    embeddings: &Tensor,
    v: usize,
    k: usize,
    exclude: Option<&HashSet<u32>>,
) -> Result<RankingResult> {
    let excluded = exclude.map(|s| s.len()).unwrap_or(0);
    if k + excluded > v {
        return Err(Error::Eval(format!(
            "cannot rank top-{k}: only {} candidates after exclusions",
            v.saturating_sub(excluded)
        )));
    }
    let mut scored: Vec<(u32, f64)> = (0..v as u32)
        .filter(|i| exclude.map_or(true, |s| !s.contains(i)))
        .map(|i| {
            let row = embeddings.row(i as usize);
            let score: f64 = row.iter().zip(x0).map(|(a, b)| a * b).sum();
            (i, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(RankingResult {
        generated: x0.to_vec(),
        top_k: scored,
        elapsed: 0.0,
    })
}

/// Generation followed by ranking; `elapsed` covers generation only.
#[allow(clippy::too_many_arguments)]
pub fn recommend(
    g: &[f64],
    den: &mut dyn Denoiser,
    sched: &NoiseSchedule,
    steps: usize,
    embeddings: &Tensor,
    v: usize,
    k: usize,
    exclude: Option<&HashSet<u32>>,
    rng: &mut impl Rng,
) -> Result<RankingResult> {
    let start = Instant::now();
    let x0 = if steps == 1 {
        generate_one_step(g, den, sched, rng)?
    } else {
        generate_multi_step(g, den, sched, steps, NoiseMode::Stochastic, rng)?
    };
    let elapsed = start.elapsed().as_secs_f64();
    let mut result = rank(&x0, embeddings, v, k, exclude)?;
    result.elapsed = elapsed;
    Ok(result)
}
