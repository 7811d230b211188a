//! Ranking metrics, the timing harness, and the theory probes: consistency
//! gap, one-step deviation with its trajectory-chained bound, the
//! discretization trend over step counts, and the preference-gradient
//! monotonicity table.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use crate::corpus::SequenceExample;
use crate::error::{Error, Result};
use crate::generate::{self, NoiseMode};
use crate::nets::{CountingDenoiser, Denoiser, DenoiserParams, DenoiserRt, EncoderRt, GuidanceEncoderParams};
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::seeding::normal_vec;
use crate::tape::sigmoid;

/// Aggregated evaluation output; `probe_stats` carries named probe values
/// such as the consistency gap or one-step deviation.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub k: usize,
    pub n_users: usize,
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub coverage_at_k: f64,
    pub timings: Vec<(String, f64)>,
    pub probe_stats: Vec<(String, f64)>,
}

/// Hit ratio and NDCG for a single ranked list against one relevant target.
/// `hr` is 0/1; `ndcg = 1/log2(rank + 1)` at the 1-based hit rank.
pub fn hr_ndcg_at_k(ranked: &[u32], target: u32, k: usize) -> Result<(f64, f64)> {
    if ranked.len() < k {
        return Err(Error::Contract(format!(
            "ranked list has {} entries, need at least k={k}",
            ranked.len()
        )));
    }
    let mut seen = HashSet::with_capacity(ranked.len());
    for &r in ranked {
        if !seen.insert(r) {
            return Err(Error::Contract(format!("duplicate entry {r} in ranked list")));
        }
    }
    match ranked[..k].iter().position(|&r| r == target) {
        Some(pos) => {
            let rank = (pos + 1) as f64;
            Ok((1.0, 1.0 / (rank + 1.0).log2()))
        }
        None => Ok((0.0, 0.0)),
    }
}

/// Fraction of the catalog covered by the union of per-user top-k lists.
pub fn coverage_at_k(lists: &[Vec<u32>], v: usize) -> f64 {
    let k = lists.first().map(|l| l.len()).unwrap_or(0);
    debug_assert!(lists.iter().all(|l| l.len() == k));
    let union: HashSet<u32> = lists.iter().flatten().copied().collect();
    union.len() as f64 / v as f64
}

/// Per-example evaluation record for the inference CSV.
#[derive(Debug, Clone)]
pub struct PerUserRow {
    pub user_ord: u32,
    pub top_k: Vec<(u32, f64)>,
    pub gen_seconds: f64,
    pub steps: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone)]
pub struct TopKEvaluation {
    pub hr: f64,
    pub ndcg: f64,
    pub coverage: f64,
    pub rows: Vec<PerUserRow>,
}

/// Ranks every example's generated embedding over the full corpus and
/// averages HR/NDCG; coverage is taken over the emitted top-k lists.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_topk(
    enc: &GuidanceEncoderParams,
    den: &mut dyn Denoiser,
    examples: &[SequenceExample],
    sched: &NoiseSchedule,
    steps: usize,
    k: usize,
    exclude_history: bool,
    rng: &mut impl Rng,
) -> Result<TopKEvaluation> {
    if examples.is_empty() {
        return Err(Error::Eval("no examples to evaluate".into()));
    }
    let v = enc.dims.v;
    let pad = v as u32;
    let mut enc_rt = EncoderRt::new(enc);
    let mut rows = Vec::with_capacity(examples.len());
    let (mut hr_sum, mut ndcg_sum) = (0.0, 0.0);
    let mut lists = Vec::with_capacity(examples.len());
    for e in examples {
        let g = enc_rt.encode(&e.history)?;
        let exclude: Option<HashSet<u32>> = if exclude_history {
            Some(e.history.iter().copied().filter(|&h| h != pad).collect())
        } else {
            None
        };
        let r = generate::recommend(
            &g,
            den,
            sched,
            steps,
            enc.item_embeddings(),
            v,
            k,
            exclude.as_ref(),
            rng,
        )?;
        let ranked: Vec<u32> = r.top_k.iter().map(|&(i, _)| i).collect();
        let (hr, ndcg) = hr_ndcg_at_k(&ranked, e.target, k)?;
        hr_sum += hr;
        ndcg_sum += ndcg;
        lists.push(ranked);
        rows.push(PerUserRow {
            user_ord: e.user_ord,
            top_k: r.top_k,
            gen_seconds: r.elapsed,
            steps,
            hr,
            ndcg,
        });
    }
    let n = examples.len() as f64;
    Ok(TopKEvaluation {
        hr: hr_sum / n,
        ndcg: ndcg_sum / n,
        coverage: coverage_at_k(&lists, v),
        rows,
    })
}

/// Mean L2 distance between denoiser outputs at adjacent timesteps with
/// shared `(x, z)` draws — the quantity the consistency penalty minimizes.
pub fn consistency_gap(
    enc: &GuidanceEncoderParams,
    den: &mut dyn Denoiser,
    examples: &[SequenceExample],
    sched: &NoiseSchedule,
    n_probes: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    assert!(n_probes >= 1);
    if examples.is_empty() {
        return Err(Error::Eval("consistency gap needs examples".into()));
    }
    let mut enc_rt = EncoderRt::new(enc);
    let d = enc.dims.d;
    let mut total = 0.0;
    for _ in 0..n_probes {
        let e = &examples[rng.random_range(0..examples.len())];
        let g = enc_rt.encode(&e.history)?;
        let x = enc.embedding(e.target).to_vec();
        let t = rng.random_range(1..=sched.t_max());
        let z = normal_vec(rng, d);
        let x_t = forward_diffuse(&x, t, &z, sched)?;
        let x_tm1 = forward_diffuse(&x, t - 1, &z, sched)?;
        let f_t = den.denoise(&x_t, &g, t)?;
        let f_tm1 = den.denoise(&x_tm1, &g, t - 1)?;
        let gap: f64 = f_t
            .iter()
            .zip(&f_tm1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        total += gap;
    }
    Ok(total / n_probes as f64)
}

/// One probe sample: distance between the one-step output and the
/// deterministic multi-step endpoint, plus the telescoped bound summed along
/// the reference trajectory's denoiser outputs.
#[derive(Debug, Clone)]
pub struct DeviationSample {
    pub deviation: f64,
    pub chained_bound: f64,
}

/// One-step vs multi-step deviation over guidance samples; both paths start
/// from the same noise and the reference path injects no reverse noise.
pub fn one_step_deviation(
    den: &mut dyn Denoiser,
    guidance_samples: &[Vec<f64>],
    sched: &NoiseSchedule,
    steps_ref: usize,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<DeviationSample>)> {
    if guidance_samples.is_empty() {
        return Err(Error::Eval("deviation probe needs guidance samples".into()));
    }
    let d = den.dim();
    let mut samples = Vec::with_capacity(guidance_samples.len());
    let mut total = 0.0;
    for g in guidance_samples {
        let x_start = normal_vec(rng, d);
        let one = den.denoise(&x_start, g, sched.t_max())?;
        let (multi, outputs) = generate::generate_multi_step_traced(
            g,
            den,
            sched,
            steps_ref,
            x_start,
            NoiseMode::Deterministic,
            rng,
        )?;
        let deviation = l2(&one, &multi);
        let chained_bound: f64 = outputs.windows(2).map(|w| l2(&w[0], &w[1])).sum();
        total += deviation;
        samples.push(DeviationSample {
            deviation,
            chained_bound,
        });
    }
    Ok((total / guidance_samples.len() as f64, samples))
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// For each step count `T` in `t_set`, the mean endpoint distance between the
/// `T`-step deterministic trajectory and a reference trajectory at
/// `4 * max(t_set)` steps, all strided within one fine schedule and started
/// from the same noise. Output ascends in `T`.
pub fn discretization_trend(
    den: &mut dyn Denoiser,
    n_guidance: usize,
    guidance_dim: usize,
    t_set: &[usize],
    beta_start: f64,
    beta_end: f64,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, f64)>> {
    if t_set.is_empty() {
        return Err(Error::Probe("empty step-count set".into()));
    }
    let t_ref = 4 * t_set.iter().max().unwrap();
    let sched_ref = NoiseSchedule::linear(t_ref, beta_start, beta_end)?;
    let d = den.dim();
    let mut sorted: Vec<usize> = t_set.to_vec();
    sorted.sort_unstable();
    let mut sums = vec![0.0; sorted.len()];
    for _ in 0..n_guidance {
        let g = normal_vec(rng, guidance_dim);
        let x_start = normal_vec(rng, d);
        let (reference, _) = generate::generate_multi_step_traced(
            &g,
            den,
            &sched_ref,
            t_ref,
            x_start.clone(),
            NoiseMode::Deterministic,
            rng,
        )?;
        for (i, &steps) in sorted.iter().enumerate() {
            let (end, _) = generate::generate_multi_step_traced(
                &g,
                den,
                &sched_ref,
                steps,
                x_start.clone(),
                NoiseMode::Deterministic,
                rng,
            )?;
            sums[i] += l2(&end, &reference);
        }
    }
    Ok(sorted
        .into_iter()
        .zip(sums)
        .map(|(t, s)| (t, s / n_guidance as f64))
        .collect())
}

/// Spearman rank correlation (distinct values assumed).
pub fn spearman(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len();
    assert!(n >= 2);
    let rank = |vals: Vec<f64>| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let mut r = vec![0.0; n];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let rx = rank(pairs.iter().map(|p| p.0).collect());
    let ry = rank(pairs.iter().map(|p| p.1).collect());
    let mean = (n as f64 - 1.0) / 2.0;
    let (mut num, mut dx, mut dy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let a = rx[i] - mean;
        let b = ry[i] - mean;
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    num / (dx * dy).sqrt()
}

/// `h(lambda, delta_r) = lambda * sigmoid(-lambda * delta_r)` — the exact
/// magnitude of the pairwise preference loss gradient with respect to the
/// reward margin.
pub fn dpo_gradient_magnitude(lambda: f64, delta_r: f64) -> f64 {
    lambda * sigmoid(-lambda * delta_r)
}

#[derive(Debug, Clone)]
pub struct DpoProbeRow {
    pub delta_r: f64,
    pub lambda: f64,
    pub h: f64,
    pub in_hypothesis: bool,
}

#[derive(Debug, Clone)]
pub struct DpoProbeReport {
    pub rows: Vec<DpoProbeRow>,
    /// One verdict per `delta_r`: is `h` non-decreasing in `lambda` over the
    /// in-hypothesis region `lambda <= 1/delta_r`?
    pub verdicts: Vec<(f64, bool)>,
}

impl DpoProbeReport {
    pub fn all_non_decreasing(&self) -> bool {
        self.verdicts.iter().all(|&(_, ok)| ok)
    }
}

/// Tabulates `h` on a `(delta_r, lambda)` grid. Lambdas beyond `1/delta_r`
/// are permitted to decrease and only annotated as outside the hypothesis;
/// monotonicity verdicts cover the in-hypothesis region.
pub fn dpo_gradient_probe(
    delta_rs: &[f64],
    lambda_step: f64,
    lambda_max: f64,
    tol: f64,
) -> Result<DpoProbeReport> {
    if delta_rs.is_empty() || delta_rs.iter().any(|&d| d <= 0.0 || d > 1.0) {
        return Err(Error::Config(
            "delta_r grid must be non-empty within (0, 1]".into(),
        ));
    }
    if lambda_step <= 0.0 || lambda_max < lambda_step {
        return Err(Error::Config("lambda grid must satisfy 0 < step <= max".into()));
    }
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    for &dr in delta_rs {
        let boundary = 1.0 / dr;
        let mut prev_in: Option<f64> = None;
        let mut ok = true;
        let mut lambda = lambda_step;
        while lambda <= lambda_max + 1e-12 {
            let in_hyp = lambda <= boundary + 1e-12;
            let h = dpo_gradient_magnitude(lambda, dr);
            if in_hyp {
                if let Some(p) = prev_in {
                    if h < p - tol {
                        ok = false;
                    }
                }
                prev_in = Some(h);
            }
            rows.push(DpoProbeRow {
                delta_r: dr,
                lambda,
                h,
                in_hypothesis: in_hyp,
            });
            lambda += lambda_step;
        }
        verdicts.push((dr, ok));
    }
    Ok(DpoProbeReport { rows, verdicts })
}

#[derive(Debug, Clone)]
pub struct TimingRow {
    pub mode: String,
    pub steps: usize,
    pub median_seconds: f64,
    pub denoiser_calls: u64,
    pub single_sample: bool,
}

#[derive(Debug, Clone)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    /// multi-step wall clock over one-step wall clock
    pub speedup: f64,
    /// multi-step denoiser calls over one-step denoiser calls
    pub call_ratio: f64,
}

/// Median generation wall-clock for one-step vs `multi_steps`-step reverse
/// generation over the same users, after one excluded warm-up pass. Guidance
/// encoding happens outside the timed region; the harness itself runs
/// strictly single-threaded.
pub fn timing_harness(
    enc: &GuidanceEncoderParams,
    den: &DenoiserParams,
    examples: &[SequenceExample],
    sched: &NoiseSchedule,
    multi_steps: usize,
    repeats: usize,
    rng_seed: u64,
) -> Result<TimingReport> {
    if examples.is_empty() || repeats == 0 {
        return Err(Error::Eval("timing harness needs examples and repeats >= 1".into()));
    }
    let mut enc_rt = EncoderRt::new(enc);
    let guidance: Vec<Vec<f64>> = examples
        .iter()
        .map(|e| enc_rt.encode(&e.history))
        .collect::<Result<_>>()?;

    let run_mode = |steps: usize| -> Result<(f64, u64)> {
        let mut counting = CountingDenoiser::new(DenoiserRt::new(den));
        // warm-up pass, excluded from measurement
        let mut rng = crate::seeding::component_rng(rng_seed, "timing-warmup");
        for g in &guidance {
            gen_with(&mut counting, g, sched, steps, &mut rng)?;
        }
        counting.calls = 0;
        let mut times = Vec::with_capacity(repeats);
        for rep in 0..repeats {
            let mut rng =
                crate::seeding::component_rng(rng_seed.wrapping_add(rep as u64), "timing");
            let start = Instant::now();
            for g in &guidance {
                gen_with(&mut counting, g, sched, steps, &mut rng)?;
            }
            times.push(start.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        let median = times[times.len() / 2];
        let calls_per_pass = counting.calls / repeats as u64;
        Ok((median, calls_per_pass))
    };

    let (one_t, one_calls) = run_mode(1)?;
    let (multi_t, multi_calls) = run_mode(multi_steps)?;
    let single = repeats == 1;
    Ok(TimingReport {
        rows: vec![
            TimingRow {
                mode: "one_step".into(),
                steps: 1,
                median_seconds: one_t,
                denoiser_calls: one_calls,
                single_sample: single,
            },
            TimingRow {
                mode: "multi_step".into(),
                steps: multi_steps,
                median_seconds: multi_t,
                denoiser_calls: multi_calls,
                single_sample: single,
            },
        ],
        speedup: multi_t / one_t,
        call_ratio: multi_calls as f64 / one_calls as f64,
    })
}

fn gen_with(
    den: &mut dyn Denoiser,
    g: &[f64],
    sched: &NoiseSchedule,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if steps == 1 {
        generate::generate_one_step(g, den, sched, rng)
    } else {
        generate::generate_multi_step(g, den, sched, steps, NoiseMode::Stochastic, rng)
    }
}

/// CSV writer: `# `-prefixed provenance lines, a header row, then data rows.
/// UTF-8, comma-separated, LF line endings.
pub fn write_csv(path: &Path, provenance: &[String], header: &str, rows: &[String]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut buf = String::new();
    for p in provenance {
        buf.push_str("# ");
        buf.push_str(p);
        buf.push('\n');
    }
    buf.push_str(header);
    buf.push('\n');
    for r in rows {
        buf.push_str(r);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
