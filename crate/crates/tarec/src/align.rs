//! Stage two: preference-pair fine-tuning of the denoiser.
//!
//! Each pair noises the positive and negative item with the SAME `(t, z)`
//! draw and scores the bracket of reconstruction-error differences against a
//! frozen reference copy of the pretrained denoiser. The alignment strength
//! `lambda(t, d) = lambda_base * ((1 - t/T) + (1 - d))` shrinks for
//! high-noise timesteps and for preference pairs whose embeddings are hard to
//! tell apart. The encoder and item embeddings stay frozen throughout.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{DatasetSplit, ItemCorpus, SequenceExample};
use crate::error::{Error, Result};
use crate::eval;
use crate::nets::{Denoiser, DenoiserParams, DenoiserRt, EncoderRt, GuidanceEncoderParams};
use crate::optim::{Adam, AdamHyper};
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::seeding::{component_rng, normal_vec};
use crate::tape::{cosine_value, log_sigmoid, Tape, Tensor};

/// Negative-item selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeStrategy {
    /// uniform over the other targets in the batch
    RandomBatch,
    /// proportional to corpus popularity counts
    Popularity,
    /// highest cosine similarity to the positive among 100 uniform candidates
    HardCosine,
}

impl NegativeStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random_batch" => Ok(NegativeStrategy::RandomBatch),
            "popularity" => Ok(NegativeStrategy::Popularity),
            "hard_cosine" => Ok(NegativeStrategy::HardCosine),
            other => Err(Error::Config(format!(
                "unknown negative strategy `{other}` (random_batch | popularity | hard_cosine)"
            ))),
        }
    }
}

/// A preference pair; `d` is the cosine similarity of the two items' current
/// embeddings, computed at construction from the live table.
#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub positive: u32,
    pub negative: u32,
    pub d: f64,
}

impl PreferencePair {
    pub fn new(positive: u32, negative: u32, embeddings: &Tensor) -> Result<Self> {
        if positive == negative {
            return Err(Error::Contract(
                "preference pair needs distinct positive and negative items".into(),
            ));
        }
        let d = cosine_value(
            embeddings.row(positive as usize),
            embeddings.row(negative as usize),
        );
        Ok(PreferencePair {
            positive,
            negative,
            d,
        })
    }
}

/// Samples a negative item for `example`, excluding its history window and
/// its own target. When the exclusions exhaust the candidate pool the sampler
/// falls back to the full corpus minus the target.
pub fn sample_negative(
    example: &SequenceExample,
    batch_targets: &[u32],
    corpus: &ItemCorpus,
    embeddings: &Tensor,
    strategy: NegativeStrategy,
    rng: &mut impl Rng,
) -> Result<u32> {
    let pad = corpus.pad_index();
    let mut excluded: HashSet<u32> = example
        .history
        .iter()
        .copied()
        .filter(|&h| h != pad)
        .collect();
    excluded.insert(example.target);
    let v = corpus.vocab_size() as u32;

    let picked = match strategy {
        NegativeStrategy::RandomBatch => {
            let mut candidates: Vec<u32> = batch_targets
                .iter()
                .copied()
                .filter(|c| !excluded.contains(c))
                .collect();
            candidates.sort_unstable();
            candidates.dedup();
            if candidates.is_empty() {
                None
            } else {
                Some(candidates[rng.random_range(0..candidates.len())])
            }
        }
        NegativeStrategy::Popularity => {
            let pop = corpus.popularity();
            let mut cum = Vec::with_capacity(pop.len());
            let mut total = 0u64;
            for (i, &c) in pop.iter().enumerate() {
                if !excluded.contains(&(i as u32)) {
                    total += c;
                }
                cum.push(total);
            }
            if total == 0 {
                None
            } else {
                let draw = rng.random_range(0..total);
                Some(cum.partition_point(|&c| c <= draw) as u32)
            }
        }
        NegativeStrategy::HardCosine => {
            let pool: Vec<u32> = (0..v).filter(|c| !excluded.contains(c)).collect();
            if pool.is_empty() {
                None
            } else {
                let n = pool.len().min(100);
                // partial Fisher-Yates: first n entries become the sample
                let mut pool = pool;
                for i in 0..n {
                    let j = rng.random_range(i..pool.len());
                    pool.swap(i, j);
                }
                let pos_emb = embeddings.row(example.target as usize);
                let mut best: Option<(u32, f64)> = None;
                for &c in pool[..n].iter() {
                    let sim = cosine_value(pos_emb, embeddings.row(c as usize));
                    let better = match best {
                        None => true,
                        Some((bi, bs)) => sim > bs || (sim == bs && c < bi),
                    };
                    if better {
                        best = Some((c, sim));
                    }
                }
                best.map(|(i, _)| i)
            }
        }
    };

    match picked {
        Some(neg) => Ok(neg),
        None => {
            // fallback: uniform over the corpus minus the target alone
            let candidates: Vec<u32> = (0..v).filter(|&c| c != example.target).collect();
            if candidates.is_empty() {
                return Err(Error::Contract(
                    "no negative candidates: corpus holds only the target item".into(),
                ));
            }
            Ok(candidates[rng.random_range(0..candidates.len())])
        }
    }
}

/// Adaptive alignment strength `lambda_base * ((1 - t/T) + (1 - d))`.
pub fn adaptive_lambda(t: usize, d: f64, t_max: usize, lambda_base: f64) -> f64 {
    debug_assert!((1..=t_max).contains(&t));
    debug_assert!((-1.0..=1.0).contains(&d));
    lambda_base * ((1.0 - t as f64 / t_max as f64) + (1.0 - d))
}

/// Per-pair preference loss from the four reconstruction errors:
/// `-log sigmoid(-lambda * ((e_theta_pos - e_ref_pos) - (e_theta_neg - e_ref_neg)))`.
pub fn pair_loss(
    lambda: f64,
    theta_pos_err: f64,
    ref_pos_err: f64,
    theta_neg_err: f64,
    ref_neg_err: f64,
) -> f64 {
    let bracket = (theta_pos_err - ref_pos_err) - (theta_neg_err - ref_neg_err);
    -log_sigmoid(-lambda * bracket)
}

/// One drawn fine-tuning pair: clean embeddings, shared guidance and draws.
#[derive(Debug, Clone)]
pub struct PairDraw {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    pub g: Vec<f64>,
    /// cosine similarity of the pair's embeddings
    pub d: f64,
    pub t: usize,
    pub z: Vec<f64>,
}

fn batch_loss(
    pairs: &[PairDraw],
    theta: &mut dyn Denoiser,
    reference: &mut dyn Denoiser,
    sched: &NoiseSchedule,
    lambda_of: impl Fn(&PairDraw) -> f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    let mut sum = 0.0;
    for p in pairs {
        let x_t_pos = forward_diffuse(&p.pos, p.t, &p.z, sched)?;
        let x_t_neg = forward_diffuse(&p.neg, p.t, &p.z, sched)?;
        let e = |f: &mut dyn Denoiser, x_t: &[f64], x: &[f64]| -> Result<f64> {
            let out = f.denoise(x_t, &p.g, p.t)?;
            Ok(out.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum())
        };
        let tp = e(theta, &x_t_pos, &p.pos)?;
        let rp = e(reference, &x_t_pos, &p.pos)?;
        let tn = e(theta, &x_t_neg, &p.neg)?;
        let rn = e(reference, &x_t_neg, &p.neg)?;
        let loss = pair_loss(lambda_of(p), tp, rp, tn, rn);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite pair loss at t={} (pair errors {tp}, {rp}, {tn}, {rn})",
                p.t
            )));
        }
        sum += loss;
    }
    Ok(sum * (1.0 / pairs.len() as f64))
}

/// Adaptive-strength alignment loss; `lambda` varies per pair with `(t, d)`.
pub fn loss_apa(
    pairs: &[PairDraw],
    theta: &mut dyn Denoiser,
    reference: &mut dyn Denoiser,
    sched: &NoiseSchedule,
    lambda_base: f64,
) -> Result<f64> {
    batch_loss(pairs, theta, reference, sched, |p| {
        adaptive_lambda(p.t, p.d, sched.t_max(), lambda_base)
    })
}

/// Fixed-strength variant (the baseline the adaptive coefficient is measured
/// against, and the gradient-monotonicity probe's loss form).
pub fn loss_diffusion_dpo(
    pairs: &[PairDraw],
    theta: &mut dyn Denoiser,
    reference: &mut dyn Denoiser,
    sched: &NoiseSchedule,
    lambda_beta: f64,
) -> Result<f64> {
    batch_loss(pairs, theta, reference, sched, |_| lambda_beta)
}

/// A pair prepared for the tape: noisy inputs and reference errors are
/// constants (embeddings, encoder, and the reference model are all frozen);
/// only the trainable denoiser runs on the tape.
#[derive(Debug, Clone)]
pub struct StagedPair {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    pub g: Vec<f64>,
    pub t: usize,
    pub z: Vec<f64>,
    pub lambda: f64,
}

/// Builds the mean pair loss on the tape for a batch of prepared pairs.
pub fn stage_pair_losses(
    tape: &mut Tape,
    den_nodes: &crate::nets::DenoiserNodes,
    reference: &mut dyn Denoiser,
    sched: &NoiseSchedule,
    pairs: &[StagedPair],
) -> Result<crate::tape::NodeId> {
    if pairs.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for p in pairs {
        let x_t_pos = forward_diffuse(&p.pos, p.t, &p.z, sched)?;
        let x_t_neg = forward_diffuse(&p.neg, p.t, &p.z, sched)?;
        let mut ref_err = |x_t: &[f64], x: &[f64]| -> Result<f64> {
            let out = reference.denoise(x_t, &p.g, p.t)?;
            Ok(out.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum())
        };
        let rp = ref_err(&x_t_pos, &p.pos)?;
        let rn = ref_err(&x_t_neg, &p.neg)?;
        let g_node = tape.leaf_row(p.g.clone());
        let theta_err = |tape: &mut Tape, x_t: &[f64], x: &[f64]| -> Result<crate::tape::NodeId> {
            let xt_node = tape.leaf_row(x_t.to_vec());
            let f = den_nodes.denoise(tape, xt_node, g_node, p.t)?;
            let x_node = tape.leaf_row(x.to_vec());
            let diff = tape.sub(f, x_node);
            Ok(tape.norm_sq(diff))
        };
        let tp = theta_err(tape, &x_t_pos, &p.pos)?;
        let tn = theta_err(tape, &x_t_neg, &p.neg)?;
        let rp_node = tape.leaf(Tensor::scalar(rp));
        let rn_node = tape.leaf(Tensor::scalar(rn));
        let bp = tape.sub(tp, rp_node);
        let bn = tape.sub(tn, rn_node);
        let bracket = tape.sub(bp, bn);
        let inner = tape.scale(bracket, -p.lambda);
        let ls = tape.log_sigmoid(inner);
        let term = tape.scale(ls, -1.0);
        let v = tape.scalar_value(term);
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite pair loss at t={} (reference errors {rp}, {rn})",
                p.t
            )));
        }
        terms.push(term);
    }
    Ok(tape.mean_scalars(&terms))
}

#[derive(Debug, Clone)]
pub struct FinetuneOptions {
    pub lambda_base: f64,
    pub strategy: NegativeStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// when set, train with this fixed strength instead of the adaptive one
    pub fixed_lambda: Option<f64>,
    pub patience: usize,
    pub valid_k: usize,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions {
            lambda_base: 0.5,
            strategy: NegativeStrategy::RandomBatch,
            epochs: 20,
            batch_size: 128,
            learning_rate: 1e-4,
            seed: 0,
            fixed_lambda: None,
            patience: 20,
            valid_k: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneEpochLog {
    pub epoch: usize,
    pub loss_apa: f64,
    pub mean_lambda_beta: f64,
    pub valid_hr: f64,
    pub valid_ndcg: f64,
    pub wall_seconds: f64,
}

pub struct FinetuneOutput {
    pub denoiser: DenoiserParams,
    pub log: Vec<FinetuneEpochLog>,
}

/// Fine-tunes a copy of the pretrained denoiser against its frozen self.
/// Guidance vectors are precomputed once — the encoder is frozen, so they
/// cannot drift.
pub fn run_finetuning(
    split: &DatasetSplit,
    corpus: &ItemCorpus,
    encoder: &GuidanceEncoderParams,
    pretrained: &DenoiserParams,
    sched: &NoiseSchedule,
    opts: &FinetuneOptions,
) -> Result<FinetuneOutput> {
    if split.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let dims = pretrained.dims;
    let mut theta = pretrained.clone();
    let reference = pretrained.clone();
    let mut ref_rt = DenoiserRt::new(&reference);

    let mut enc_rt = EncoderRt::new(encoder);
    let guidance: Vec<Vec<f64>> = split
        .train
        .iter()
        .map(|e| enc_rt.encode(&e.history))
        .collect::<Result<_>>()?;

    let lens: Vec<usize> = theta.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(AdamHyper::with_lr(opts.learning_rate), &lens);

    let mut shuffle_rng = component_rng(opts.seed, "finetune-shuffle");
    let mut noise_rng = component_rng(opts.seed, "finetune-noise");
    let mut neg_rng = component_rng(opts.seed, "finetune-negatives");

    let mut best = theta.clone();
    let mut best_hr = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut log = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    for epoch in 0..opts.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut lambda_sum, mut n_batches, mut n_pairs) = (0.0, 0.0, 0usize, 0usize);
        for (batch_idx, chunk) in order.chunks(opts.batch_size).enumerate() {
            let batch_targets: Vec<u32> = chunk.iter().map(|&i| split.train[i].target).collect();
            let mut staged = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let e = &split.train[i];
                let neg = sample_negative(
                    e,
                    &batch_targets,
                    corpus,
                    encoder.item_embeddings(),
                    opts.strategy,
                    &mut neg_rng,
                )?;
                let pair = PreferencePair::new(e.target, neg, encoder.item_embeddings())?;
                let t = noise_rng.random_range(1..=sched.t_max());
                let z = normal_vec(&mut noise_rng, dims.d);
                let lambda = match opts.fixed_lambda {
                    Some(l) => l,
                    None => adaptive_lambda(t, pair.d, sched.t_max(), opts.lambda_base),
                };
                lambda_sum += lambda;
                n_pairs += 1;
                staged.push(StagedPair {
                    pos: encoder.embedding(pair.positive).to_vec(),
                    neg: encoder.embedding(pair.negative).to_vec(),
                    g: guidance[i].clone(),
                    t,
                    z,
                    lambda,
                });
            }

            let mut tape = Tape::new();
            let den_nodes = theta.stage(&mut tape);
            let loss = stage_pair_losses(&mut tape, &den_nodes, &mut ref_rt, sched, &staged)?;
            let lv = tape.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    msg: format!("loss_apa = {lv}"),
                });
            }
            loss_sum += lv;
            n_batches += 1;
            let grads = tape.backward(loss).map_err(|e| Error::Diverged {
                epoch,
                batch: batch_idx,
                msg: e.to_string(),
            })?;
            let grad_tensors: Vec<Tensor> = den_nodes
                .ids()
                .iter()
                .map(|&id| grads.get(id, tape.value(id)))
                .collect();
            let mut params: Vec<&mut Tensor> = theta.tensors_mut();
            adam.step(&mut params, &grad_tensors);
        }

        let (valid_hr, valid_ndcg) = validate(encoder, &theta, &split.valid, sched, opts, epoch)?;
        log.push(FinetuneEpochLog {
            epoch,
            loss_apa: loss_sum / n_batches as f64,
            mean_lambda_beta: lambda_sum / n_pairs as f64,
            valid_hr,
            valid_ndcg,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if valid_hr > best_hr {
            best_hr = valid_hr;
            best = theta.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= opts.patience {
            break;
        }
    }

    let denoiser = if log.is_empty() { theta } else { best };
    Ok(FinetuneOutput { denoiser, log })
}

fn validate(
    enc: &GuidanceEncoderParams,
    den: &DenoiserParams,
    valid: &[SequenceExample],
    sched: &NoiseSchedule,
    opts: &FinetuneOptions,
    epoch: usize,
) -> Result<(f64, f64)> {
    if valid.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut rng = component_rng(opts.seed.wrapping_add(epoch as u64), "finetune-valid");
    let mut rt = DenoiserRt::new(den);
    let result = eval::evaluate_topk(enc, &mut rt, valid, sched, 1, opts.valid_k, false, &mut rng)?;
    Ok((result.hr, result.ndcg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{FnDenoiser, ModelDims};
    use crate::seeding::component_rng;

    #[test]
    fn adaptive_lambda_examples() {
        assert_eq!(adaptive_lambda(1000, 1.0, 1000, 0.5), 0.0);
        assert!((adaptive_lambda(500, 0.0, 1000, 0.5) - 0.75).abs() < 1e-15);
        assert!((adaptive_lambda(1, -1.0, 1000, 0.5) - 1.4995).abs() < 1e-12);
    }

    #[test]
    fn adaptive_lambda_bounds_and_monotonicity() {
        let t_max = 200;
        let base = 0.5;
        let cap = base * (3.0 - 1.0 / t_max as f64);
        let mut prev_in_t: Option<f64> = None;
        for t in 1..=t_max {
            let v = adaptive_lambda(t, -1.0, t_max, base);
            assert!(v >= 0.0 && v <= cap + 1e-15);
            if let Some(p) = prev_in_t {
                assert!(v <= p, "non-increasing in t");
            }
            prev_in_t = Some(v);
        }
        let mut prev_in_d: Option<f64> = None;
        for k in 0..=20 {
            let d = -1.0 + k as f64 * 0.1;
            let v = adaptive_lambda(10, d, t_max, base);
            if let Some(p) = prev_in_d {
                assert!(v <= p, "non-increasing in d");
            }
            prev_in_d = Some(v);
        }
    }

    #[test]
    fn pair_loss_hand_example() {
        // theta errors (0, 1), ref errors (1, 1): bracket = -1
        let loss = pair_loss(0.75, 0.0, 1.0, 1.0, 1.0);
        assert!((loss - 0.3868736) < 1e-5, "got {loss}");
        assert!((loss - (1.0f64 + (-0.75f64).exp()).ln()).abs() < 1e-12);
    }

    fn toy_pairs(n: usize, t: usize, seed: u64) -> Vec<PairDraw> {
        let mut rng = component_rng(seed, "pairs");
        (0..n)
            .map(|_| {
                let pos = normal_vec(&mut rng, 4);
                let neg = normal_vec(&mut rng, 4);
                let d = cosine_value(&pos, &neg);
                PairDraw {
                    pos,
                    neg,
                    g: normal_vec(&mut rng, 4),
                    d,
                    t,
                    z: normal_vec(&mut rng, 4),
                }
            })
            .collect()
    }

    fn real_denoiser(seed: u64) -> DenoiserParams {
        let dims = ModelDims {
            v: 6,
            d: 4,
            l: 3,
            n_layers: 1,
            n_heads: 2,
            h_ff: 8,
            den_layers: 2,
            den_hidden: 8,
            d_t: 4,
            time_base: 10_000.0,
        };
        DenoiserParams::init(dims, &mut component_rng(seed, "init")).unwrap()
    }

    #[test]
    fn identical_models_give_ln2_for_any_data() {
        let sched = NoiseSchedule::linear(16, 1e-4, 0.02).unwrap();
        let den = real_denoiser(1);
        for t in [1usize, 5, 16] {
            let pairs = toy_pairs(3, t, t as u64);
            let mut a = DenoiserRt::new(&den);
            let mut b = DenoiserRt::new(&den);
            let loss = loss_apa(&pairs, &mut a, &mut b, &sched, 0.5).unwrap();
            assert!(
                (loss - std::f64::consts::LN_2).abs() < 1e-15,
                "sigma(0) = 1/2 must give ln 2, got {loss}"
            );
        }
    }

    #[test]
    fn zero_lambda_gives_ln2_regardless_of_models() {
        let sched = NoiseSchedule::linear(16, 1e-4, 0.02).unwrap();
        let pairs = toy_pairs(4, 8, 3);
        let mut theta = FnDenoiser {
            dim: 4,
            f: |x: &[f64], _: &[f64], _: usize| x.iter().map(|v| v * 2.0).collect(),
        };
        let mut reference = FnDenoiser {
            dim: 4,
            f: |_: &[f64], g: &[f64], _: usize| g.to_vec(),
        };
        let loss = loss_diffusion_dpo(&pairs, &mut theta, &mut reference, &sched, 0.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn fixed_lambda_equals_adaptive_at_matching_value() {
        let sched = NoiseSchedule::linear(16, 1e-4, 0.02).unwrap();
        let pairs = toy_pairs(1, 7, 4);
        let lambda = adaptive_lambda(pairs[0].t, pairs[0].d, sched.t_max(), 0.5);
        let den_t = real_denoiser(5);
        let den_r = real_denoiser(6);
        let a = loss_apa(
            &pairs,
            &mut DenoiserRt::new(&den_t),
            &mut DenoiserRt::new(&den_r),
            &sched,
            0.5,
        )
        .unwrap();
        let b = loss_diffusion_dpo(
            &pairs,
            &mut DenoiserRt::new(&den_t),
            &mut DenoiserRt::new(&den_r),
            &sched,
            lambda,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_monotone_in_lambda_for_negative_bracket() {
        // a pair where theta already prefers the positive: bracket < 0, so
        // larger strength means lower loss
        let tp = 0.2;
        let rp = 1.0;
        let tn = 1.5;
        let rn = 1.0;
        let l1 = pair_loss(0.1, tp, rp, tn, rn);
        let l2 = pair_loss(0.5, tp, rp, tn, rn);
        let l3 = pair_loss(1.0, tp, rp, tn, rn);
        assert!(l1 > l2 && l2 > l3);
    }

    fn toy_corpus(v: usize) -> (ItemCorpus, Tensor) {
        let raw: Vec<crate::corpus::Interaction> = (0..v)
            .flat_map(|i| {
                (0..5).map(move |k| crate::corpus::Interaction {
                    user: format!("u{k}"),
                    item: format!("i{i}"),
                    timestamp: (i * 10 + k) as i64,
                })
            })
            .collect();
        let (corpus, _) = crate::corpus::filter_and_build(&raw, 1, 1, 4).unwrap();
        let mut rng = component_rng(7, "emb");
        let data = normal_vec(&mut rng, (v + 1) * 4);
        (corpus, Tensor::from_vec(v + 1, 4, data))
    }

    fn example(history: Vec<u32>, target: u32) -> SequenceExample {
        SequenceExample {
            history,
            target,
            timestamp: 0,
            user_ord: 0,
        }
    }

    #[test]
    fn random_batch_forced_choice() {
        let (corpus, emb) = toy_corpus(6);
        let e = example(vec![6, 6, 0], 1);
        let mut rng = component_rng(1, "neg");
        for _ in 0..20 {
            let n = sample_negative(
                &e,
                &[1, 2],
                &corpus,
                &emb,
                NegativeStrategy::RandomBatch,
                &mut rng,
            )
            .unwrap();
            assert_eq!(n, 2, "the only other batch target");
        }
    }

    #[test]
    fn popularity_sampling_matches_exact_ratio() {
        // counts {a: 3, b: 1}, target c -> P(a) = 0.75, P(b) = 0.25
        let mut raw = Vec::new();
        for k in 0..3 {
            raw.push(crate::corpus::Interaction {
                user: "u".into(),
                item: "a".into(),
                timestamp: k,
            });
        }
        raw.push(crate::corpus::Interaction {
            user: "u".into(),
            item: "b".into(),
            timestamp: 3,
        });
        raw.push(crate::corpus::Interaction {
            user: "u".into(),
            item: "c".into(),
            timestamp: 4,
        });
        let (corpus, _) = crate::corpus::filter_and_build(&raw, 1, 1, 4).unwrap();
        let emb = Tensor::zeros(4, 4);
        let target = corpus.index("c").unwrap();
        let a = corpus.index("a").unwrap();
        let b = corpus.index("b").unwrap();
        let e = example(vec![3, 3, 3], target);
        let mut rng = component_rng(2, "neg");
        let n = 100_000;
        let mut count_a = 0usize;
        for _ in 0..n {
            let s = sample_negative(&e, &[], &corpus, &emb, NegativeStrategy::Popularity, &mut rng)
                .unwrap();
            if s == a {
                count_a += 1;
            } else {
                assert_eq!(s, b);
            }
        }
        let p_a = count_a as f64 / n as f64;
        assert!((p_a - 0.75).abs() < 0.01, "P(a) = {p_a}");
    }

    #[test]
    fn hard_cosine_picks_aligned_candidate() {
        let (corpus, mut emb) = toy_corpus(6);
        // make item 3's embedding exactly the target direction of item 0
        let target_dir: Vec<f64> = emb.row(0).to_vec();
        for (i, v) in target_dir.iter().enumerate() {
            *emb.at_mut(3, i) = v * 2.0;
        }
        let e = example(vec![6, 6, 1], 0);
        let mut rng = component_rng(3, "neg");
        let n = sample_negative(&e, &[], &corpus, &emb, NegativeStrategy::HardCosine, &mut rng)
            .unwrap();
        assert_eq!(n, 3);
    }

    #[test]
    fn exhausted_exclusions_fall_back_then_error() {
        // V = 2: history covers item 1, target is 0 -> batch empty -> fall
        // back to corpus minus target = {1}
        let (corpus, emb) = {
            let raw: Vec<crate::corpus::Interaction> = (0..2)
                .map(|i| crate::corpus::Interaction {
                    user: "u".into(),
                    item: format!("i{i}"),
                    timestamp: i as i64,
                })
                .collect();
            let (c, _) = crate::corpus::filter_and_build(&raw, 1, 1, 4).unwrap();
            (c, Tensor::zeros(3, 4))
        };
        let e = example(vec![2, 1, 1], 0);
        let mut rng = component_rng(4, "neg");
        let n = sample_negative(&e, &[], &corpus, &emb, NegativeStrategy::RandomBatch, &mut rng)
            .unwrap();
        assert_eq!(n, 1);

        // V = 1: nothing but the target exists -> error
        let raw = vec![crate::corpus::Interaction {
            user: "u".into(),
            item: "only".into(),
            timestamp: 0,
        }];
        let (c1, _) = crate::corpus::filter_and_build(&raw, 1, 1, 4).unwrap();
        let e = example(vec![1, 1, 1], 0);
        let r = sample_negative(
            &e,
            &[],
            &c1,
            &Tensor::zeros(2, 4),
            NegativeStrategy::RandomBatch,
            &mut rng,
        );
        assert!(r.is_err());
    }

    #[test]
    fn preference_pair_rejects_equal_items() {
        let emb = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(PreferencePair::new(1, 1, &emb).is_err());
        let p = PreferencePair::new(0, 1, &emb).unwrap();
        assert!((p.d - 0.0).abs() < 1e-15);
    }
}
