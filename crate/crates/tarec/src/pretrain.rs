//! Stage one: joint training of the guidance encoder, item embeddings, and
//! denoiser with a reconstruction loss plus temporal consistency
//! regularization.
//!
//! Per example one timestep `t` and one Gaussian `z` are drawn; the SAME `z`
//! noises the target to steps `t` and `t - 1` so the two denoiser calls see
//! adjacent points of one forward trajectory, and the same draws feed both
//! loss terms. Gradient flows through both branches of the consistency term
//! unless `stop_tcr_prev_branch` detaches the earlier one.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{DatasetSplit, ItemCorpus, SequenceExample};
use crate::error::{Error, Result};
use crate::eval;
use crate::nets::{
    Denoiser, DenoiserNodes, DenoiserParams, DenoiserRt, EncoderNodes, GuidanceEncoderParams,
    ModelDims,
};
use crate::optim::{Adam, AdamHyper};
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::seeding::{component_rng, normal_vec};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    /// consistency weight; 0 disables the regularizer
    pub lambda_c: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// guidance-dropout probability
    pub rho: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// ablation: detach the `t - 1` branch of the consistency term
    pub stop_tcr_prev_branch: bool,
    /// early-stopping patience in epochs, on validation HR@k
    pub patience: usize,
    pub valid_k: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            lambda_c: 0.5,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            rho: 0.1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            stop_tcr_prev_branch: false,
            patience: 20,
            valid_k: 20,
        }
    }
}

/// One per-epoch row of the training log.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_diff: f64,
    pub loss_tcr: f64,
    pub loss_pre: f64,
    pub valid_hr: f64,
    pub valid_ndcg: f64,
    pub wall_seconds: f64,
}

pub struct PretrainOutput {
    pub encoder: GuidanceEncoderParams,
    pub denoiser: DenoiserParams,
    pub log: Vec<EpochLog>,
}

// ---------------------------------------------------------------------------
// Loss values over explicit draws (evaluation path, generic in the denoiser).
// ---------------------------------------------------------------------------

/// One drawn batch element: clean target embedding `x`, guidance `g`, and the
/// shared `(t, z)` draw.
#[derive(Debug, Clone)]
pub struct LossItem {
    pub x: Vec<f64>,
    pub g: Vec<f64>,
    pub t: usize,
    pub z: Vec<f64>,
}

fn require_batch(items: &[LossItem]) -> Result<()> {
    if items.is_empty() {
        Err(Error::Contract("loss over an empty batch".into()))
    } else {
        Ok(())
    }
}

/// Mean squared reconstruction error `||f(x_t, g, t) - x||^2`.
pub fn loss_diff(items: &[LossItem], den: &mut dyn Denoiser, sched: &NoiseSchedule) -> Result<f64> {
    require_batch(items)?;
    let mut sum = 0.0;
    for it in items {
        let x_t = forward_diffuse(&it.x, it.t, &it.z, sched)?;
        let f = den.denoise(&x_t, &it.g, it.t)?;
        sum += sq_l2(&f, &it.x);
    }
    Ok(sum * (1.0 / items.len() as f64))
}

/// Mean squared gap between denoiser outputs at adjacent steps of the same
/// forward trajectory: `||f(x_t, g, t) - f(x_{t-1}, g, t-1)||^2`.
pub fn loss_tcr(items: &[LossItem], den: &mut dyn Denoiser, sched: &NoiseSchedule) -> Result<f64> {
    require_batch(items)?;
    let mut sum = 0.0;
    for it in items {
        let x_t = forward_diffuse(&it.x, it.t, &it.z, sched)?;
        let x_tm1 = forward_diffuse(&it.x, it.t - 1, &it.z, sched)?;
        let f_t = den.denoise(&x_t, &it.g, it.t)?;
        let f_tm1 = den.denoise(&x_tm1, &it.g, it.t - 1)?;
        sum += sq_l2(&f_t, &f_tm1);
    }
    Ok(sum * (1.0 / items.len() as f64))
}

/// Joint objective on the same draws: `loss_diff + lambda_c * loss_tcr`.
pub fn loss_pre(
    items: &[LossItem],
    den: &mut dyn Denoiser,
    sched: &NoiseSchedule,
    lambda_c: f64,
) -> Result<f64> {
    Ok(loss_diff(items, den, sched)? + lambda_c * loss_tcr(items, den, sched)?)
}

fn sq_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------------------
// Tape-staged losses (training path).
// ---------------------------------------------------------------------------

/// One training draw: the example plus its sampled dropout/step/noise.
#[derive(Debug, Clone)]
pub struct DrawnExample {
    pub target: u32,
    pub history: Vec<u32>,
    pub use_dummy: bool,
    pub t: usize,
    pub z: Vec<f64>,
}

pub struct StagedLosses {
    pub loss_diff: NodeId,
    pub loss_tcr: NodeId,
    pub loss_pre: NodeId,
}

/// Builds all three losses for one batch on the tape. The clean target is an
/// embedding-table lookup, so reconstruction gradients also train the item
/// embeddings.
#[allow(clippy::too_many_arguments)]
pub fn stage_losses(
    tape: &mut Tape,
    enc_params: &GuidanceEncoderParams,
    enc: &EncoderNodes,
    den: &DenoiserNodes,
    sched: &NoiseSchedule,
    draws: &[DrawnExample],
    lambda_c: f64,
    stop_prev_branch: bool,
) -> Result<StagedLosses> {
    if draws.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    let mut ld_terms = Vec::with_capacity(draws.len());
    let mut lt_terms = Vec::with_capacity(draws.len());
    for dr in draws {
        let g = enc.encode(tape, enc_params, &dr.history, dr.use_dummy)?;
        let x = tape.gather_rows(enc.item_embeddings(), &[dr.target as usize]);

        let noised = |tape: &mut Tape, t: usize, z: &[f64]| {
            let a = sched.alpha_bar(t).sqrt();
            let b = sched.one_minus_alpha_bar(t).sqrt();
            let sx = tape.scale(x, a);
            let zb = tape.leaf_row(z.iter().map(|&zv| b * zv).collect());
            tape.add(sx, zb)
        };

        let x_t = noised(tape, dr.t, &dr.z);
        let f_t = den.denoise(tape, x_t, g, dr.t)?;
        let diff = tape.sub(f_t, x);
        ld_terms.push(tape.norm_sq(diff));

        let x_tm1 = noised(tape, dr.t - 1, &dr.z);
        let mut f_tm1 = den.denoise(tape, x_tm1, g, dr.t - 1)?;
        if stop_prev_branch {
            f_tm1 = tape.stop_grad(f_tm1);
        }
        let tdiff = tape.sub(f_t, f_tm1);
        lt_terms.push(tape.norm_sq(tdiff));
    }
    let loss_diff = tape.mean_scalars(&ld_terms);
    let loss_tcr = tape.mean_scalars(&lt_terms);
    let scaled = tape.scale(loss_tcr, lambda_c);
    let loss_pre = tape.add(loss_diff, scaled);
    Ok(StagedLosses {
        loss_diff,
        loss_tcr,
        loss_pre,
    })
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

pub fn run_pretraining(
    split: &DatasetSplit,
    corpus: &ItemCorpus,
    sched: &NoiseSchedule,
    dims: ModelDims,
    opts: &PretrainOptions,
) -> Result<PretrainOutput> {
    if dims.v != corpus.vocab_size() || dims.d != corpus.embedding_dim() {
        return Err(Error::Config(format!(
            "model dims (v={}, d={}) disagree with corpus (V={}, d={})",
            dims.v,
            dims.d,
            corpus.vocab_size(),
            corpus.embedding_dim()
        )));
    }
    if split.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut init_rng = component_rng(opts.seed, "pretrain-init");
    let mut encoder = GuidanceEncoderParams::init(dims, &mut init_rng)?;
    let mut denoiser = DenoiserParams::init(dims, &mut init_rng)?;

    let lens: Vec<usize> = encoder
        .tensors()
        .iter()
        .chain(denoiser.tensors().iter())
        .map(|(_, t)| t.len())
        .collect();
    let mut adam = Adam::new(
        AdamHyper {
            lr: opts.learning_rate,
            beta1: opts.adam_beta1,
            beta2: opts.adam_beta2,
            eps: opts.adam_eps,
        },
        &lens,
    );

    let mut shuffle_rng = component_rng(opts.seed, "pretrain-shuffle");
    let mut noise_rng = component_rng(opts.seed, "pretrain-noise");
    let mut dropout_rng = component_rng(opts.seed, "pretrain-dropout");

    let mut best = (encoder.clone(), denoiser.clone());
    let mut best_hr = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut log = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    for epoch in 0..opts.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut ld_sum, mut lt_sum, mut lp_sum, mut n_batches) = (0.0, 0.0, 0.0, 0usize);
        for (batch_idx, chunk) in order.chunks(opts.batch_size).enumerate() {
            let draws: Vec<DrawnExample> = chunk
                .iter()
                .map(|&i| {
                    let e = &split.train[i];
                    DrawnExample {
                        target: e.target,
                        history: e.history.clone(),
                        use_dummy: dropout_rng.random::<f64>() < opts.rho,
                        t: noise_rng.random_range(1..=sched.t_max()),
                        z: normal_vec(&mut noise_rng, dims.d),
                    }
                })
                .collect();
            let mut tape = Tape::new();
            let enc_nodes = encoder.stage(&mut tape);
            let den_nodes = denoiser.stage(&mut tape);
            let losses = stage_losses(
                &mut tape,
                &encoder,
                &enc_nodes,
                &den_nodes,
                sched,
                &draws,
                opts.lambda_c,
                opts.stop_tcr_prev_branch,
            )?;
            let lp = tape.scalar_value(losses.loss_pre);
            if !lp.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    msg: format!("loss_pre = {lp}"),
                });
            }
            ld_sum += tape.scalar_value(losses.loss_diff);
            lt_sum += tape.scalar_value(losses.loss_tcr);
            lp_sum += lp;
            n_batches += 1;
            let grads = tape.backward(losses.loss_pre).map_err(|e| Error::Diverged {
                epoch,
                batch: batch_idx,
                msg: e.to_string(),
            })?;
            let grad_tensors: Vec<crate::tape::Tensor> = enc_nodes
                .ids()
                .iter()
                .chain(den_nodes.ids())
                .map(|&id| grads.get(id, tape.value(id)))
                .collect();
            let mut params: Vec<&mut crate::tape::Tensor> = encoder.tensors_mut();
            params.extend(denoiser.tensors_mut());
            adam.step(&mut params, &grad_tensors);
        }

        let (valid_hr, valid_ndcg) = validate(
            &encoder,
            &denoiser,
            &split.valid,
            sched,
            opts.valid_k,
            opts.seed,
            epoch,
        )?;
        log.push(EpochLog {
            epoch,
            loss_diff: ld_sum / n_batches as f64,
            loss_tcr: lt_sum / n_batches as f64,
            loss_pre: lp_sum / n_batches as f64,
            valid_hr,
            valid_ndcg,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if valid_hr > best_hr {
            best_hr = valid_hr;
            best = (encoder.clone(), denoiser.clone());
            best_epoch = epoch;
        } else if epoch - best_epoch >= opts.patience {
            break;
        }
    }

    let (encoder, denoiser) = if log.is_empty() {
        (encoder, denoiser) // zero epochs: the initialization, unchanged
    } else {
        best
    };
    Ok(PretrainOutput {
        encoder,
        denoiser,
        log,
    })
}

/// One-step validation HR/NDCG; the noise stream is keyed on the epoch so
/// every epoch sees fresh but reproducible draws.
fn validate(
    enc: &GuidanceEncoderParams,
    den: &DenoiserParams,
    valid: &[SequenceExample],
    sched: &NoiseSchedule,
    k: usize,
    seed: u64,
    epoch: usize,
) -> Result<(f64, f64)> {
    if valid.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut rng = component_rng(seed.wrapping_add(epoch as u64), "pretrain-valid");
    let mut rt = DenoiserRt::new(den);
    let result = eval::evaluate_topk(enc, &mut rt, valid, sched, 1, k, false, &mut rng)?;
    Ok((result.hr, result.ndcg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::FnDenoiser;
    use crate::seeding::component_rng;

    fn dims() -> ModelDims {
        ModelDims {
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
        }
    }

    fn items(n: usize, t: usize, seed: u64) -> Vec<LossItem> {
        let mut rng = component_rng(seed, "items");
        (0..n)
            .map(|_| LossItem {
                x: normal_vec(&mut rng, 4),
                g: normal_vec(&mut rng, 4),
                t,
                z: normal_vec(&mut rng, 4),
            })
            .collect()
    }

    #[test]
    fn loss_diff_zero_for_perfect_reconstruction() {
        let sched = NoiseSchedule::linear(8, 1e-4, 0.02).unwrap();
        let batch = items(3, 5, 1);
        let xs: Vec<Vec<f64>> = batch.iter().map(|b| b.x.clone()).collect();
        let mut idx = 0;
        let mut den = FnDenoiser {
            dim: 4,
            f: move |_: &[f64], _: &[f64], _: usize| {
                let out = xs[idx % xs.len()].clone();
                idx += 1;
                out
            },
        };
        let v = loss_diff(&batch, &mut den, &sched).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn loss_diff_unit_offset_is_one() {
        let sched = NoiseSchedule::linear(8, 1e-4, 0.02).unwrap();
        let batch = items(1, 3, 2);
        let x = batch[0].x.clone();
        let mut den = FnDenoiser {
            dim: 4,
            f: move |_: &[f64], _: &[f64], _: usize| {
                let mut out = x.clone();
                out[0] += 1.0; // x + e1
                out
            },
        };
        let v = loss_diff(&batch, &mut den, &sched).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_diff_quadratic_in_offset() {
        let sched = NoiseSchedule::linear(8, 1e-4, 0.02).unwrap();
        let batch = items(2, 4, 3);
        let make = |c: f64| {
            let xs: Vec<Vec<f64>> = batch.iter().map(|b| b.x.clone()).collect();
            let mut idx = 0;
            FnDenoiser {
                dim: 4,
                f: move |_: &[f64], _: &[f64], _: usize| {
                    let mut out = xs[idx % xs.len()].clone();
                    idx += 1;
                    out[1] += c;
                    out
                },
            }
        };
        let v1 = loss_diff(&batch, &mut make(1.0), &sched).unwrap();
        let v2 = loss_diff(&batch, &mut make(2.0), &sched).unwrap();
        assert!((v2 - 4.0 * v1).abs() < 1e-9, "doubling the offset quadruples the loss");
    }

    #[test]
    fn loss_tcr_zero_for_constant_denoiser() {
        let sched = NoiseSchedule::linear(8, 1e-4, 0.02).unwrap();
        let batch = items(3, 5, 4);
        let mut den = FnDenoiser {
            dim: 4,
            f: |_: &[f64], _: &[f64], _: usize| vec![1.0, 2.0, 3.0, 4.0],
        };
        assert_eq!(loss_tcr(&batch, &mut den, &sched).unwrap(), 0.0);
    }

    #[test]
    fn loss_tcr_identity_denoiser_matches_plug_in_formula() {
        let sched = NoiseSchedule::linear(8, 1e-3, 0.3).unwrap();
        let batch = items(5, 6, 5);
        let mut den = FnDenoiser {
            dim: 4,
            f: |x_t: &[f64], _: &[f64], _: usize| x_t.to_vec(),
        };
        let got = loss_tcr(&batch, &mut den, &sched).unwrap();
        // oracle: direct expansion of ||x_t - x_{t-1}||^2 per item
        let mut want = 0.0;
        for it in &batch {
            let da = sched.alpha_bar(it.t).sqrt() - sched.alpha_bar(it.t - 1).sqrt();
            let db = sched.one_minus_alpha_bar(it.t).sqrt()
                - sched.one_minus_alpha_bar(it.t - 1).sqrt();
            let xx: f64 = it.x.iter().map(|v| v * v).sum();
            let zz: f64 = it.z.iter().map(|v| v * v).sum();
            let xz: f64 = it.x.iter().zip(&it.z).map(|(a, b)| a * b).sum();
            want += da * da * xx + db * db * zz + 2.0 * da * db * xz;
        }
        want /= batch.len() as f64;
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
    }

    #[test]
    fn loss_tcr_mean_of_identical_elements_is_single_value() {
        let sched = NoiseSchedule::linear(8, 1e-4, 0.02).unwrap();
        let one = items(1, 4, 6);
        let batch: Vec<LossItem> = vec![one[0].clone(); 5];
        let mut den = FnDenoiser {
            dim: 4,
            f: |x_t: &[f64], _: &[f64], t: usize| x_t.iter().map(|v| v * t as f64).collect(),
        };
        let a = loss_tcr(&one, &mut den, &sched).unwrap();
        let b = loss_tcr(&batch, &mut den, &sched).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_pre_is_affine_combination() {
        let sched = NoiseSchedule::linear(8, 1e-4, 0.02).unwrap();
        let batch = items(4, 3, 7);
        let mk = || FnDenoiser {
            dim: 4,
            f: |x_t: &[f64], g: &[f64], t: usize| {
                x_t.iter()
                    .zip(g)
                    .map(|(a, b)| a * 0.5 + b * 0.1 + t as f64 * 0.01)
                    .collect()
            },
        };
        let ld = loss_diff(&batch, &mut mk(), &sched).unwrap();
        let lt = loss_tcr(&batch, &mut mk(), &sched).unwrap();
        let lp0 = loss_pre(&batch, &mut mk(), &sched, 0.0).unwrap();
        assert_eq!(lp0, ld, "lambda_c = 0 must equal loss_diff exactly");
        let lp1 = loss_pre(&batch, &mut mk(), &sched, 1.0).unwrap();
        assert!((lp1 - (ld + lt)).abs() < 1e-12);
    }

    #[test]
    fn loss_pre_hand_sum() {
        // 0.5 + 1 * 0.2 = 0.7 at the scalar level
        assert_eq!(0.5f64 + 1.0 * 0.2, 0.7);
    }

    #[test]
    fn empty_batch_is_contract_violation() {
        let sched = NoiseSchedule::linear(8, 1e-4, 0.02).unwrap();
        let mut den = FnDenoiser {
            dim: 4,
            f: |_: &[f64], _: &[f64], _: usize| vec![0.0; 4],
        };
        assert!(loss_diff(&[], &mut den, &sched).is_err());
        assert!(loss_tcr(&[], &mut den, &sched).is_err());
    }

    #[test]
    fn staged_losses_match_value_losses_for_real_denoiser() {
        let sched = NoiseSchedule::linear(8, 1e-4, 0.02).unwrap();
        let mut rng = component_rng(8, "init");
        let enc = GuidanceEncoderParams::init(dims(), &mut rng).unwrap();
        let den = DenoiserParams::init(dims(), &mut rng).unwrap();
        let mut noise = component_rng(9, "noise");
        let draws: Vec<DrawnExample> = (0..4)
            .map(|i| DrawnExample {
                target: i as u32 % 6,
                history: vec![0, 1, (i as u32 + 2) % 6],
                use_dummy: i == 1,
                t: 1 + (i % 8),
                z: normal_vec(&mut noise, 4),
            })
            .collect();
        let mut tape = Tape::new();
        let enc_nodes = enc.stage(&mut tape);
        let den_nodes = den.stage(&mut tape);
        let staged = stage_losses(
            &mut tape,
            &enc,
            &enc_nodes,
            &den_nodes,
            &sched,
            &draws,
            0.5,
            false,
        )
        .unwrap();
        // value path: assemble the same items explicitly
        let mut items = Vec::new();
        for dr in &draws {
            let g = if dr.use_dummy {
                enc.dummy_guidance()
            } else {
                enc.encode_eval(&dr.history).unwrap()
            };
            items.push(LossItem {
                x: enc.embedding(dr.target).to_vec(),
                g,
                t: dr.t,
                z: dr.z.clone(),
            });
        }
        let mut rt = DenoiserRt::new(&den);
        let ld = loss_diff(&items, &mut rt, &sched).unwrap();
        let lt = loss_tcr(&items, &mut rt, &sched).unwrap();
        let lp = loss_pre(&items, &mut rt, &sched, 0.5).unwrap();
        assert_eq!(tape.scalar_value(staged.loss_diff), ld);
        assert_eq!(tape.scalar_value(staged.loss_tcr), lt);
        assert_eq!(tape.scalar_value(staged.loss_pre), lp);
    }

    #[test]
    fn gradient_of_pre_is_sum_of_component_gradients() {
        // d(loss_pre)/dp = d(loss_diff)/dp + lambda * d(loss_tcr)/dp
        let sched = NoiseSchedule::linear(8, 1e-4, 0.02).unwrap();
        let mut rng = component_rng(10, "init");
        let enc = GuidanceEncoderParams::init(dims(), &mut rng).unwrap();
        let den = DenoiserParams::init(dims(), &mut rng).unwrap();
        let mut noise = component_rng(11, "noise");
        let draws: Vec<DrawnExample> = (0..3)
            .map(|i| DrawnExample {
                target: i as u32,
                history: vec![3, 4, 5],
                use_dummy: false,
                t: 2 + i,
                z: normal_vec(&mut noise, 4),
            })
            .collect();
        let lambda = 0.7;
        let mut tape = Tape::new();
        let enc_nodes = enc.stage(&mut tape);
        let den_nodes = den.stage(&mut tape);
        let staged = stage_losses(
            &mut tape, &enc, &enc_nodes, &den_nodes, &sched, &draws, lambda, false,
        )
        .unwrap();
        let g_pre = tape.backward(staged.loss_pre).unwrap();
        let g_diff = tape.backward(staged.loss_diff).unwrap();
        let g_tcr = tape.backward(staged.loss_tcr).unwrap();
        for &id in enc_nodes.ids().iter().chain(den_nodes.ids()) {
            let like = tape.value(id);
            let gp = g_pre.get(id, like);
            let gd = g_diff.get(id, like);
            let gt = g_tcr.get(id, like);
            for i in 0..gp.len() {
                let want = gd.data[i] + lambda * gt.data[i];
                assert!(
                    (gp.data[i] - want).abs() <= 1e-12 * want.abs().max(1.0),
                    "component {i}: {} vs {}",
                    gp.data[i],
                    want
                );
            }
        }
    }

    #[test]
    fn single_vanilla_gradient_step_descends() {
        // small-rate descent check on fixed batches
        let sched = NoiseSchedule::linear(8, 1e-4, 0.02).unwrap();
        let mut rng = component_rng(12, "init");
        let mut enc = GuidanceEncoderParams::init(dims(), &mut rng).unwrap();
        let mut den = DenoiserParams::init(dims(), &mut rng).unwrap();
        let mut noise = component_rng(13, "noise");
        for trial in 0..10 {
            let draws: Vec<DrawnExample> = (0..4)
                .map(|i| DrawnExample {
                    target: (trial + i) as u32 % 6,
                    history: vec![i as u32 % 6, (i as u32 + 1) % 6, (i as u32 + 2) % 6],
                    use_dummy: false,
                    t: 1 + ((trial + i) % 8),
                    z: normal_vec(&mut noise, 4),
                })
                .collect();
            let eval_loss = |enc: &GuidanceEncoderParams, den: &DenoiserParams| -> f64 {
                let mut tape = Tape::new();
                let en = enc.stage(&mut tape);
                let dn = den.stage(&mut tape);
                let s =
                    stage_losses(&mut tape, enc, &en, &dn, &sched, &draws, 0.5, false).unwrap();
                tape.scalar_value(s.loss_pre)
            };
            let before = eval_loss(&enc, &den);
            let mut tape = Tape::new();
            let en = enc.stage(&mut tape);
            let dn = den.stage(&mut tape);
            let s = stage_losses(&mut tape, &enc, &en, &dn, &sched, &draws, 0.5, false).unwrap();
            let grads = tape.backward(s.loss_pre).unwrap();
            let gt: Vec<crate::tape::Tensor> = en
                .ids()
                .iter()
                .chain(dn.ids())
                .map(|&id| grads.get(id, tape.value(id)))
                .collect();
            let rate = 1e-4;
            {
                let mut params: Vec<&mut crate::tape::Tensor> = enc.tensors_mut();
                params.extend(den.tensors_mut());
                for (p, g) in params.iter_mut().zip(&gt) {
                    for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                        *pv -= rate * gv;
                    }
                }
            }
            let after = eval_loss(&enc, &den);
            assert!(
                after <= before + 1e-12,
                "trial {trial}: loss rose from {before} to {after}"
            );
        }
    }

    #[test]
    fn stop_prev_branch_changes_gradient_but_not_value() {
        let sched = NoiseSchedule::linear(8, 1e-4, 0.02).unwrap();
        let mut rng = component_rng(14, "init");
        let enc = GuidanceEncoderParams::init(dims(), &mut rng).unwrap();
        let den = DenoiserParams::init(dims(), &mut rng).unwrap();
        let mut noise = component_rng(15, "noise");
        let draws = vec![DrawnExample {
            target: 2,
            history: vec![0, 1, 2],
            use_dummy: false,
            t: 4,
            z: normal_vec(&mut noise, 4),
        }];
        let build = |stop: bool| {
            let mut tape = Tape::new();
            let en = enc.stage(&mut tape);
            let dn = den.stage(&mut tape);
            let s = stage_losses(&mut tape, &enc, &en, &dn, &sched, &draws, 1.0, stop).unwrap();
            let v = tape.scalar_value(s.loss_tcr);
            let g = tape.backward(s.loss_tcr).unwrap();
            let gsum: f64 = dn
                .ids()
                .iter()
                .map(|&id| g.get(id, tape.value(id)).data.iter().map(|x| x.abs()).sum::<f64>())
                .sum();
            (v, gsum)
        };
        let (v_both, g_both) = build(false);
        let (v_stop, g_stop) = build(true);
        assert_eq!(v_both, v_stop, "detaching must not change the value");
        assert_ne!(g_both, g_stop, "detaching must change the gradient");
    }
}
