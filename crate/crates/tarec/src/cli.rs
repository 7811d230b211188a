//! The `tarec` experiment runner: `prepare`, `pretrain`, `finetune`, `eval`,
//! and `probe` subcommands over one TOML config.
//!
//! Every subcommand is reproducible from (config, seed): all randomness flows
//! through per-component seeded streams, and every CSV carries the effective
//! config in `# `-prefixed header lines. Exit codes partition error classes:
//! 2 data, 3 training, 4 checkpoint, 5 eval, 6 probe.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::align::{self, FinetuneOptions};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::corpus::{self, DatasetSplit, ItemCorpus};
use crate::error::{Error, Result};
use crate::eval;
use crate::generate;
use crate::nets::{DenoiserParams, DenoiserRt, GuidanceEncoderParams};
use crate::pretrain::{self, PretrainOptions};
use crate::schedule::NoiseSchedule;
use crate::seeding::component_rng;
use crate::synth;

pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_EVAL: i32 = 5;
pub const EXIT_PROBE: i32 = 6;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::EmptyCorpus
        | Error::SplitTooSmall { .. }
        | Error::Config(_) => EXIT_DATA,
        Error::Diverged { .. } | Error::Numeric(_) | Error::Contract(_) => EXIT_TRAINING,
        Error::Checkpoint(_) | Error::Shape(_) | Error::Index { .. } => EXIT_CHECKPOINT,
        Error::Eval(_) => EXIT_EVAL,
        Error::Probe(_) => EXIT_PROBE,
    }
}

#[derive(Parser, Debug)]
#[command(name = "tarec", about = "two-stage diffusion recommender experiment runner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// experiment config file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// output root; defaults to $TAREC_OUT or ./tarec_out
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// config overrides, repeatable: --set section.key=value
    #[arg(long = "set", value_parser = parse_set)]
    pub sets: Vec<(String, String)>,
}

fn parse_set(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected section.key=value, got `{s}`"))
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Ingest, filter, window, and split the interaction log
    Prepare {
        #[command(flatten)]
        common: Common,
        /// generate the built-in synthetic corpus instead of reading data.path
        #[arg(long)]
        synthetic: bool,
    },
    /// Stage one: consistency-regularized pretraining
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// override the consistency weight
        #[arg(long = "lambda-c")]
        lambda_c: Option<f64>,
    },
    /// Stage two: preference-pair fine-tuning of the denoiser
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rank the test split and emit metric, inference, and timing CSVs
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// one_step | multi_step
        #[arg(long, default_value = "one_step")]
        mode: String,
        /// reverse steps for multi_step mode (defaults to infer.steps)
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run a theory probe: consistency | deviation | trend | dpo_grad | timing
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        probe: String,
    },
}

/// Parses argv and runs; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version printing
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare { common, synthetic } => {
            let (cfg, out) = setup(&common, &[])?;
            cmd_prepare(&cfg, &out, synthetic)
        }
        Command::Pretrain { common, lambda_c } => {
            let extra: Vec<(String, String)> = lambda_c
                .map(|l| vec![("pretrain.lambda_c".to_string(), l.to_string())])
                .unwrap_or_default();
            let (cfg, out) = setup(&common, &extra)?;
            cmd_pretrain(&cfg, &out)
        }
        Command::Finetune { common, checkpoint } => {
            let (cfg, out) = setup(&common, &[])?;
            cmd_finetune(&cfg, &out, &checkpoint)
        }
        Command::Eval {
            common,
            checkpoint,
            mode,
            steps,
        } => {
            let (cfg, out) = setup(&common, &[])?;
            cmd_eval(&cfg, &out, &checkpoint, &mode, steps)
        }
        Command::Probe {
            common,
            checkpoint,
            probe,
        } => {
            let (cfg, out) = setup(&common, &[])?;
            cmd_probe(&cfg, &out, checkpoint.as_deref(), &probe)
        }
    }
}

fn setup(common: &Common, extra: &[(String, String)]) -> Result<(ExperimentConfig, PathBuf)> {
    let mut overrides = common.sets.clone();
    overrides.extend(extra.iter().cloned());
    let cfg = ExperimentConfig::load(&common.config, &overrides)?;
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os("TAREC_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("tarec_out"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok((cfg, out))
}

/// Provenance lines placed at the top of every CSV.
fn provenance(cfg: &ExperimentConfig) -> Vec<String> {
    let mut lines = vec![format!("config_hash: {}", cfg.hash())];
    for l in cfg.canonical_toml().lines() {
        lines.push(format!("config: {l}"));
    }
    lines
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct PrepareManifest {
    pub config_hash: String,
    pub synthetic: bool,
    pub v: usize,
    pub l: usize,
    pub min_item_count: usize,
    pub min_seq_len: usize,
    pub embedding_dim: usize,
    pub n_users: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

pub fn cmd_prepare(cfg: &ExperimentConfig, out: &Path, synthetic: bool) -> Result<()> {
    let raw = if synthetic {
        let rows = synth::generate(&cfg.synth);
        let mut buf = String::new();
        for r in &rows {
            buf.push_str(&format!("{}\t{}\t{}\n", r.user, r.item, r.timestamp));
        }
        let raw_path = out.join("synthetic.tsv");
        fs::write(&raw_path, buf).map_err(|e| Error::io(&raw_path, e))?;
        rows
    } else {
        corpus::ingest(&cfg.data_path())?
    };
    let (item_corpus, histories, split) = corpus::build_dataset(
        &raw,
        cfg.data.l,
        cfg.data.min_item_count,
        cfg.data.min_seq_len,
        cfg.model.d,
    )?;
    let users: Vec<String> = histories.iter().map(|h| h.user.clone()).collect();
    corpus::write_corpus(out, &item_corpus)?;
    corpus::write_splits(out, &split, &item_corpus, &users)?;
    let manifest = PrepareManifest {
        config_hash: cfg.hash(),
        synthetic,
        v: item_corpus.vocab_size(),
        l: cfg.data.l,
        min_item_count: cfg.data.min_item_count,
        min_seq_len: cfg.data.min_seq_len,
        embedding_dim: cfg.model.d,
        n_users: users.len(),
        n_train: split.train.len(),
        n_valid: split.valid.len(),
        n_test: split.test.len(),
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    let mpath = out.join("manifest.toml");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    println!(
        "prepared: V={} users={} train/valid/test = {}/{}/{}",
        manifest.v, manifest.n_users, manifest.n_train, manifest.n_valid, manifest.n_test
    );
    Ok(())
}

pub fn load_prepared(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<(ItemCorpus, DatasetSplit, PrepareManifest)> {
    let mpath = out.join("manifest.toml");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: PrepareManifest =
        toml::from_str(&text).map_err(|e| Error::Config(format!("manifest parse: {e}")))?;
    if manifest.l != cfg.data.l || manifest.embedding_dim != cfg.model.d {
        return Err(Error::Config(format!(
            "prepared split (L={}, d={}) disagrees with config (L={}, d={})",
            manifest.l, manifest.embedding_dim, cfg.data.l, cfg.model.d
        )));
    }
    let item_corpus = corpus::read_corpus(out, cfg.model.d)?;
    let (split, _) = corpus::read_splits(out, &item_corpus, cfg.data.l)?;
    Ok((item_corpus, split, manifest))
}

fn sched_of(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(cfg.schedule.t, cfg.schedule.beta_start, cfg.schedule.beta_end)
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (item_corpus, split, _) = load_prepared(cfg, out)?;
    let sched = sched_of(cfg)?;
    let opts = PretrainOptions {
        lambda_c: cfg.pretrain.lambda_c,
        epochs: cfg.pretrain.epochs,
        batch_size: cfg.pretrain.batch,
        learning_rate: cfg.pretrain.lr,
        rho: cfg.model.rho,
        seed: cfg.pretrain.seed,
        stop_tcr_prev_branch: cfg.pretrain.stop_tcr_prev_branch,
        patience: cfg.pretrain.patience,
        valid_k: cfg.eval.k,
        ..PretrainOptions::default()
    };
    let dims = cfg.dims_for(item_corpus.vocab_size());
    let result = pretrain::run_pretraining(&split, &item_corpus, &sched, dims, &opts)?;
    let ckpt = out.join("pretrained.tarec");
    checkpoint::save(&ckpt, &result.encoder, &result.denoiser, sched.t_max())?;
    let rows: Vec<String> = result
        .log
        .iter()
        .map(|l| {
            format!(
                "{},{:.9},{:.9},{:.9},{:.6},{:.6},{:.3}",
                l.epoch, l.loss_diff, l.loss_tcr, l.loss_pre, l.valid_hr, l.valid_ndcg,
                l.wall_seconds
            )
        })
        .collect();
    let log_path = out.join(format!(
        "pretrain_log_{}_s{}.csv",
        cfg.hash(),
        cfg.pretrain.seed
    ));
    eval::write_csv(
        &log_path,
        &provenance(cfg),
        "epoch,loss_diff,loss_tcr,loss_pre,valid_hr20,valid_ndcg20,wall_seconds",
        &rows,
    )?;
    let last = result.log.last();
    println!(
        "pretrained: epochs={} best_valid_hr={:.4} checkpoint={}",
        result.log.len(),
        last.map(|_| result
            .log
            .iter()
            .map(|l| l.valid_hr)
            .fold(f64::NEG_INFINITY, f64::max))
            .unwrap_or(0.0),
        ckpt.display()
    );
    Ok(())
}

/// Loads a checkpoint and verifies it matches the config's architecture.
fn load_checkpoint_checked(
    cfg: &ExperimentConfig,
    path: &Path,
) -> Result<(GuidanceEncoderParams, DenoiserParams, checkpoint::Manifest)> {
    let (enc, den, manifest) = checkpoint::load(path)?;
    let want = cfg.dims_for(manifest.v);
    if manifest.dims() != want {
        let got = manifest.dims();
        let mut offending = Vec::new();
        if got.d != want.d {
            offending.push(format!("d: {} vs {}", got.d, want.d));
        }
        if got.l != want.l {
            offending.push(format!("l: {} vs {}", got.l, want.l));
        }
        if got.n_layers != want.n_layers {
            offending.push(format!("encoder_layers: {} vs {}", got.n_layers, want.n_layers));
        }
        if got.n_heads != want.n_heads {
            offending.push(format!("encoder_heads: {} vs {}", got.n_heads, want.n_heads));
        }
        if got.h_ff != want.h_ff {
            offending.push(format!("h_ff: {} vs {}", got.h_ff, want.h_ff));
        }
        if got.den_layers != want.den_layers {
            offending.push(format!(
                "denoiser_layers: {} vs {}",
                got.den_layers, want.den_layers
            ));
        }
        if got.den_hidden != want.den_hidden {
            offending.push(format!(
                "denoiser_hidden: {} vs {}",
                got.den_hidden, want.den_hidden
            ));
        }
        if got.d_t != want.d_t {
            offending.push(format!("d_t: {} vs {}", got.d_t, want.d_t));
        }
        return Err(Error::Checkpoint(format!(
            "checkpoint does not match config: {}",
            offending.join(", ")
        )));
    }
    Ok((enc, den, manifest))
}

pub fn cmd_finetune(cfg: &ExperimentConfig, out: &Path, ckpt_path: &Path) -> Result<()> {
    let (enc, den, _) = load_checkpoint_checked(cfg, ckpt_path)?;
    let (item_corpus, split, _) = load_prepared(cfg, out)?;
    if item_corpus.vocab_size() != enc.dims.v {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary {} does not match corpus {}",
            enc.dims.v,
            item_corpus.vocab_size()
        )));
    }
    let sched = sched_of(cfg)?;
    let opts = FinetuneOptions {
        lambda_base: cfg.finetune.lambda_base,
        strategy: cfg.strategy(),
        epochs: cfg.finetune.epochs,
        batch_size: cfg.finetune.batch,
        learning_rate: cfg.finetune.lr,
        seed: cfg.finetune.seed,
        fixed_lambda: cfg.fixed_lambda(),
        patience: cfg.finetune.patience,
        valid_k: cfg.eval.k,
    };
    let result = align::run_finetuning(&split, &item_corpus, &enc, &den, &sched, &opts)?;
    let ckpt = out.join("finetuned.tarec");
    checkpoint::save(&ckpt, &enc, &result.denoiser, sched.t_max())?;
    let rows: Vec<String> = result
        .log
        .iter()
        .map(|l| {
            format!(
                "{},{:.9},{:.6},{:.6},{:.6},{:.3}",
                l.epoch, l.loss_apa, l.mean_lambda_beta, l.valid_hr, l.valid_ndcg, l.wall_seconds
            )
        })
        .collect();
    let log_path = out.join(format!(
        "finetune_log_{}_s{}.csv",
        cfg.hash(),
        cfg.finetune.seed
    ));
    eval::write_csv(
        &log_path,
        &provenance(cfg),
        "epoch,loss_apa,mean_lambda_beta,valid_hr20,valid_ndcg20,wall_seconds",
        &rows,
    )?;
    println!(
        "finetuned: epochs={} checkpoint={}",
        result.log.len(),
        ckpt.display()
    );
    Ok(())
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    ckpt_path: &Path,
    mode: &str,
    steps_flag: Option<usize>,
) -> Result<()> {
    let (enc, den, _) = load_checkpoint_checked(cfg, ckpt_path)?;
    let (item_corpus, split, _) = load_prepared(cfg, out)?;
    let sched = sched_of(cfg)?;
    let steps = match mode {
        "one_step" => 1,
        "multi_step" => steps_flag.unwrap_or(cfg.infer.steps),
        other => {
            return Err(Error::Config(format!(
                "unknown eval mode `{other}` (one_step | multi_step)"
            )))
        }
    };
    if steps == 0 || steps > sched.t_max() {
        return Err(Error::Eval(format!(
            "steps must lie in 1..=T, got {steps}"
        )));
    }
    let k = cfg.eval.k;
    if k > item_corpus.vocab_size() {
        return Err(Error::Eval(format!(
            "k={k} exceeds corpus size V={}",
            item_corpus.vocab_size()
        )));
    }
    let mut rng = component_rng(cfg.eval.seed, "eval-noise");
    let mut rt = DenoiserRt::new(&den);
    let result = eval::evaluate_topk(
        &enc,
        &mut rt,
        &split.test,
        &sched,
        steps,
        k,
        cfg.infer.exclude_history,
        &mut rng,
    )?;

    let hash = cfg.hash();
    let seed = cfg.eval.seed;
    let metrics_path = out.join(format!("metrics_{hash}_s{seed}.csv"));
    let report = eval::MetricReport {
        k,
        n_users: split.test.len(),
        hr_at_k: result.hr,
        ndcg_at_k: result.ndcg,
        coverage_at_k: result.coverage,
        timings: Vec::new(),
        probe_stats: Vec::new(),
    };
    eval::write_csv(
        &metrics_path,
        &provenance(cfg),
        "mode,steps,k,n_users,hr_at_k,ndcg_at_k,coverage_at_k",
        &[format!(
            "{mode},{steps},{},{},{:.6},{:.6},{:.6}",
            report.k, report.n_users, report.hr_at_k, report.ndcg_at_k, report.coverage_at_k
        )],
    )?;

    let inference_path = out.join(format!("inference_{hash}_s{seed}.csv"));
    let rows: Vec<String> = result
        .rows
        .iter()
        .map(|r| {
            let items = r
                .top_k
                .iter()
                .map(|(i, _)| i.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            let scores = r
                .top_k
                .iter()
                .map(|(_, s)| format!("{s:.6}"))
                .collect::<Vec<_>>()
                .join(" ");
            format!(
                "{},{items},{scores},{:.6},{}",
                r.user_ord, r.gen_seconds, r.steps
            )
        })
        .collect();
    eval::write_csv(
        &inference_path,
        &provenance(cfg),
        "user_ord,top_k_items,scores,gen_wall_seconds,steps",
        &rows,
    )?;

    let sample: Vec<_> = split.test.iter().take(50).cloned().collect();
    let timing = eval::timing_harness(
        &enc,
        &den,
        &sample,
        &sched,
        sched.t_max(),
        cfg.eval.repeats,
        cfg.eval.seed,
    )?;
    write_timing_csv(cfg, out, &timing, "timing")?;

    println!(
        "eval mode={mode} steps={steps}: HR@{k}={:.4} NDCG@{k}={:.4} coverage@{k}={:.4}",
        result.hr, result.ndcg, result.coverage
    );
    Ok(())
}

fn write_timing_csv(
    cfg: &ExperimentConfig,
    out: &Path,
    timing: &eval::TimingReport,
    stem: &str,
) -> Result<()> {
    let path = out.join(format!("{stem}_{}_s{}.csv", cfg.hash(), cfg.eval.seed));
    let rows: Vec<String> = timing
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{:.6},{},{},{:.3},{:.3}",
                r.mode,
                r.steps,
                r.median_seconds,
                r.denoiser_calls,
                r.single_sample,
                timing.speedup,
                timing.call_ratio
            )
        })
        .collect();
    eval::write_csv(
        &path,
        &provenance(cfg),
        "mode,steps,median_seconds,denoiser_calls,single_sample,speedup,call_ratio",
        &rows,
    )
}

pub fn cmd_probe(
    cfg: &ExperimentConfig,
    out: &Path,
    ckpt_path: Option<&Path>,
    probe: &str,
) -> Result<()> {
    let hash = cfg.hash();
    let seed = cfg.eval.seed;
    let need_model = |p: Option<&Path>| -> Result<(GuidanceEncoderParams, DenoiserParams)> {
        let path = p.ok_or_else(|| Error::Probe(format!("probe `{probe}` needs --checkpoint")))?;
        let (enc, den, _) = load_checkpoint_checked(cfg, path)?;
        Ok((enc, den))
    };
    match probe {
        "consistency" => {
            let (enc, den) = need_model(ckpt_path)?;
            let (_, split, _) = load_prepared(cfg, out)?;
            let sched = sched_of(cfg)?;
            let mut rng = component_rng(seed, "probe-consistency");
            let mut rt = DenoiserRt::new(&den);
            let gap = eval::consistency_gap(
                &enc,
                &mut rt,
                &split.test,
                &sched,
                cfg.eval.probes,
                &mut rng,
            )?;
            let path = out.join(format!("probe_consistency_{hash}_s{seed}.csv"));
            eval::write_csv(
                &path,
                &provenance(cfg),
                "n_probes,consistency_gap",
                &[format!("{},{gap:.9}", cfg.eval.probes)],
            )?;
            println!("consistency_gap: {gap:.6} over {} probes", cfg.eval.probes);
        }
        "deviation" => {
            let (enc, den) = need_model(ckpt_path)?;
            let (_, split, _) = load_prepared(cfg, out)?;
            let sched = sched_of(cfg)?;
            let steps_ref = 50.min(sched.t_max());
            if steps_ref < 2 {
                return Err(Error::Probe(
                    "deviation probe needs a schedule with T >= 2".into(),
                ));
            }
            let n = cfg.eval.probes.min(split.test.len()).max(1);
            let mut enc_rt = crate::nets::EncoderRt::new(&enc);
            let gs: Vec<Vec<f64>> = split.test[..n]
                .iter()
                .map(|e| enc_rt.encode(&e.history))
                .collect::<Result<_>>()?;
            let mut rng = component_rng(seed, "probe-deviation");
            let mut rt = DenoiserRt::new(&den);
            let (mean, samples) =
                eval::one_step_deviation(&mut rt, &gs, &sched, steps_ref, &mut rng)?;
            let rows: Vec<String> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    format!(
                        "{i},{:.9},{:.9},{}",
                        s.deviation,
                        s.chained_bound,
                        s.deviation <= s.chained_bound + 1e-9
                    )
                })
                .collect();
            let path = out.join(format!("probe_deviation_{hash}_s{seed}.csv"));
            eval::write_csv(
                &path,
                &provenance(cfg),
                "sample,deviation,chained_bound,within_bound",
                &rows,
            )?;
            let all_within = samples
                .iter()
                .all(|s| s.deviation <= s.chained_bound + 1e-9);
            println!(
                "one_step_deviation: mean={mean:.6} over {n} samples, chained bound {}",
                if all_within { "holds" } else { "VIOLATED" }
            );
        }
        "trend" => {
            let (enc, den) = need_model(ckpt_path)?;
            let (_, split, _) = load_prepared(cfg, out)?;
            let t_set = [5usize, 10, 50, 100, 500];
            let n = 20.min(split.test.len()).max(1);
            let mut enc_rt = crate::nets::EncoderRt::new(&enc);
            let _gs: Vec<Vec<f64>> = split.test[..n]
                .iter()
                .map(|e| enc_rt.encode(&e.history))
                .collect::<Result<_>>()?;
            let mut rng = component_rng(seed, "probe-trend");
            let mut rt = DenoiserRt::new(&den);
            let trend = eval::discretization_trend(
                &mut rt,
                n,
                enc.dims.d,
                &t_set,
                cfg.schedule.beta_start,
                cfg.schedule.beta_end,
                &mut rng,
            )?;
            let pairs: Vec<(f64, f64)> =
                trend.iter().map(|&(t, d)| (t as f64, d)).collect();
            let rho = eval::spearman(&pairs);
            let rows: Vec<String> = trend
                .iter()
                .map(|&(t, d)| format!("{t},{d:.9}"))
                .collect();
            let path = out.join(format!("probe_trend_{hash}_s{seed}.csv"));
            eval::write_csv(&path, &provenance(cfg), "steps,mean_deviation", &rows)?;
            println!(
                "discretization_trend: spearman={rho:.3} ({})",
                if rho <= -0.8 { "monotone decreasing" } else { "no verdict" }
            );
        }
        "dpo_grad" => {
            let delta_rs: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
            let report = eval::dpo_gradient_probe(&delta_rs, 0.05, 10.0, 1e-9)?;
            let rows: Vec<String> = report
                .rows
                .iter()
                .map(|r| {
                    format!(
                        "{:.2},{:.4},{:.9},{}",
                        r.delta_r,
                        r.lambda,
                        r.h,
                        if r.in_hypothesis { "in" } else { "outside-hypothesis" }
                    )
                })
                .collect();
            let path = out.join(format!("probe_dpo_grad_{hash}_s{seed}.csv"));
            eval::write_csv(&path, &provenance(cfg), "delta_r,lambda,h,region", &rows)?;
            println!(
                "dpo_grad: {}",
                if report.all_non_decreasing() {
                    "all rows non-decreasing"
                } else {
                    "MONOTONICITY VIOLATED"
                }
            );
        }
        "timing" => {
            let (enc, den) = need_model(ckpt_path)?;
            let (_, split, _) = load_prepared(cfg, out)?;
            let sched = sched_of(cfg)?;
            let sample: Vec<_> = split.test.iter().take(20).cloned().collect();
            if sample.is_empty() {
                return Err(Error::Probe("timing probe needs test examples".into()));
            }
            let timing = eval::timing_harness(
                &enc,
                &den,
                &sample,
                &sched,
                sched.t_max(),
                cfg.eval.repeats,
                seed,
            )?;
            write_timing_csv(cfg, out, &timing, "probe_timing")?;
            println!(
                "timing: speedup={:.1}x call_ratio={:.0}",
                timing.speedup, timing.call_ratio
            );
        }
        other => {
            return Err(Error::Probe(format!(
                "unknown probe `{other}` (consistency | deviation | trend | dpo_grad | timing)"
            )))
        }
    }
    Ok(())
}

// Re-exported for integration tests that drive subcommands in-process.
pub use generate::NoiseMode as _NoiseModeForDocs;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_partition_error_classes() {
        assert_eq!(exit_code(&Error::EmptyCorpus), EXIT_DATA);
        assert_eq!(
            exit_code(&Error::Diverged {
                epoch: 0,
                batch: 0,
                msg: String::new()
            }),
            EXIT_TRAINING
        );
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), EXIT_CHECKPOINT);
        assert_eq!(exit_code(&Error::Eval("x".into())), EXIT_EVAL);
        assert_eq!(exit_code(&Error::Probe("x".into())), EXIT_PROBE);
    }

    #[test]
    fn set_parser_splits_on_equals() {
        assert_eq!(
            parse_set("pretrain.lambda_c=0.5").unwrap(),
            ("pretrain.lambda_c".to_string(), "0.5".to_string())
        );
        assert!(parse_set("nonsense").is_err());
    }
}
