use std::time::Instant;
use tarec::align::{self, FinetuneOptions, NegativeStrategy};
use tarec::corpus;
use tarec::eval;
use tarec::nets::{DenoiserRt, ModelDims};
use tarec::pretrain::{run_pretraining, PretrainOptions};
use tarec::schedule::NoiseSchedule;
use tarec::seeding::component_rng;
use tarec::synth::{self, SynthConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let users: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let p1: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.45);
    let p2: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.35);
    let ft_epochs: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0);
    let ft_lr: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let beta_end: f64 = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let hidden: usize = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(64);
    let rho: f64 = args.get(11).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let time_base: f64 = args.get(12).and_then(|s| s.parse().ok()).unwrap_or(10000.0);
    let batch: usize = args.get(13).and_then(|s| s.parse().ok()).unwrap_or(128);

    let scfg = SynthConfig {
        users, items: 200, clusters: 4, min_len: 5, max_len: 12,
        p_primary: p1, p_secondary: p2, seed: 17,
    };
    let raw = synth::generate(&scfg);
    let (c, _, split) = corpus::build_dataset(&raw, 10, 5, 3, 16).unwrap();
    eprintln!("V={} train={} valid={} test={}", c.vocab_size(), split.train.len(), split.valid.len(), split.test.len());
    let dims = ModelDims { v: c.vocab_size(), d: 16, l: 10, n_layers: 1, n_heads: 2, h_ff: 64, den_layers: 3, den_hidden: hidden, d_t: 16, time_base };
    let sched = NoiseSchedule::linear(500, 1e-4, beta_end).unwrap();

    for lambda_c in [0.5, 0.0] {
        let t0 = Instant::now();
        let opts = PretrainOptions {
            lambda_c, epochs, batch_size: batch, learning_rate: lr,
            rho, seed, patience: epochs, valid_k: 20,
            ..Default::default()
        };
        let out = run_pretraining(&split, &c, &sched, dims, &opts).unwrap();
        let train_s = t0.elapsed().as_secs_f64();
        // eval: one-step and 50-step HR on test
        let mut rt = DenoiserRt::new(&out.denoiser);
        let mut rng = component_rng(1000 + seed, "eval1");
        let e1 = eval::evaluate_topk(&out.encoder, &mut rt, &split.test, &sched, 1, 20, false, &mut rng).unwrap();
        let mut rng = component_rng(1000 + seed, "eval50");
        let e50 = eval::evaluate_topk(&out.encoder, &mut rt, &split.test, &sched, 50, 20, false, &mut rng).unwrap();
        let mut rng = component_rng(1000 + seed, "gap");
        let gap = eval::consistency_gap(&out.encoder, &mut rt, &split.test, &sched, 200, &mut rng).unwrap();
        // gap by t-decile for diagnosis
        let mut decile_gaps = vec![0.0; 10];
        {
            use tarec::schedule::forward_diffuse;
            use tarec::seeding::normal_vec;
            use tarec::nets::Denoiser;
            use rand::Rng as _;
            let mut enc_rt = tarec::nets::EncoderRt::new(&out.encoder);
            let mut drng = component_rng(999, "diag");
            for dec in 0..10 {
                let lo = 1 + dec * 50;
                let hi = lo + 49;
                let mut tot = 0.0;
                for _ in 0..40 {
                    let e = &split.test[drng.random_range(0..split.test.len())];
                    let g = enc_rt.encode(&e.history).unwrap();
                    let x = out.encoder.embedding(e.target).to_vec();
                    let t = drng.random_range(lo..=hi);
                    let z = normal_vec(&mut drng, 16);
                    let xt = forward_diffuse(&x, t, &z, &sched).unwrap();
                    let xm = forward_diffuse(&x, t - 1, &z, &sched).unwrap();
                    let ft = rt.denoise(&xt, &g, t).unwrap();
                    let fm = rt.denoise(&xm, &g, t - 1).unwrap();
                    tot += ft.iter().zip(&fm).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                }
                decile_gaps[dec] = tot / 40.0;
            }
        }
        eprintln!("  gap by t-decile: {:?}", decile_gaps.iter().map(|g| (g * 1e4).round() / 1e4).collect::<Vec<_>>());
        let final_log = out.log.last().unwrap();
        let best_ep = out.log.iter().enumerate().max_by(|a, b| a.1.valid_hr.total_cmp(&b.1.valid_hr)).map(|(i, _)| i).unwrap_or(0);
        println!("seed={seed} lc={lambda_c}: {:.0}s ep={}/best{best_ep} ld={:.3} lt={:.4} | HR1={:.4} HR50={:.4} ratio={:.3} gap={:.4} cov1={:.3}",
            train_s, out.log.len(), final_log.loss_diff, final_log.loss_tcr,
            e1.hr, e50.hr, e1.hr / e50.hr.max(1e-9), gap, e1.coverage);

        if ft_epochs > 0 && lambda_c > 0.0 {
            for fixed in [None, Some(0.5)] {
                let t0 = Instant::now();
                let fopts = FinetuneOptions {
                    lambda_base: 0.5, strategy: NegativeStrategy::RandomBatch,
                    epochs: ft_epochs, batch_size: 128, learning_rate: ft_lr,
                    seed, fixed_lambda: fixed, patience: 20, valid_k: 20,
                };
                let ft = align::run_finetuning(&split, &c, &out.encoder, &out.denoiser, &sched, &fopts).unwrap();
                let mut rt2 = DenoiserRt::new(&ft.denoiser);
                let mut rng = component_rng(1000 + seed, "eval1");
                let e1ft = eval::evaluate_topk(&out.encoder, &mut rt2, &split.test, &sched, 1, 20, false, &mut rng).unwrap();
                println!("  ft fixed={fixed:?}: {:.0}s HR1 {:.4} -> {:.4} (delta {:+.4})",
                    t0.elapsed().as_secs_f64(), e1.hr, e1ft.hr, e1ft.hr - e1.hr);
            }
        }
    }
}
