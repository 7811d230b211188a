use std::time::Instant;
use tarec::corpus;
use tarec::nets::*;
use tarec::pretrain::*;
use tarec::schedule::NoiseSchedule;
use tarec::seeding::{component_rng, normal_vec};
use tarec::synth;
use tarec::tape::Tape;
use rand::Rng;

fn main() {
    let cfg = synth::SynthConfig { users: 300, items: 60, seed: 5, ..Default::default() };
    let raw = synth::generate(&cfg);
    let (c, _, split) = corpus::build_dataset(&raw, 10, 5, 3, 16).unwrap();
    let dims = ModelDims { v: c.vocab_size(), d: 16, l: 10, n_layers: 1, n_heads: 2, h_ff: 64, den_layers: 3, den_hidden: 64, d_t: 16, time_base: 10_000.0 };
    let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let mut rng = component_rng(1, "init");
    let enc = GuidanceEncoderParams::init(dims, &mut rng).unwrap();
    let den = DenoiserParams::init(dims, &mut rng).unwrap();
    let mut noise = component_rng(2, "noise");
    let draws: Vec<DrawnExample> = split.train[..1024].iter().map(|e| DrawnExample {
        target: e.target, history: e.history.clone(), use_dummy: false,
        t: noise.random_range(1..=100), z: normal_vec(&mut noise, 16),
    }).collect();

    // forward only
    let t0 = Instant::now();
    for chunk in draws.chunks(128) {
        let mut tape = Tape::new();
        let en = enc.stage(&mut tape);
        let dn = den.stage(&mut tape);
        let _ = stage_losses(&mut tape, &enc, &en, &dn, &sched, chunk, 0.5, false).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64();

    // forward + backward
    let t0 = Instant::now();
    for chunk in draws.chunks(128) {
        let mut tape = Tape::new();
        let en = enc.stage(&mut tape);
        let dn = den.stage(&mut tape);
        let s = stage_losses(&mut tape, &enc, &en, &dn, &sched, chunk, 0.5, false).unwrap();
        let g = tape.backward(s.loss_pre).unwrap();
        std::hint::black_box(&g);
    }
    let both = t0.elapsed().as_secs_f64();

    // encoder forward alone (eval)
    let t0 = Instant::now();
    let mut ert = EncoderRt::new(&enc);
    for d in &draws { let _ = ert.encode(&d.history).unwrap(); }
    let encf = t0.elapsed().as_secs_f64();

    // denoiser forward alone
    let t0 = Instant::now();
    let mut drt = DenoiserRt::new(&den);
    let g = vec![0.1; 16]; let x = vec![0.2; 16];
    for i in 0..2048 { let _ = drt.denoise(&x, &g, 1 + i % 100).unwrap(); }
    let denf = t0.elapsed().as_secs_f64();

    println!("1024 examples: forward={:.1}ms fwd+bwd={:.1}ms | enc eval={:.1}us/ex den eval={:.1}us/call",
        fwd*1e3, both*1e3, encf/1024.0*1e6, denf/2048.0*1e6);
}
