//! The two learnable components: a Transformer encoder that summarizes a
//! padded interaction history into a guidance vector `g`, and an MLP
//! denoiser `f(x_t, g, t)` that reconstructs the target item embedding.
//!
//! Every forward pass — training or inference — runs through the same tape
//! ops, so the value produced during evaluation is bit-identical to the value
//! differentiated during training. Inference paths reuse a persistent tape
//! and truncate it back to the staged parameters between calls.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape, Tensor};

/// Shared architecture dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDims {
    /// vocabulary size (pad row lives at index `v`)
    pub v: usize,
    /// embedding dimension
    pub d: usize,
    /// history length
    pub l: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// feed-forward hidden width
    pub h_ff: usize,
    /// denoiser layer count (weight matrices)
    pub den_layers: usize,
    pub den_hidden: usize,
    /// timestep embedding dimension (even)
    pub d_t: usize,
    /// sinusoid frequency base for the timestep embedding
    pub time_base: f64,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.l == 0 || self.v == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d={} must be divisible by n_heads={}",
                self.d, self.n_heads
            )));
        }
        if self.d_t % 2 != 0 || self.d_t == 0 {
            return Err(Error::Config("timestep embedding dimension must be even".into()));
        }
        if self.den_layers < 1 {
            return Err(Error::Config("denoiser needs at least one layer".into()));
        }
        if !(self.time_base > 1.0) {
            return Err(Error::Config("timestep sinusoid base must exceed 1".into()));
        }
        Ok(())
    }
}

fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

fn fan_in(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    normal_tensor(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayer {
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
    ff_w1: Tensor,
    ff_b1: Tensor,
    ff_w2: Tensor,
    ff_b2: Tensor,
}

/// Transformer guidance encoder. Owns the item embedding table (the model's
/// candidate space, jointly trained during pretraining) and the learned
/// unconditional token used for classifier-free guidance dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceEncoderParams {
    pub dims: ModelDims,
    item_embeddings: Tensor,
    positional: Tensor,
    layers: Vec<EncoderLayer>,
    final_ln_gamma: Tensor,
    final_ln_beta: Tensor,
    readout_w: Tensor,
    readout_b: Tensor,
    dummy: Tensor,
}

impl GuidanceEncoderParams {
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let d = dims.d;
        let layers = (0..dims.n_layers)
            .map(|_| EncoderLayer {
                ln1_gamma: Tensor::from_vec(1, d, vec![1.0; d]),
                ln1_beta: Tensor::zeros(1, d),
                wq: fan_in(rng, d, d),
                bq: Tensor::zeros(1, d),
                wk: fan_in(rng, d, d),
                bk: Tensor::zeros(1, d),
                wv: fan_in(rng, d, d),
                bv: Tensor::zeros(1, d),
                wo: fan_in(rng, d, d),
                bo: Tensor::zeros(1, d),
                ln2_gamma: Tensor::from_vec(1, d, vec![1.0; d]),
                ln2_beta: Tensor::zeros(1, d),
                ff_w1: fan_in(rng, d, dims.h_ff),
                ff_b1: Tensor::zeros(1, dims.h_ff),
                ff_w2: fan_in(rng, dims.h_ff, d),
                ff_b2: Tensor::zeros(1, d),
            })
            .collect();
        Ok(GuidanceEncoderParams {
            dims,
            item_embeddings: normal_tensor(rng, dims.v + 1, d, 1.0),
            positional: normal_tensor(rng, dims.l, d, 1.0),
            layers,
            final_ln_gamma: Tensor::from_vec(1, d, vec![1.0; d]),
            final_ln_beta: Tensor::zeros(1, d),
            readout_w: fan_in(rng, d, d),
            readout_b: Tensor::zeros(1, d),
            dummy: normal_tensor(rng, 1, d, 1.0),
        })
    }

    /// All-zero tensors with the right shapes (checkpoint loading target).
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let d = dims.d;
        let layers = (0..dims.n_layers)
            .map(|_| EncoderLayer {
                ln1_gamma: Tensor::zeros(1, d),
                ln1_beta: Tensor::zeros(1, d),
                wq: Tensor::zeros(d, d),
                bq: Tensor::zeros(1, d),
                wk: Tensor::zeros(d, d),
                bk: Tensor::zeros(1, d),
                wv: Tensor::zeros(d, d),
                bv: Tensor::zeros(1, d),
                wo: Tensor::zeros(d, d),
                bo: Tensor::zeros(1, d),
                ln2_gamma: Tensor::zeros(1, d),
                ln2_beta: Tensor::zeros(1, d),
                ff_w1: Tensor::zeros(d, dims.h_ff),
                ff_b1: Tensor::zeros(1, dims.h_ff),
                ff_w2: Tensor::zeros(dims.h_ff, d),
                ff_b2: Tensor::zeros(1, d),
            })
            .collect();
        Ok(GuidanceEncoderParams {
            dims,
            item_embeddings: Tensor::zeros(dims.v + 1, d),
            positional: Tensor::zeros(dims.l, d),
            layers,
            final_ln_gamma: Tensor::zeros(1, d),
            final_ln_beta: Tensor::zeros(1, d),
            readout_w: Tensor::zeros(d, d),
            readout_b: Tensor::zeros(1, d),
            dummy: Tensor::zeros(1, d),
        })
    }

    pub fn item_embeddings(&self) -> &Tensor {
        &self.item_embeddings
    }

    pub fn embedding(&self, index: u32) -> &[f64] {
        self.item_embeddings.row(index as usize)
    }

    /// Named tensors in declaration (checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("item_embeddings".to_string(), &self.item_embeddings),
            ("positional".to_string(), &self.positional),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_gamma", &l.ln1_gamma),
                ("ln1_beta", &l.ln1_beta),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_gamma", &l.ln2_gamma),
                ("ln2_beta", &l.ln2_beta),
                ("ff_w1", &l.ff_w1),
                ("ff_b1", &l.ff_b1),
                ("ff_w2", &l.ff_w2),
                ("ff_b2", &l.ff_b2),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("final_ln_gamma".to_string(), &self.final_ln_gamma));
        out.push(("final_ln_beta".to_string(), &self.final_ln_beta));
        out.push(("readout_w".to_string(), &self.readout_w));
        out.push(("readout_b".to_string(), &self.readout_b));
        out.push(("dummy".to_string(), &self.dummy));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.item_embeddings, &mut self.positional];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gamma,
                &mut l.ln1_beta,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_gamma,
                &mut l.ln2_beta,
                &mut l.ff_w1,
                &mut l.ff_b1,
                &mut l.ff_w2,
                &mut l.ff_b2,
            ]);
        }
        out.push(&mut self.final_ln_gamma);
        out.push(&mut self.final_ln_beta);
        out.push(&mut self.readout_w);
        out.push(&mut self.readout_b);
        out.push(&mut self.dummy);
        out
    }

    /// Stages every tensor as a tape leaf, in declaration order.
    pub fn stage(&self, tape: &mut Tape) -> EncoderNodes {
        let ids: Vec<NodeId> = self
            .tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        EncoderNodes {
            dims: self.dims,
            ids,
        }
    }

    fn check_history(&self, history: &[u32]) -> Result<()> {
        if history.len() != self.dims.l {
            return Err(Error::Shape(format!(
                "history length {} != L={}",
                history.len(),
                self.dims.l
            )));
        }
        let pad = self.dims.v as u32;
        for &h in history {
            if h > pad {
                return Err(Error::Index {
                    index: h,
                    vocab: self.dims.v,
                });
            }
        }
        Ok(())
    }

    /// Evaluation-mode guidance (dropout ignored).
    pub fn encode_eval(&self, history: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let nodes = self.stage(&mut tape);
        let g = nodes.encode(&mut tape, self, history, false)?;
        Ok(tape.value(g).data.clone())
    }

    /// Training-mode guidance: with probability `rho` the guidance is
    /// replaced by the learned unconditional token.
    pub fn encode_guidance(
        &self,
        history: &[u32],
        rho: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        let use_dummy = training && rng.random::<f64>() < rho;
        let mut tape = Tape::new();
        let nodes = self.stage(&mut tape);
        let g = nodes.encode(&mut tape, self, history, use_dummy)?;
        Ok(tape.value(g).data.clone())
    }

    pub fn dummy_guidance(&self) -> Vec<f64> {
        self.dummy.data.clone()
    }
}

/// Staged encoder parameters on a tape.
pub struct EncoderNodes {
    dims: ModelDims,
    ids: Vec<NodeId>,
}

// Fixed positions of the non-layer tensors in declaration order.
const ENC_ITEM_EMB: usize = 0;
const ENC_POSITIONAL: usize = 1;
const ENC_PER_LAYER: usize = 16;

impl EncoderNodes {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn item_embeddings(&self) -> NodeId {
        self.ids[ENC_ITEM_EMB]
    }

    pub fn dummy(&self) -> NodeId {
        *self.ids.last().unwrap()
    }

    fn layer(&self, i: usize) -> &[NodeId] {
        let start = 2 + i * ENC_PER_LAYER;
        &self.ids[start..start + ENC_PER_LAYER]
    }

    /// Builds the guidance forward pass on the tape. With `use_dummy` the
    /// result is the unconditional token node itself, so its gradient trains
    /// the token.
    ///
    /// Everything past attention is row-wise and only the final position
    /// reaches the readout, so the last layer evaluates its query, feed
    /// forward, and norms on the final row alone — the same values at a
    /// tenth of the work.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &GuidanceEncoderParams,
        history: &[u32],
        use_dummy: bool,
    ) -> Result<NodeId> {
        params.check_history(history)?;
        if use_dummy {
            return Ok(self.dummy());
        }
        let dims = self.dims;
        let dh = dims.d / dims.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let indices: Vec<usize> = history.iter().map(|&h| h as usize).collect();
        let emb = tape.gather_rows(self.item_embeddings(), &indices);
        let mut x = tape.add(emb, self.ids[ENC_POSITIONAL]);
        let full_mask = attention_mask(history, dims.v as u32, dims.l);

        // all layers except the last keep every position
        for li in 0..dims.n_layers.saturating_sub(1) {
            let l = self.layer(li).to_vec();
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, ff_w1, ff_b1, ff_w2, ff_b2] =
                l[..] else {
                unreachable!()
            };
            let mask = tape.leaf(full_mask.clone());
            let h = tape.layer_norm_rows(x, ln1_g, ln1_b);
            let q0 = tape.matmul(h, wq);
            let q = tape.add_row_broadcast(q0, bq);
            let k0 = tape.matmul(h, wk);
            let k = tape.add_row_broadcast(k0, bk);
            let v0 = tape.matmul(h, wv);
            let v = tape.add_row_broadcast(v0, bv);
            let mut heads = Vec::with_capacity(dims.n_heads);
            for hd in 0..dims.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let kt = tape.transpose(kh);
                let s0 = tape.matmul(qh, kt);
                let s1 = tape.scale(s0, scale);
                let s = tape.add(s1, mask);
                let a = tape.softmax_rows(s);
                heads.push(tape.matmul(a, vh));
            }
            let merged = tape.concat_cols(&heads);
            let o0 = tape.matmul(merged, wo);
            let o = tape.add_row_broadcast(o0, bo);
            x = tape.add(x, o);
            let h2 = tape.layer_norm_rows(x, ln2_g, ln2_b);
            let f0 = tape.matmul(h2, ff_w1);
            let f1 = tape.add_row_broadcast(f0, ff_b1);
            let f2 = tape.gelu(f1);
            let f3 = tape.matmul(f2, ff_w2);
            let f = tape.add_row_broadcast(f3, ff_b2);
            x = tape.add(x, f);
        }

        // final layer: final-position query only
        let mut last = if dims.n_layers == 0 {
            tape.slice_rows(x, dims.l - 1, 1)
        } else {
            let l = self.layer(dims.n_layers - 1).to_vec();
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, ff_w1, ff_b1, ff_w2, ff_b2] =
                l[..] else {
                unreachable!()
            };
            let mask_row = {
                let row = full_mask.row(dims.l - 1).to_vec();
                tape.leaf(Tensor::row_vec(row))
            };
            let h = tape.layer_norm_rows(x, ln1_g, ln1_b);
            let h_last = tape.slice_rows(h, dims.l - 1, 1);
            let q0 = tape.matmul(h_last, wq);
            let q = tape.add_row_broadcast(q0, bq);
            let k0 = tape.matmul(h, wk);
            let k = tape.add_row_broadcast(k0, bk);
            let v0 = tape.matmul(h, wv);
            let v = tape.add_row_broadcast(v0, bv);
            let mut heads = Vec::with_capacity(dims.n_heads);
            for hd in 0..dims.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let kt = tape.transpose(kh);
                let s0 = tape.matmul(qh, kt);
                let s1 = tape.scale(s0, scale);
                let s = tape.add(s1, mask_row);
                let a = tape.softmax_rows(s);
                heads.push(tape.matmul(a, vh));
            }
            let merged = tape.concat_cols(&heads);
            let o0 = tape.matmul(merged, wo);
            let o = tape.add_row_broadcast(o0, bo);
            let x_last = tape.slice_rows(x, dims.l - 1, 1);
            let x_last = tape.add(x_last, o);
            let h2 = tape.layer_norm_rows(x_last, ln2_g, ln2_b);
            let f0 = tape.matmul(h2, ff_w1);
            let f1 = tape.add_row_broadcast(f0, ff_b1);
            let f2 = tape.gelu(f1);
            let f3 = tape.matmul(f2, ff_w2);
            let f = tape.add_row_broadcast(f3, ff_b2);
            tape.add(x_last, f)
        };
        let n = self.ids.len();
        let (fin_g, fin_b, ro_w, ro_b) =
            (self.ids[n - 5], self.ids[n - 4], self.ids[n - 3], self.ids[n - 2]);
        last = tape.layer_norm_rows(last, fin_g, fin_b);
        let r0 = tape.matmul(last, ro_w);
        Ok(tape.add_row_broadcast(r0, ro_b))
    }
}

/// Additive attention mask: query `q` may attend to key `k` when `k <= q`
/// and key `k` is not padding. A fully masked row softmaxes to uniform, so an
/// all-padding history still yields a finite guidance through the learned
/// padding embedding.
fn attention_mask(history: &[u32], pad: u32, l: usize) -> Tensor {
    const NEG: f64 = -1e30;
    let mut m = Tensor::zeros(l, l);
    for q in 0..l {
        for k in 0..l {
            if k > q || history[k] == pad {
                *m.at_mut(q, k) = NEG;
            }
        }
    }
    m
}

/// MLP denoiser: sinusoidal timestep features with a learned projection,
/// concatenated with `(x_t, g)` and pushed through GELU layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub dims: ModelDims,
    time_w: Tensor,
    time_b: Tensor,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl DenoiserParams {
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let input = 2 * dims.d + dims.d_t;
        let mut sizes = Vec::new();
        let mut prev = input;
        for _ in 0..dims.den_layers - 1 {
            sizes.push((prev, dims.den_hidden));
            prev = dims.den_hidden;
        }
        sizes.push((prev, dims.d));
        let weights = sizes.iter().map(|&(r, c)| fan_in(rng, r, c)).collect();
        let biases = sizes.iter().map(|&(_, c)| Tensor::zeros(1, c)).collect();
        Ok(DenoiserParams {
            dims,
            time_w: fan_in(rng, dims.d_t, dims.d_t),
            time_b: Tensor::zeros(1, dims.d_t),
            weights,
            biases,
        })
    }

    /// All-zero tensors with the right shapes (checkpoint loading target).
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let input = 2 * dims.d + dims.d_t;
        let mut sizes = Vec::new();
        let mut prev = input;
        for _ in 0..dims.den_layers - 1 {
            sizes.push((prev, dims.den_hidden));
            prev = dims.den_hidden;
        }
        sizes.push((prev, dims.d));
        Ok(DenoiserParams {
            dims,
            time_w: Tensor::zeros(dims.d_t, dims.d_t),
            time_b: Tensor::zeros(1, dims.d_t),
            weights: sizes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            biases: sizes.iter().map(|&(_, c)| Tensor::zeros(1, c)).collect(),
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("time_w".to_string(), &self.time_w),
            ("time_b".to_string(), &self.time_b),
        ];
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("mlp{i}.w"), w));
            out.push((format!("mlp{i}.b"), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.time_w, &mut self.time_b];
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Zeroes the final linear layer (maps everything to the zero vector).
    pub fn zero_final_layer(&mut self) {
        let w = self.weights.last_mut().unwrap();
        w.data.fill(0.0);
        let b = self.biases.last_mut().unwrap();
        b.data.fill(0.0);
    }

    pub fn stage(&self, tape: &mut Tape) -> DenoiserNodes {
        let ids = self
            .tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        DenoiserNodes {
            dims: self.dims,
            ids,
        }
    }

    /// Single evaluation through a scratch tape; inputs must be finite.
    pub fn denoise(&self, x_t: &[f64], g: &[f64], t: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let nodes = self.stage(&mut tape);
        let xt = tape.leaf_row(x_t.to_vec());
        let gn = tape.leaf_row(g.to_vec());
        let out = nodes.denoise(&mut tape, xt, gn, t)?;
        Ok(tape.value(out).data.clone())
    }
}

pub struct DenoiserNodes {
    dims: ModelDims,
    ids: Vec<NodeId>,
}

impl DenoiserNodes {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Builds `f(x_t, g, t)` on the tape.
    pub fn denoise(&self, tape: &mut Tape, x_t: NodeId, g: NodeId, t: usize) -> Result<NodeId> {
        for (name, id) in [("x_t", x_t), ("g", g)] {
            let v = tape.value(id);
            if v.cols != self.dims.d || v.rows != 1 {
                return Err(Error::Shape(format!(
                    "{name} must be a (1, {}) vector, got ({}, {})",
                    self.dims.d, v.rows, v.cols
                )));
            }
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite {name} input at t={t}")));
            }
        }
        let sin = tape.leaf(Tensor::row_vec(sinusoidal_embedding(
            t as f64,
            self.dims.d_t,
            self.dims.time_base,
        )));
        let te0 = tape.matmul(sin, self.ids[0]);
        let te = tape.add_row_broadcast(te0, self.ids[1]);
        let mut h = tape.concat_cols(&[x_t, g, te]);
        let n_layers = (self.ids.len() - 2) / 2;
        for i in 0..n_layers {
            let w = self.ids[2 + 2 * i];
            let b = self.ids[3 + 2 * i];
            let z0 = tape.matmul(h, w);
            let z = tape.add_row_broadcast(z0, b);
            h = if i + 1 < n_layers { tape.gelu(z) } else { z };
        }
        Ok(h)
    }
}

/// Standard interleaved sin/cos positional features of a (possibly
/// fractional) timestep; `base` sets the lowest frequency `1/base`.
pub fn sinusoidal_embedding(t: f64, dim: usize, base: f64) -> Vec<f64> {
    assert!(dim % 2 == 0, "sinusoidal dimension must be even");
    let mut out = Vec::with_capacity(dim);
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(2.0 * i as f64 / dim as f64) * base.ln()).exp();
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    out
}

/// Anything that can play the denoiser role during generation and probing;
/// lets tests trace constant/linear/identity denoisers through the exact
/// generation code paths.
pub trait Denoiser {
    fn dim(&self) -> usize;
    fn denoise(&mut self, x_t: &[f64], g: &[f64], t: usize) -> Result<Vec<f64>>;
}

/// Persistent-tape denoiser runtime: parameters staged once, nodes truncated
/// between calls.
pub struct DenoiserRt {
    tape: Tape,
    nodes: DenoiserNodes,
    base: usize,
}

impl DenoiserRt {
    pub fn new(params: &DenoiserParams) -> Self {
        let mut tape = Tape::new();
        let nodes = params.stage(&mut tape);
        let base = tape.len();
        DenoiserRt { tape, nodes, base }
    }
}

impl Denoiser for DenoiserRt {
    fn dim(&self) -> usize {
        self.nodes.dims.d
    }

    fn denoise(&mut self, x_t: &[f64], g: &[f64], t: usize) -> Result<Vec<f64>> {
        self.tape.truncate(self.base);
        let xt = self.tape.leaf_row(x_t.to_vec());
        let gn = self.tape.leaf_row(g.to_vec());
        let out = self.nodes.denoise(&mut self.tape, xt, gn, t)?;
        Ok(self.tape.value(out).data.clone())
    }
}

/// Classifier-free combination `(1 + w) f(x_t, g, t) - w f(x_t, dummy, t)`;
/// `w = 0` short-circuits to the conditional branch bit-for-bit.
pub struct GuidedDenoiser {
    rt: DenoiserRt,
    unconditional: Vec<f64>,
    w: f64,
}

impl GuidedDenoiser {
    pub fn new(enc: &GuidanceEncoderParams, den: &DenoiserParams, w: f64) -> Self {
        GuidedDenoiser {
            rt: DenoiserRt::new(den),
            unconditional: enc.dummy_guidance(),
            w,
        }
    }
}

impl Denoiser for GuidedDenoiser {
    fn dim(&self) -> usize {
        self.rt.dim()
    }

    fn denoise(&mut self, x_t: &[f64], g: &[f64], t: usize) -> Result<Vec<f64>> {
        let cond = self.rt.denoise(x_t, g, t)?;
        if self.w == 0.0 {
            return Ok(cond);
        }
        let uncond = self.rt.denoise(x_t, &self.unconditional, t)?;
        Ok(cond
            .iter()
            .zip(&uncond)
            .map(|(c, u)| (1.0 + self.w) * c - self.w * u)
            .collect())
    }
}

/// One-shot classifier-free denoise; `w >= 0`, `w = 0` equals `denoise`.
pub fn guided_denoise(
    x_t: &[f64],
    g: &[f64],
    t: usize,
    enc: &GuidanceEncoderParams,
    den: &DenoiserParams,
    w: f64,
) -> Result<Vec<f64>> {
    let mut gd = GuidedDenoiser::new(enc, den, w);
    gd.denoise(x_t, g, t)
}

/// Wraps a denoiser and counts invocations (timing-harness instrumentation).
pub struct CountingDenoiser<D> {
    pub inner: D,
    pub calls: u64,
}

impl<D> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        CountingDenoiser { inner, calls: 0 }
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn denoise(&mut self, x_t: &[f64], g: &[f64], t: usize) -> Result<Vec<f64>> {
        self.calls += 1;
        self.inner.denoise(x_t, g, t)
    }
}

/// Denoiser from a plain function, for toy traces in tests and probes.
pub struct FnDenoiser<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: FnMut(&[f64], &[f64], usize) -> Vec<f64>> Denoiser for FnDenoiser<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&mut self, x_t: &[f64], g: &[f64], t: usize) -> Result<Vec<f64>> {
        Ok((self.f)(x_t, g, t))
    }
}

/// Persistent-tape evaluation-mode encoder runtime.
pub struct EncoderRt<'p> {
    params: &'p GuidanceEncoderParams,
    tape: Tape,
    nodes: EncoderNodes,
    base: usize,
}

impl<'p> EncoderRt<'p> {
    pub fn new(params: &'p GuidanceEncoderParams) -> Self {
        let mut tape = Tape::new();
        let nodes = params.stage(&mut tape);
        let base = tape.len();
        EncoderRt {
            params,
            tape,
            nodes,
            base,
        }
    }

    pub fn encode(&mut self, history: &[u32]) -> Result<Vec<f64>> {
        self.tape.truncate(self.base);
        let g = self
            .nodes
            .encode(&mut self.tape, self.params, history, false)?;
        Ok(self.tape.value(g).data.clone())
    }
}

/// Exact reverse-mode gradients of a scalar loss node. The op set is closed:
/// anything expressible on the tape is differentiable, anything else cannot
/// be constructed in the first place.
pub fn gradients(tape: &Tape, loss: NodeId) -> Result<crate::tape::Gradients> {
    tape.backward(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::component_rng;

    pub(crate) fn tiny_dims() -> ModelDims {
        ModelDims {
            v: 6,
            d: 4,
            l: 3,
            n_layers: 1,
            n_heads: 2,
            h_ff: 8,
            den_layers: 3,
            den_hidden: 8,
            d_t: 4,
            time_base: 10_000.0,
        }
    }

    #[test]
    fn encode_is_deterministic_with_rho_zero() {
        let mut rng = component_rng(1, "init");
        let enc = GuidanceEncoderParams::init(tiny_dims(), &mut rng).unwrap();
        let hist = vec![0u32, 1, 2];
        let mut r1 = component_rng(2, "drop");
        let mut r2 = component_rng(3, "drop");
        let a = enc.encode_guidance(&hist, 0.0, true, &mut r1).unwrap();
        let b = enc.encode_guidance(&hist, 0.0, true, &mut r2).unwrap();
        let c = enc.encode_eval(&hist).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn rho_one_forces_unconditional_token() {
        let mut rng = component_rng(1, "init");
        let enc = GuidanceEncoderParams::init(tiny_dims(), &mut rng).unwrap();
        let hist = vec![0u32, 1, 2];
        let mut r = component_rng(9, "drop");
        let g = enc.encode_guidance(&hist, 1.0, true, &mut r).unwrap();
        assert_eq!(g, enc.dummy_guidance());
        // eval mode ignores rho
        let mut r = component_rng(9, "drop");
        let g = enc.encode_guidance(&hist, 1.0, false, &mut r).unwrap();
        assert_eq!(g, enc.encode_eval(&hist).unwrap());
    }

    #[test]
    fn all_pad_history_is_finite() {
        let mut rng = component_rng(1, "init");
        let enc = GuidanceEncoderParams::init(tiny_dims(), &mut rng).unwrap();
        let pad = tiny_dims().v as u32;
        let g = enc.encode_eval(&vec![pad; 3]).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_range_history_index_is_error() {
        let mut rng = component_rng(1, "init");
        let enc = GuidanceEncoderParams::init(tiny_dims(), &mut rng).unwrap();
        let res = enc.encode_eval(&[0, 1, 99]);
        assert!(matches!(res, Err(Error::Index { index: 99, .. })));
    }

    #[test]
    fn swapping_two_history_items_changes_guidance() {
        let mut rng = component_rng(4, "init");
        let enc = GuidanceEncoderParams::init(tiny_dims(), &mut rng).unwrap();
        let a = enc.encode_eval(&[0, 1, 2]).unwrap();
        let b = enc.encode_eval(&[1, 0, 2]).unwrap();
        assert_ne!(a, b, "positional encoding must break permutation symmetry");
    }

    #[test]
    fn denoise_deterministic_across_calls() {
        let mut rng = component_rng(5, "init");
        let den = DenoiserParams::init(tiny_dims(), &mut rng).unwrap();
        let x = vec![0.1, -0.2, 0.3, 0.4];
        let g = vec![1.0, 0.0, -1.0, 0.5];
        let first = den.denoise(&x, &g, 7).unwrap();
        let mut rt = DenoiserRt::new(&den);
        for _ in 0..100 {
            assert_eq!(rt.denoise(&x, &g, 7).unwrap(), first);
        }
    }

    #[test]
    fn adjacent_timestep_embeddings_differ() {
        for t in [0usize, 1, 5, 100, 499] {
            let a = sinusoidal_embedding(t as f64, 8, 10_000.0);
            let b = sinusoidal_embedding((t + 1) as f64, 8, 10_000.0);
            assert_ne!(a, b, "t={t}");
        }
    }

    #[test]
    fn zero_final_layer_maps_to_zero() {
        let mut rng = component_rng(6, "init");
        let mut den = DenoiserParams::init(tiny_dims(), &mut rng).unwrap();
        den.zero_final_layer();
        let out = den.denoise(&[1.0, 2.0, 3.0, 4.0], &[0.5; 4], 3).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let mut rng = component_rng(6, "init");
        let den = DenoiserParams::init(tiny_dims(), &mut rng).unwrap();
        let res = den.denoise(&[f64::NAN, 0.0, 0.0, 0.0], &[0.0; 4], 1);
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    #[test]
    fn guided_w0_is_bitwise_conditional() {
        let mut rng = component_rng(7, "init");
        let enc = GuidanceEncoderParams::init(tiny_dims(), &mut rng).unwrap();
        let den = DenoiserParams::init(tiny_dims(), &mut rng).unwrap();
        let x = vec![0.1, 0.2, -0.3, 0.4];
        let g = enc.encode_eval(&[0, 1, 2]).unwrap();
        let a = guided_denoise(&x, &g, 3, &enc, &den, 0.0).unwrap();
        let b = den.denoise(&x, &g, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guided_w1_is_two_cond_minus_uncond() {
        let mut rng = component_rng(7, "init");
        let enc = GuidanceEncoderParams::init(tiny_dims(), &mut rng).unwrap();
        let den = DenoiserParams::init(tiny_dims(), &mut rng).unwrap();
        let x = vec![0.1, 0.2, -0.3, 0.4];
        let g = enc.encode_eval(&[0, 1, 2]).unwrap();
        let got = guided_denoise(&x, &g, 3, &enc, &den, 1.0).unwrap();
        let cond = den.denoise(&x, &g, 3).unwrap();
        let unc = den.denoise(&x, &enc.dummy_guidance(), 3).unwrap();
        for i in 0..4 {
            assert!((got[i] - (2.0 * cond[i] - unc[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn guided_cancels_when_g_equals_dummy() {
        let mut rng = component_rng(8, "init");
        let enc = GuidanceEncoderParams::init(tiny_dims(), &mut rng).unwrap();
        let den = DenoiserParams::init(tiny_dims(), &mut rng).unwrap();
        let x = vec![0.3, -0.1, 0.0, 0.9];
        let gphi = enc.dummy_guidance();
        let cond = den.denoise(&x, &gphi, 2).unwrap();
        for w in [0.0, 0.5, 1.0, 3.0] {
            let got = guided_denoise(&x, &gphi, 2, &enc, &den, w).unwrap();
            for i in 0..4 {
                assert!(
                    (got[i] - cond[i]).abs() < 1e-9,
                    "w={w}: algebraic cancellation failed"
                );
            }
        }
    }

    #[test]
    fn no_parameter_aliasing_between_encoder_and_denoiser() {
        let mut rng = component_rng(9, "init");
        let enc = GuidanceEncoderParams::init(tiny_dims(), &mut rng).unwrap();
        let mut den = DenoiserParams::init(tiny_dims(), &mut rng).unwrap();
        let hist = vec![0u32, 1, 2];
        let before = enc.encode_eval(&hist).unwrap();
        for t in den.tensors_mut() {
            for v in &mut t.data {
                *v += 1.0;
            }
        }
        assert_eq!(enc.encode_eval(&hist).unwrap(), before);
    }

    #[test]
    fn staged_tensor_count_matches_names() {
        let mut rng = component_rng(10, "init");
        let enc = GuidanceEncoderParams::init(tiny_dims(), &mut rng).unwrap();
        let den = DenoiserParams::init(tiny_dims(), &mut rng).unwrap();
        assert_eq!(enc.tensors().len(), enc.clone().tensors_mut().len());
        assert_eq!(den.tensors().len(), den.clone().tensors_mut().len());
        let mut tape = Tape::new();
        assert_eq!(enc.stage(&mut tape).ids().len(), enc.tensors().len());
    }
}
