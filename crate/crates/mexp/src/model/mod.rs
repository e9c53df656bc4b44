//! From-scratch encoder-decoder transformer: pre-norm residual blocks, ReLU
//! feed-forward, learned positional embeddings, a token embedding table
//! shared between encoder and decoder and tied to the output projection.
//!
//! Training runs in f32; gradient checks and KL computations use the same
//! code instantiated at f64.

mod backward;
mod checkpoint;
mod decode;
mod forward;

pub use backward::{loss_and_grads, loss_from_logits, split_target};
pub use checkpoint::{
    load_checkpoint, parse_checkpoint, save_checkpoint, serialize_checkpoint, Checkpoint,
    CheckpointHeader, CHECKPOINT_MAGIC,
};
pub use decode::greedy_decode;
pub use forward::{
    all_slots, pad_batch, run_forward, ActivationTrace, AttnKind, ForwardPass, HeadOverride,
    Overrides, PaddedBatch, Side, SlotId,
};

use crate::rng::CounterRng;
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Float precision the model is instantiated at.
pub trait Real: ndarray::NdFloat {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Paper-scale architecture: 4+4 layers, d_model 256, 8 heads.
    pub fn paper(vocab_size: usize, max_src_len: usize, max_tgt_len: usize, seed: u64) -> Self {
        ModelConfig {
            n_layers_enc: 4,
            n_layers_dec: 4,
            d_model: 256,
            n_heads: 8,
            d_ff: 1024,
            vocab_size,
            max_src_len,
            max_tgt_len,
            seed,
        }
    }

    /// Desk-scale architecture: 2+2 layers, d_model 64, 4 heads.
    pub fn desk(vocab_size: usize, max_src_len: usize, max_tgt_len: usize, seed: u64) -> Self {
        ModelConfig {
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_src_len,
            max_tgt_len,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers_enc,
            self.n_layers_dec,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.vocab_size,
            self.max_src_len,
            self.max_tgt_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dims must all be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<F> {
    /// (1, d)
    pub gain: Array2<F>,
    /// (1, d)
    pub bias: Array2<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<F> {
    /// All (d_model, d_model); heads are column blocks of width head_dim.
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<F> {
    /// (d_model, d_ff)
    pub w1: Array2<F>,
    /// (1, d_ff)
    pub b1: Array2<F>,
    /// (d_ff, d_model)
    pub w2: Array2<F>,
    /// (1, d_model)
    pub b2: Array2<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncLayer<F> {
    pub ln1: LayerNorm<F>,
    pub attn: Attention<F>,
    pub ln2: LayerNorm<F>,
    pub ff: FeedForward<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecLayer<F> {
    pub ln1: LayerNorm<F>,
    pub self_attn: Attention<F>,
    pub ln2: LayerNorm<F>,
    pub cross_attn: Attention<F>,
    pub ln3: LayerNorm<F>,
    pub ff: FeedForward<F>,
}

/// All trainable parameters. The token embedding table doubles as the
/// (transposed) output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    /// (vocab_size, d_model), shared encoder/decoder, tied to output.
    pub tok_emb: Array2<F>,
    /// (max_src_len, d_model)
    pub pos_src: Array2<F>,
    /// (max_tgt_len, d_model)
    pub pos_tgt: Array2<F>,
    pub enc: Vec<EncLayer<F>>,
    pub dec: Vec<DecLayer<F>>,
    /// Final encoder layer norm (pre-norm stack output).
    pub ln_enc_out: LayerNorm<F>,
    /// Final decoder layer norm, applied before the tied output projection.
    pub ln_dec_out: LayerNorm<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: Params<F>,
}

fn ln_zeros<F: Real>(d: usize) -> LayerNorm<F> {
    LayerNorm {
        gain: Array2::zeros((1, d)),
        bias: Array2::zeros((1, d)),
    }
}

fn attn_zeros<F: Real>(d: usize) -> Attention<F> {
    Attention {
        wq: Array2::zeros((d, d)),
        wk: Array2::zeros((d, d)),
        wv: Array2::zeros((d, d)),
        wo: Array2::zeros((d, d)),
    }
}

fn ff_zeros<F: Real>(d: usize, d_ff: usize) -> FeedForward<F> {
    FeedForward {
        w1: Array2::zeros((d, d_ff)),
        b1: Array2::zeros((1, d_ff)),
        w2: Array2::zeros((d_ff, d)),
        b2: Array2::zeros((1, d)),
    }
}

impl<F: Real> Params<F> {
    /// All-zero parameters with shapes from the config. Also the shape of a
    /// gradient or Adam moment buffer.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Params {
            tok_emb: Array2::zeros((config.vocab_size, d)),
            pos_src: Array2::zeros((config.max_src_len, d)),
            pos_tgt: Array2::zeros((config.max_tgt_len, d)),
            enc: (0..config.n_layers_enc)
                .map(|_| EncLayer {
                    ln1: ln_zeros(d),
                    attn: attn_zeros(d),
                    ln2: ln_zeros(d),
                    ff: ff_zeros(d, config.d_ff),
                })
                .collect(),
            dec: (0..config.n_layers_dec)
                .map(|_| DecLayer {
                    ln1: ln_zeros(d),
                    self_attn: attn_zeros(d),
                    ln2: ln_zeros(d),
                    cross_attn: attn_zeros(d),
                    ln3: ln_zeros(d),
                    ff: ff_zeros(d, config.d_ff),
                })
                .collect(),
            ln_enc_out: ln_zeros(d),
            ln_dec_out: ln_zeros(d),
        }
    }

    /// Parameter tensors in the fixed serialization order. Checkpoints,
    /// Adam state, and gradient checks all rely on this order.
    pub fn tensors(&self) -> Vec<(String, &Array2<F>)> {
        let mut out: Vec<(String, &Array2<F>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_src".into(), &self.pos_src),
            ("pos_tgt".into(), &self.pos_tgt),
        ];
        fn push_ln<'a, F>(name: String, ln: &'a LayerNorm<F>, out: &mut Vec<(String, &'a Array2<F>)>) {
            out.push((format!("{name}.gain"), &ln.gain));
            out.push((format!("{name}.bias"), &ln.bias));
        }
        fn push_attn<'a, F>(name: String, a: &'a Attention<F>, out: &mut Vec<(String, &'a Array2<F>)>) {
            out.push((format!("{name}.wq"), &a.wq));
            out.push((format!("{name}.wk"), &a.wk));
            out.push((format!("{name}.wv"), &a.wv));
            out.push((format!("{name}.wo"), &a.wo));
        }
        fn push_ff<'a, F>(name: String, f: &'a FeedForward<F>, out: &mut Vec<(String, &'a Array2<F>)>) {
            out.push((format!("{name}.w1"), &f.w1));
            out.push((format!("{name}.b1"), &f.b1));
            out.push((format!("{name}.w2"), &f.w2));
            out.push((format!("{name}.b2"), &f.b2));
        }
        for (i, l) in self.enc.iter().enumerate() {
            push_ln(format!("enc{i}.ln1"), &l.ln1, &mut out);
            push_attn(format!("enc{i}.attn"), &l.attn, &mut out);
            push_ln(format!("enc{i}.ln2"), &l.ln2, &mut out);
            push_ff(format!("enc{i}.ff"), &l.ff, &mut out);
        }
        for (i, l) in self.dec.iter().enumerate() {
            push_ln(format!("dec{i}.ln1"), &l.ln1, &mut out);
            push_attn(format!("dec{i}.self_attn"), &l.self_attn, &mut out);
            push_ln(format!("dec{i}.ln2"), &l.ln2, &mut out);
            push_attn(format!("dec{i}.cross_attn"), &l.cross_attn, &mut out);
            push_ln(format!("dec{i}.ln3"), &l.ln3, &mut out);
            push_ff(format!("dec{i}.ff"), &l.ff, &mut out);
        }
        push_ln("ln_enc_out".into(), &self.ln_enc_out, &mut out);
        push_ln("ln_dec_out".into(), &self.ln_dec_out, &mut out);
        out
    }

    /// Mutable variant of `tensors`, same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<F>> {
        let mut out: Vec<&mut Array2<F>> =
            vec![&mut self.tok_emb, &mut self.pos_src, &mut self.pos_tgt];
        for l in self.enc.iter_mut() {
            out.push(&mut l.ln1.gain);
            out.push(&mut l.ln1.bias);
            out.push(&mut l.attn.wq);
            out.push(&mut l.attn.wk);
            out.push(&mut l.attn.wv);
            out.push(&mut l.attn.wo);
            out.push(&mut l.ln2.gain);
            out.push(&mut l.ln2.bias);
            out.push(&mut l.ff.w1);
            out.push(&mut l.ff.b1);
            out.push(&mut l.ff.w2);
            out.push(&mut l.ff.b2);
        }
        for l in self.dec.iter_mut() {
            out.push(&mut l.ln1.gain);
            out.push(&mut l.ln1.bias);
            out.push(&mut l.self_attn.wq);
            out.push(&mut l.self_attn.wk);
            out.push(&mut l.self_attn.wv);
            out.push(&mut l.self_attn.wo);
            out.push(&mut l.ln2.gain);
            out.push(&mut l.ln2.bias);
            out.push(&mut l.cross_attn.wq);
            out.push(&mut l.cross_attn.wk);
            out.push(&mut l.cross_attn.wv);
            out.push(&mut l.cross_attn.wo);
            out.push(&mut l.ln3.gain);
            out.push(&mut l.ln3.bias);
            out.push(&mut l.ff.w1);
            out.push(&mut l.ff.b1);
            out.push(&mut l.ff.w2);
            out.push(&mut l.ff.b2);
        }
        out.push(&mut self.ln_enc_out.gain);
        out.push(&mut self.ln_enc_out.bias);
        out.push(&mut self.ln_dec_out.gain);
        out.push(&mut self.ln_dec_out.bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|&x| x.to_f64().is_finite()))
    }

    /// Convert between precisions.
    pub fn cast<G: Real>(&self) -> Params<G> {
        let conv = |a: &Array2<F>| a.mapv(|x| G::from_f64(x.to_f64()));
        let conv_ln = |l: &LayerNorm<F>| LayerNorm { gain: conv(&l.gain), bias: conv(&l.bias) };
        let conv_attn = |a: &Attention<F>| Attention {
            wq: conv(&a.wq),
            wk: conv(&a.wk),
            wv: conv(&a.wv),
            wo: conv(&a.wo),
        };
        let conv_ff = |f: &FeedForward<F>| FeedForward {
            w1: conv(&f.w1),
            b1: conv(&f.b1),
            w2: conv(&f.w2),
            b2: conv(&f.b2),
        };
        Params {
            tok_emb: conv(&self.tok_emb),
            pos_src: conv(&self.pos_src),
            pos_tgt: conv(&self.pos_tgt),
            enc: self
                .enc
                .iter()
                .map(|l| EncLayer {
                    ln1: conv_ln(&l.ln1),
                    attn: conv_attn(&l.attn),
                    ln2: conv_ln(&l.ln2),
                    ff: conv_ff(&l.ff),
                })
                .collect(),
            dec: self
                .dec
                .iter()
                .map(|l| DecLayer {
                    ln1: conv_ln(&l.ln1),
                    self_attn: conv_attn(&l.self_attn),
                    ln2: conv_ln(&l.ln2),
                    cross_attn: conv_attn(&l.cross_attn),
                    ln3: conv_ln(&l.ln3),
                    ff: conv_ff(&l.ff),
                })
                .collect(),
            ln_enc_out: conv_ln(&self.ln_enc_out),
            ln_dec_out: conv_ln(&self.ln_dec_out),
        }
    }
}

/// Deterministic initialization from config.seed: scaled-normal weights
/// (std = d_model^-1/2 for embedding tables, fan-in^-1/2 for projections),
/// layer-norm gains 1 and offsets 0, zero biases.
pub fn init_model<F: Real>(config: &ModelConfig) -> Result<Model<F>> {
    config.validate()?;
    let mut rng = CounterRng::from_stream(config.seed, &[0x1217]);
    let mut params = Params::<F>::zeros(config);
    let plan = params_init_plan(config);
    for (t, kind) in params.tensors_mut().into_iter().zip(plan) {
        match kind {
            InitKind::Normal(std) => {
                for x in t.iter_mut() {
                    *x = F::from_f64(rng.normal() * std);
                }
            }
            InitKind::Ones => t.fill(F::from_f64(1.0)),
            InitKind::Zeros => {}
        }
    }
    Ok(Model { config: config.clone(), params })
}

enum InitKind {
    Normal(f64),
    Ones,
    Zeros,
}

#[derive(Clone, Copy)]
enum TensorKind {
    Embedding,
    Projection { fan_in: usize },
    Gain,
    Bias,
}

fn tensor_kinds(config: &ModelConfig) -> Vec<TensorKind> {
    use TensorKind::*;
    let d = config.d_model;
    let mut out = vec![Embedding, Embedding, Embedding];
    let attn = [Projection { fan_in: d }; 4];
    let ff = [
        Projection { fan_in: d },
        Bias,
        Projection { fan_in: config.d_ff },
        Bias,
    ];
    for _ in 0..config.n_layers_enc {
        out.extend([Gain, Bias]);
        out.extend(attn);
        out.extend([Gain, Bias]);
        out.extend(ff);
    }
    for _ in 0..config.n_layers_dec {
        out.extend([Gain, Bias]);
        out.extend(attn);
        out.extend([Gain, Bias]);
        out.extend(attn);
        out.extend([Gain, Bias]);
        out.extend(ff);
    }
    out.extend([Gain, Bias, Gain, Bias]);
    out
}

fn params_init_plan(config: &ModelConfig) -> Vec<InitKind> {
    tensor_kinds(config)
        .into_iter()
        .map(|k| match k {
            TensorKind::Embedding => InitKind::Normal(1.0 / (config.d_model as f64).sqrt()),
            TensorKind::Projection { fan_in } => InitKind::Normal(1.0 / (fan_in as f64).sqrt()),
            TensorKind::Gain => InitKind::Ones,
            TensorKind::Bias => InitKind::Zeros,
        })
        .collect()
}

/// Adam optimizer state: bias-corrected first/second moments per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub m: Params<F>,
    pub v: Params<F>,
    pub step: u64,
    pub hyper: AdamHyper,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl<F: Real> AdamState<F> {
    pub fn new(config: &ModelConfig, hyper: AdamHyper) -> Self {
        AdamState {
            m: Params::zeros(config),
            v: Params::zeros(config),
            step: 0,
            hyper,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<F: Real>(model: &mut Model<F>, grads: &Params<F>, opt: &mut AdamState<F>) -> Result<()> {
    opt.step += 1;
    let t = opt.step as i32;
    let h = opt.hyper;
    let b1 = F::from_f64(h.beta1);
    let b2 = F::from_f64(h.beta2);
    let one = F::from_f64(1.0);
    let lr = F::from_f64(h.lr);
    let eps = F::from_f64(h.eps);
    let bc1 = F::from_f64(1.0 - h.beta1.powi(t));
    let bc2 = F::from_f64(1.0 - h.beta2.powi(t));
    let params = model.params.tensors_mut();
    let gs: Vec<&Array2<F>> = grads.tensors().into_iter().map(|(_, t)| t).collect();
    let ms = opt.m.tensors_mut();
    let vs = opt.v.tensors_mut();
    if params.len() != gs.len() {
        return Err(Error::Shape("adam_step: gradient/parameter count mismatch".into()));
    }
    for (((p, g), m), v) in params.into_iter().zip(gs).zip(ms).zip(vs) {
        if p.dim() != g.dim() {
            return Err(Error::Shape(format!(
                "adam_step: parameter {:?} vs gradient {:?}",
                p.dim(),
                g.dim()
            )));
        }
        ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
        ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
        ndarray::Zip::from(&mut *p)
            .and(&*m)
            .and(&*v)
            .for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
    }
    Ok(())
}
