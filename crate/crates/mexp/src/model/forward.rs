//! Forward pass with activation capture and per-head override hooks.
//!
//! Activations are (batch * seq_len, d_model) matrices, row r = b * len + t.
//! The patch point for interpretability is each head's value-weighted output
//! (attention-probabilities times values), taken before the output
//! projection.

use super::{Attention, FeedForward, LayerNorm, Model, Real};
use crate::codec::TokenId;
use crate::{Error, Result};
use ndarray::{s, Array1, Array2};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Side {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum AttnKind {
    SelfAttn,
    Cross,
}

/// Addressable attention-head slot: (side, layer, kind, head).
pub type SlotId = (Side, usize, AttnKind, usize);

/// Replacement for one head's value-weighted output.
#[derive(Clone, Debug)]
pub enum HeadOverride<F> {
    /// Exact replacement, shape (batch * q_len, head_dim). Must match the
    /// current batch geometry.
    Full(Array2<F>),
    /// Per-position vectors (n_pos, head_dim) broadcast across the batch;
    /// query positions beyond n_pos reuse the last row.
    PerPosition(Array2<F>),
    Zero,
}

/// Set of head overrides applied during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Overrides<F> {
    pub map: BTreeMap<SlotId, HeadOverride<F>>,
}

impl<F> Overrides<F> {
    pub fn new() -> Self {
        Overrides { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, slot: SlotId, ov: HeadOverride<F>) {
        self.map.insert(slot, ov);
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Per-head value-weighted outputs actually used in the pass (post-override),
/// plus the final decoder logits.
#[derive(Clone, Debug)]
pub struct ActivationTrace<F> {
    /// slot -> (batch * q_len, head_dim)
    pub heads: BTreeMap<SlotId, Array2<F>>,
    /// (batch * tgt_len, vocab)
    pub logits: Array2<F>,
}

/// Right-padded id batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    /// Row-major (batch, len).
    pub ids: Vec<TokenId>,
    pub batch: usize,
    pub len: usize,
    /// True (unpadded) length per example.
    pub lens: Vec<usize>,
}

impl PaddedBatch {
    pub fn id(&self, b: usize, t: usize) -> TokenId {
        self.ids[b * self.len + t]
    }
}

/// Pad sequences to a common width (the max length, or `width` if given).
pub fn pad_batch(seqs: &[Vec<TokenId>], pad: TokenId, width: Option<usize>) -> Result<PaddedBatch> {
    if seqs.is_empty() {
        return Err(Error::Shape("pad_batch: empty batch".into()));
    }
    let max = seqs.iter().map(|s| s.len()).max().unwrap();
    if max == 0 {
        return Err(Error::Shape("pad_batch: empty sequence".into()));
    }
    let len = width.unwrap_or(max);
    if len < max {
        return Err(Error::Shape(format!("pad_batch: width {len} < longest sequence {max}")));
    }
    let mut ids = Vec::with_capacity(seqs.len() * len);
    let mut lens = Vec::with_capacity(seqs.len());
    for s in seqs {
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(pad, len - s.len()));
        lens.push(s.len());
    }
    Ok(PaddedBatch { ids, batch: seqs.len(), len, lens })
}

pub(super) struct LnCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

fn layernorm_forward<F: Real>(x: &Array2<F>, ln: &LayerNorm<F>) -> (Array2<F>, LnCache<F>) {
    let (rows, d) = x.dim();
    let eps = F::from_f64(1e-5);
    let dn = F::from_f64(d as f64);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(rows);
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / dn;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b) / dn;
        let s = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * s);
        *is = s;
    }
    let y = &xhat * &ln.gain + &ln.bias;
    (y, LnCache { xhat, inv_std })
}

pub(super) struct AttnCache<F> {
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Softmax matrices, index b * n_heads + h, shape (q_len, kv_len).
    pub att: Vec<Array2<F>>,
    /// (batch * q_len, d_model), post-override head outputs.
    pub ctx: Array2<F>,
}

pub(super) struct AttnFwd<F> {
    pub out: Array2<F>,
    pub cache: AttnCache<F>,
}

struct AttnGeometry<'a> {
    batch: usize,
    q_len: usize,
    kv_len: usize,
    /// True kv length per example (keys at or beyond are masked).
    kv_lens: &'a [usize],
    causal: bool,
    n_heads: usize,
}

#[allow(clippy::too_many_arguments)]
fn attn_forward<F: Real>(
    w: &Attention<F>,
    x_q: &Array2<F>,
    x_kv: &Array2<F>,
    geo: &AttnGeometry<'_>,
    slot_prefix: (Side, usize, AttnKind),
    overrides: Option<&Overrides<F>>,
    trace: Option<&mut BTreeMap<SlotId, Array2<F>>>,
) -> Result<AttnFwd<F>> {
    let d = w.wq.dim().0;
    let hd = d / geo.n_heads;
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let neg_inf = F::from_f64(f64::NEG_INFINITY);
    let q = x_q.dot(&w.wq);
    let k = x_kv.dot(&w.wk);
    let v = x_kv.dot(&w.wv);
    let mut ctx: Array2<F> = Array2::zeros((geo.batch * geo.q_len, d));
    let mut att = Vec::with_capacity(geo.batch * geo.n_heads);
    for b in 0..geo.batch {
        let qr = b * geo.q_len..(b + 1) * geo.q_len;
        let kr = b * geo.kv_len..(b + 1) * geo.kv_len;
        let klen = geo.kv_lens[b];
        for h in 0..geo.n_heads {
            let hc = h * hd..(h + 1) * hd;
            let qh = q.slice(s![qr.clone(), hc.clone()]);
            let kh = k.slice(s![kr.clone(), hc.clone()]);
            let vh = v.slice(s![kr.clone(), hc.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|x| x * scale);
            for ((i, j), x) in scores.indexed_iter_mut() {
                if j >= klen || (geo.causal && j > i) {
                    *x = neg_inf;
                }
            }
            // softmax rows with max subtraction
            for mut row in scores.rows_mut() {
                let max = row.iter().cloned().fold(neg_inf, F::max);
                let mut sum = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            let mut ctx_h = scores.dot(&vh);
            let slot: SlotId = (slot_prefix.0, slot_prefix.1, slot_prefix.2, h);
            if let Some(ov) = overrides.and_then(|o| o.map.get(&slot)) {
                match ov {
                    HeadOverride::Full(a) => {
                        if a.dim() != (geo.batch * geo.q_len, hd) {
                            return Err(Error::Shape(format!(
                                "override for {slot:?} has shape {:?}, expected ({}, {hd})",
                                a.dim(),
                                geo.batch * geo.q_len
                            )));
                        }
                        ctx_h.assign(&a.slice(s![qr.clone(), ..]));
                    }
                    HeadOverride::PerPosition(a) => {
                        let n_pos = a.dim().0;
                        if n_pos == 0 || a.dim().1 != hd {
                            return Err(Error::Shape(format!(
                                "per-position override for {slot:?} has shape {:?}",
                                a.dim()
                            )));
                        }
                        for (t, mut row) in ctx_h.rows_mut().into_iter().enumerate() {
                            row.assign(&a.row(t.min(n_pos - 1)));
                        }
                    }
                    HeadOverride::Zero => ctx_h.fill(F::zero()),
                }
            }
            ctx.slice_mut(s![qr.clone(), hc.clone()]).assign(&ctx_h);
            att.push(scores);
        }
    }
    if let Some(tr) = trace {
        for h in 0..geo.n_heads {
            let hc = h * hd..(h + 1) * hd;
            let slot: SlotId = (slot_prefix.0, slot_prefix.1, slot_prefix.2, h);
            tr.insert(slot, ctx.slice(s![.., hc]).to_owned());
        }
    }
    let out = ctx.dot(&w.wo);
    Ok(AttnFwd { out, cache: AttnCache { q, k, v, att, ctx } })
}

pub(super) struct FfCache<F> {
    /// Post-ReLU hidden activations (batch * len, d_ff).
    pub h_act: Array2<F>,
}

fn ff_forward<F: Real>(x: &Array2<F>, ff: &FeedForward<F>) -> (Array2<F>, FfCache<F>) {
    let mut h = x.dot(&ff.w1) + &ff.b1;
    h.mapv_inplace(|v| v.max(F::zero()));
    let out = h.dot(&ff.w2) + &ff.b2;
    (out, FfCache { h_act: h })
}

pub(super) struct EncLayerCache<F> {
    pub ln1: LnCache<F>,
    pub n1: Array2<F>,
    pub attn: AttnCache<F>,
    pub ln2: LnCache<F>,
    pub n2: Array2<F>,
    pub ff: FfCache<F>,
}

pub(super) struct DecLayerCache<F> {
    pub ln1: LnCache<F>,
    pub n1: Array2<F>,
    pub self_attn: AttnCache<F>,
    pub ln2: LnCache<F>,
    pub n2: Array2<F>,
    pub cross_attn: AttnCache<F>,
    pub ln3: LnCache<F>,
    pub n3: Array2<F>,
    pub ff: FfCache<F>,
}

pub(super) struct EncoderPass<F> {
    pub layers: Vec<EncLayerCache<F>>,
    pub ln_out: LnCache<F>,
    pub out: Array2<F>,
}

pub(super) struct DecoderPass<F> {
    pub layers: Vec<DecLayerCache<F>>,
    pub ln_out: LnCache<F>,
    pub out: Array2<F>,
    pub logits: Array2<F>,
}

/// Full forward state for one (src, dec_in) batch.
pub struct ForwardPass<F> {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub logits: Array2<F>,
    pub trace: Option<ActivationTrace<F>>,
}

fn embed<F: Real>(
    ids: &PaddedBatch,
    tok_emb: &Array2<F>,
    pos: &Array2<F>,
    vocab_size: usize,
) -> Result<Array2<F>> {
    let d = tok_emb.dim().1;
    if ids.len > pos.dim().0 {
        return Err(Error::Shape(format!(
            "sequence length {} exceeds positional table {}",
            ids.len,
            pos.dim().0
        )));
    }
    let mut x = Array2::zeros((ids.batch * ids.len, d));
    for b in 0..ids.batch {
        for t in 0..ids.len {
            let id = ids.id(b, t) as usize;
            if id >= vocab_size {
                return Err(Error::Shape(format!("token id {id} out of vocabulary ({vocab_size})")));
            }
            let mut row = x.row_mut(b * ids.len + t);
            row.assign(&tok_emb.row(id));
            row += &pos.row(t);
        }
    }
    Ok(x)
}

pub(super) fn encoder_forward<F: Real>(
    model: &Model<F>,
    src: &PaddedBatch,
    overrides: Option<&Overrides<F>>,
    mut trace: Option<&mut BTreeMap<SlotId, Array2<F>>>,
) -> Result<EncoderPass<F>> {
    let p = &model.params;
    let cfg = &model.config;
    let mut x = embed(src, &p.tok_emb, &p.pos_src, cfg.vocab_size)?;
    let mut layers = Vec::with_capacity(cfg.n_layers_enc);
    for (li, layer) in p.enc.iter().enumerate() {
        let (n1, ln1) = layernorm_forward(&x, &layer.ln1);
        let geo = AttnGeometry {
            batch: src.batch,
            q_len: src.len,
            kv_len: src.len,
            kv_lens: &src.lens,
            causal: false,
            n_heads: cfg.n_heads,
        };
        let attn = attn_forward(
            &layer.attn,
            &n1,
            &n1,
            &geo,
            (Side::Encoder, li, AttnKind::SelfAttn),
            overrides,
            trace.as_deref_mut(),
        )?;
        let x_mid = &x + &attn.out;
        let (n2, ln2) = layernorm_forward(&x_mid, &layer.ln2);
        let (ff_out, ff) = ff_forward(&n2, &layer.ff);
        x = &x_mid + &ff_out;
        layers.push(EncLayerCache { ln1, n1, attn: attn.cache, ln2, n2, ff });
    }
    let (out, ln_out) = layernorm_forward(&x, &p.ln_enc_out);
    Ok(EncoderPass { layers, ln_out, out })
}

pub(super) fn decoder_forward<F: Real>(
    model: &Model<F>,
    enc_out: &Array2<F>,
    src: &PaddedBatch,
    dec_in: &PaddedBatch,
    overrides: Option<&Overrides<F>>,
    mut trace: Option<&mut BTreeMap<SlotId, Array2<F>>>,
) -> Result<DecoderPass<F>> {
    let p = &model.params;
    let cfg = &model.config;
    if dec_in.batch != src.batch {
        return Err(Error::Shape("decoder/encoder batch mismatch".into()));
    }
    let mut y = embed(dec_in, &p.tok_emb, &p.pos_tgt, cfg.vocab_size)?;
    let mut layers = Vec::with_capacity(cfg.n_layers_dec);
    for (li, layer) in p.dec.iter().enumerate() {
        let (n1, ln1) = layernorm_forward(&y, &layer.ln1);
        let self_geo = AttnGeometry {
            batch: dec_in.batch,
            q_len: dec_in.len,
            kv_len: dec_in.len,
            kv_lens: &dec_in.lens,
            causal: true,
            n_heads: cfg.n_heads,
        };
        let self_attn = attn_forward(
            &layer.self_attn,
            &n1,
            &n1,
            &self_geo,
            (Side::Decoder, li, AttnKind::SelfAttn),
            overrides,
            trace.as_deref_mut(),
        )?;
        let y_mid1 = &y + &self_attn.out;
        let (n2, ln2) = layernorm_forward(&y_mid1, &layer.ln2);
        let cross_geo = AttnGeometry {
            batch: dec_in.batch,
            q_len: dec_in.len,
            kv_len: src.len,
            kv_lens: &src.lens,
            causal: false,
            n_heads: cfg.n_heads,
        };
        let cross_attn = attn_forward(
            &layer.cross_attn,
            &n2,
            enc_out,
            &cross_geo,
            (Side::Decoder, li, AttnKind::Cross),
            overrides,
            trace.as_deref_mut(),
        )?;
        let y_mid2 = &y_mid1 + &cross_attn.out;
        let (n3, ln3) = layernorm_forward(&y_mid2, &layer.ln3);
        let (ff_out, ff) = ff_forward(&n3, &layer.ff);
        y = &y_mid2 + &ff_out;
        layers.push(DecLayerCache {
            ln1,
            n1,
            self_attn: self_attn.cache,
            ln2,
            n2,
            cross_attn: cross_attn.cache,
            ln3,
            n3,
            ff,
        });
    }
    let (out, ln_out) = layernorm_forward(&y, &p.ln_dec_out);
    // tied output projection: logits = dec_out @ tok_emb^T
    let logits = out.dot(&p.tok_emb.t());
    Ok(DecoderPass { layers, ln_out, out, logits })
}

/// Run encoder + decoder on a padded batch. `dec_in` is the decoder input
/// (target prefix). Returns logits of shape (batch * dec_in.len, vocab).
pub fn run_forward<F: Real>(
    model: &Model<F>,
    src: &PaddedBatch,
    dec_in: &PaddedBatch,
    overrides: Option<&Overrides<F>>,
    capture_trace: bool,
) -> Result<ForwardPass<F>> {
    if let Some(ovs) = overrides {
        for slot in ovs.map.keys() {
            validate_slot(model, slot)?;
        }
    }
    let mut trace_map = capture_trace.then(BTreeMap::new);
    let enc = encoder_forward(model, src, overrides, trace_map.as_mut())?;
    let dec = decoder_forward(model, &enc.out, src, dec_in, overrides, trace_map.as_mut())?;
    let logits = dec.logits;
    let trace = trace_map.map(|heads| ActivationTrace { heads, logits: logits.clone() });
    Ok(ForwardPass { batch: src.batch, src_len: src.len, tgt_len: dec_in.len, logits, trace })
}

/// Every patchable slot of a model, in deterministic order.
pub fn all_slots(config: &super::ModelConfig) -> Vec<SlotId> {
    let mut out = Vec::new();
    for l in 0..config.n_layers_enc {
        for h in 0..config.n_heads {
            out.push((Side::Encoder, l, AttnKind::SelfAttn, h));
        }
    }
    for l in 0..config.n_layers_dec {
        for kind in [AttnKind::SelfAttn, AttnKind::Cross] {
            for h in 0..config.n_heads {
                out.push((Side::Decoder, l, kind, h));
            }
        }
    }
    out
}

pub(crate) fn validate_slot<F>(model: &Model<F>, slot: &SlotId) -> Result<()> {
    let (side, layer, kind, head) = *slot;
    let cfg = &model.config;
    let layers = match side {
        Side::Encoder => cfg.n_layers_enc,
        Side::Decoder => cfg.n_layers_dec,
    };
    if side == Side::Encoder && kind == AttnKind::Cross {
        return Err(Error::Shape("encoder has no cross-attention slots".into()));
    }
    if layer >= layers || head >= cfg.n_heads {
        return Err(Error::Shape(format!("override slot {slot:?} out of range")));
    }
    Ok(())
}
