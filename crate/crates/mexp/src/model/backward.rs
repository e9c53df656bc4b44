//! Reverse-mode gradients for every parameter, mirroring `forward.rs`.
//! Cross-entropy loss over non-pad target positions.

use super::forward::{
    decoder_forward, encoder_forward, AttnCache, DecoderPass, EncoderPass, FfCache, LnCache,
    PaddedBatch,
};
use super::{Attention, FeedForward, LayerNorm, Model, Params, Real};
use crate::codec::TokenId;
use crate::{Error, Result};
use ndarray::{s, Array2, Axis};

fn layernorm_backward<F: Real>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    ln: &LayerNorm<F>,
    dgain: &mut Array2<F>,
    dbias: &mut Array2<F>,
) -> Array2<F> {
    let (_, d) = dy.dim();
    let dn = F::from_f64(d as f64);
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * &ln.gain;
    let mut dx = dxhat.clone();
    for ((mut dx_row, xhat_row), (dxhat_row, &inv_std)) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(dxhat.rows().into_iter().zip(cache.inv_std.iter()))
    {
        let m1 = dxhat_row.sum() / dn;
        let m2 = dxhat_row
            .iter()
            .zip(xhat_row.iter())
            .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
            / dn;
        for (dx_v, &xhat_v) in dx_row.iter_mut().zip(xhat_row.iter()) {
            *dx_v = (*dx_v - m1 - xhat_v * m2) * inv_std;
        }
    }
    dx
}

struct FfGrads<'a, F> {
    w1: &'a mut Array2<F>,
    b1: &'a mut Array2<F>,
    w2: &'a mut Array2<F>,
    b2: &'a mut Array2<F>,
}

fn ff_backward<F: Real>(
    dy: &Array2<F>,
    x_in: &Array2<F>,
    cache: &FfCache<F>,
    ff: &FeedForward<F>,
    g: FfGrads<'_, F>,
) -> Array2<F> {
    let mut dh = dy.dot(&ff.w2.t());
    *g.w2 += &cache.h_act.t().dot(dy);
    *g.b2 += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    // ReLU gate
    ndarray::Zip::from(&mut dh).and(&cache.h_act).for_each(|d, &h| {
        if h <= F::zero() {
            *d = F::zero();
        }
    });
    let dx = dh.dot(&ff.w1.t());
    *g.w1 += &x_in.t().dot(&dh);
    *g.b1 += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
    dx
}

struct AttnGeo {
    batch: usize,
    q_len: usize,
    kv_len: usize,
    n_heads: usize,
}

/// Returns (d_x_q, d_x_kv). Caller adds them into the residual stream
/// (for self-attention both flow into the same input).
#[allow(clippy::too_many_arguments)]
fn attn_backward<F: Real>(
    d_out: &Array2<F>,
    x_q: &Array2<F>,
    x_kv: &Array2<F>,
    cache: &AttnCache<F>,
    w: &Attention<F>,
    geo: &AttnGeo,
    gw: (&mut Array2<F>, &mut Array2<F>, &mut Array2<F>, &mut Array2<F>),
) -> (Array2<F>, Array2<F>) {
    let (gwq, gwk, gwv, gwo) = gw;
    let d = w.wq.dim().0;
    let hd = d / geo.n_heads;
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let d_ctx = d_out.dot(&w.wo.t());
    *gwo += &cache.ctx.t().dot(d_out);
    let mut d_q: Array2<F> = Array2::zeros(cache.q.dim());
    let mut d_k: Array2<F> = Array2::zeros(cache.k.dim());
    let mut d_v: Array2<F> = Array2::zeros(cache.v.dim());
    for b in 0..geo.batch {
        let qr = b * geo.q_len..(b + 1) * geo.q_len;
        let kr = b * geo.kv_len..(b + 1) * geo.kv_len;
        for h in 0..geo.n_heads {
            let hc = h * hd..(h + 1) * hd;
            let att = &cache.att[b * geo.n_heads + h];
            let d_ctx_h = d_ctx.slice(s![qr.clone(), hc.clone()]);
            let vh = cache.v.slice(s![kr.clone(), hc.clone()]);
            let qh = cache.q.slice(s![qr.clone(), hc.clone()]);
            let kh = cache.k.slice(s![kr.clone(), hc.clone()]);
            let d_att = d_ctx_h.dot(&vh.t());
            {
                let mut dv_h = d_v.slice_mut(s![kr.clone(), hc.clone()]);
                dv_h += &att.t().dot(&d_ctx_h);
            }
            // softmax backward, rows independent; masked entries have
            // att = 0 and drop out automatically
            let mut ds = d_att;
            for (mut ds_row, att_row) in ds.rows_mut().into_iter().zip(att.rows()) {
                let dot = ds_row
                    .iter()
                    .zip(att_row.iter())
                    .fold(F::zero(), |acc, (&a, &b)| acc + a * b);
                for (d_v, &a_v) in ds_row.iter_mut().zip(att_row.iter()) {
                    *d_v = a_v * (*d_v - dot) * scale;
                }
            }
            {
                let mut dq_h = d_q.slice_mut(s![qr.clone(), hc.clone()]);
                dq_h += &ds.dot(&kh);
            }
            {
                let mut dk_h = d_k.slice_mut(s![kr.clone(), hc.clone()]);
                dk_h += &ds.t().dot(&qh);
            }
        }
    }
    let d_x_q = d_q.dot(&w.wq.t());
    *gwq += &x_q.t().dot(&d_q);
    let d_x_kv = d_k.dot(&w.wk.t()) + d_v.dot(&w.wv.t());
    *gwk += &x_kv.t().dot(&d_k);
    *gwv += &x_kv.t().dot(&d_v);
    (d_x_q, d_x_kv)
}

fn embed_backward<F: Real>(
    dx: &Array2<F>,
    ids: &PaddedBatch,
    d_tok_emb: &mut Array2<F>,
    d_pos: &mut Array2<F>,
) {
    for b in 0..ids.batch {
        for t in 0..ids.len {
            let r = b * ids.len + t;
            let id = ids.id(b, t) as usize;
            let src = dx.row(r);
            let mut dst = d_tok_emb.row_mut(id);
            dst += &src;
            let mut pd = d_pos.row_mut(t);
            pd += &src;
        }
    }
}

/// Token-level cross-entropy over masked positions. Returns the mean loss
/// and per-logit gradients (zero rows where the mask is false).
pub fn loss_from_logits<F: Real>(
    logits: &Array2<F>,
    labels: &[TokenId],
    mask: &[bool],
) -> Result<(f64, Array2<F>)> {
    let rows = logits.dim().0;
    if labels.len() != rows || mask.len() != rows {
        return Err(Error::Shape("loss: labels/mask length must match logit rows".into()));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::domain("loss: no supervised positions (all-pad target)"));
    }
    let inv_n = F::from_f64(1.0 / n as f64);
    let mut dlogits: Array2<F> = Array2::zeros(logits.dim());
    let mut loss = 0.0f64;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(F::from_f64(f64::NEG_INFINITY), F::max);
        let mut sum = F::zero();
        for &x in row.iter() {
            sum += (x - max).exp();
        }
        let log_z = sum.ln() + max;
        let label = labels[r] as usize;
        if label >= row.len() {
            return Err(Error::Shape(format!("label id {label} out of vocabulary")));
        }
        loss -= (row[label] - log_z).to_f64();
        let mut drow = dlogits.row_mut(r);
        for (j, d) in drow.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *d = p * inv_n;
        }
        drow[label] -= inv_n;
    }
    let mean = loss / n as f64;
    if !mean.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {mean}")));
    }
    Ok((mean, dlogits))
}

/// Split a full padded target ("+ digits <eos>" rows) into decoder input
/// (all but last column) and labels with mask (all but first column).
pub fn split_target(tgt: &PaddedBatch, pad: TokenId) -> Result<(PaddedBatch, Vec<TokenId>, Vec<bool>)> {
    if tgt.len < 2 {
        return Err(Error::Shape("target sequences must have length >= 2".into()));
    }
    let t_in = tgt.len - 1;
    let mut ids = Vec::with_capacity(tgt.batch * t_in);
    let mut labels = Vec::with_capacity(tgt.batch * t_in);
    let mut mask = Vec::with_capacity(tgt.batch * t_in);
    for b in 0..tgt.batch {
        for t in 0..t_in {
            ids.push(tgt.id(b, t));
            let label = tgt.id(b, t + 1);
            labels.push(label);
            mask.push(label != pad);
        }
    }
    let lens = tgt.lens.iter().map(|&l| l.saturating_sub(1).max(1)).collect();
    Ok((
        PaddedBatch { ids, batch: tgt.batch, len: t_in, lens },
        labels,
        mask,
    ))
}

/// Forward + full reverse-mode backward. `tgt` is the complete target
/// including <eos>; `pad` marks unsupervised positions.
pub fn loss_and_grads<F: Real>(
    model: &Model<F>,
    src: &PaddedBatch,
    tgt: &PaddedBatch,
    pad: TokenId,
) -> Result<(f64, Params<F>)> {
    let (dec_in, labels, mask) = split_target(tgt, pad)?;
    let enc = encoder_forward(model, src, None, None)?;
    let dec = decoder_forward(model, &enc.out, src, &dec_in, None, None)?;
    let (loss, dlogits) = loss_from_logits(&dec.logits, &labels, &mask)?;
    let mut grads = Params::<F>::zeros(&model.config);
    backward(model, src, &dec_in, &enc, &dec, &dlogits, &mut grads)?;
    Ok((loss, grads))
}

fn backward<F: Real>(
    model: &Model<F>,
    src: &PaddedBatch,
    dec_in: &PaddedBatch,
    enc: &EncoderPass<F>,
    dec: &DecoderPass<F>,
    dlogits: &Array2<F>,
    g: &mut Params<F>,
) -> Result<()> {
    let p = &model.params;
    let cfg = &model.config;
    let n_heads = cfg.n_heads;

    // tied output projection
    let d_dec_out = dlogits.dot(&p.tok_emb);
    g.tok_emb += &dlogits.t().dot(&dec.out);

    let mut dy = {
        let ln = &p.ln_dec_out;
        let (dgain, dbias) = (&mut g.ln_dec_out.gain, &mut g.ln_dec_out.bias);
        layernorm_backward(&d_dec_out, &dec.ln_out, ln, dgain, dbias)
    };

    // gradient flowing into the (shared) encoder output across all layers
    let mut d_enc_out: Array2<F> = Array2::zeros(enc.out.dim());

    for li in (0..cfg.n_layers_dec).rev() {
        let layer = &p.dec[li];
        let cache = &dec.layers[li];
        let gl = &mut g.dec[li];

        let dn3 = ff_backward(
            &dy,
            &cache.n3,
            &cache.ff,
            &layer.ff,
            FfGrads {
                w1: &mut gl.ff.w1,
                b1: &mut gl.ff.b1,
                w2: &mut gl.ff.w2,
                b2: &mut gl.ff.b2,
            },
        );
        let d_y_mid2 =
            &dy + &layernorm_backward(&dn3, &cache.ln3, &layer.ln3, &mut gl.ln3.gain, &mut gl.ln3.bias);

        let geo_cross = AttnGeo {
            batch: dec_in.batch,
            q_len: dec_in.len,
            kv_len: src.len,
            n_heads,
        };
        let (dn2, d_enc_part) = attn_backward(
            &d_y_mid2,
            &cache.n2,
            &enc.out,
            &cache.cross_attn,
            &layer.cross_attn,
            &geo_cross,
            (
                &mut gl.cross_attn.wq,
                &mut gl.cross_attn.wk,
                &mut gl.cross_attn.wv,
                &mut gl.cross_attn.wo,
            ),
        );
        d_enc_out += &d_enc_part;
        let d_y_mid1 = &d_y_mid2
            + &layernorm_backward(&dn2, &cache.ln2, &layer.ln2, &mut gl.ln2.gain, &mut gl.ln2.bias);

        let geo_self = AttnGeo {
            batch: dec_in.batch,
            q_len: dec_in.len,
            kv_len: dec_in.len,
            n_heads,
        };
        let (dn1_q, dn1_kv) = attn_backward(
            &d_y_mid1,
            &cache.n1,
            &cache.n1,
            &cache.self_attn,
            &layer.self_attn,
            &geo_self,
            (
                &mut gl.self_attn.wq,
                &mut gl.self_attn.wk,
                &mut gl.self_attn.wv,
                &mut gl.self_attn.wo,
            ),
        );
        let dn1 = dn1_q + dn1_kv;
        dy = &d_y_mid1
            + &layernorm_backward(&dn1, &cache.ln1, &layer.ln1, &mut gl.ln1.gain, &mut gl.ln1.bias);
    }
    embed_backward(&dy, dec_in, &mut g.tok_emb, &mut g.pos_tgt);

    // encoder: final LN then layers in reverse
    let mut dx = layernorm_backward(
        &d_enc_out,
        &enc.ln_out,
        &p.ln_enc_out,
        &mut g.ln_enc_out.gain,
        &mut g.ln_enc_out.bias,
    );
    for li in (0..cfg.n_layers_enc).rev() {
        let layer = &p.enc[li];
        let cache = &enc.layers[li];
        let gl = &mut g.enc[li];

        let dn2 = ff_backward(
            &dx,
            &cache.n2,
            &cache.ff,
            &layer.ff,
            FfGrads {
                w1: &mut gl.ff.w1,
                b1: &mut gl.ff.b1,
                w2: &mut gl.ff.w2,
                b2: &mut gl.ff.b2,
            },
        );
        let d_x_mid =
            &dx + &layernorm_backward(&dn2, &cache.ln2, &layer.ln2, &mut gl.ln2.gain, &mut gl.ln2.bias);

        let geo = AttnGeo {
            batch: src.batch,
            q_len: src.len,
            kv_len: src.len,
            n_heads,
        };
        let (dn1_q, dn1_kv) = attn_backward(
            &d_x_mid,
            &cache.n1,
            &cache.n1,
            &cache.attn,
            &layer.attn,
            &geo,
            (
                &mut gl.attn.wq,
                &mut gl.attn.wk,
                &mut gl.attn.wv,
                &mut gl.attn.wo,
            ),
        );
        let dn1 = dn1_q + dn1_kv;
        dx = &d_x_mid
            + &layernorm_backward(&dn1, &cache.ln1, &layer.ln1, &mut gl.ln1.gain, &mut gl.ln1.bias);
    }
    embed_backward(&dx, src, &mut g.tok_emb, &mut g.pos_src);
    Ok(())
}
