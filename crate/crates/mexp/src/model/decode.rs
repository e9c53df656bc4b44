//! Deterministic autoregressive argmax decoding.

use super::forward::{decoder_forward, encoder_forward, Overrides, PaddedBatch};
use super::{Model, Real};
use crate::codec::TokenId;
use crate::Result;

/// Greedy decode: start each sequence with `start`, append the argmax token
/// until `<eos>` or `max_len` total tokens. Ties break toward the lowest
/// token id. Returned sequences include the start token and the terminating
/// `<eos>` when one was emitted. `overrides` (head ablations/patches) apply
/// at every step.
pub fn greedy_decode<F: Real>(
    model: &Model<F>,
    src: &PaddedBatch,
    start: TokenId,
    eos: TokenId,
    pad: TokenId,
    max_len: usize,
    overrides: Option<&Overrides<F>>,
) -> Result<Vec<Vec<TokenId>>> {
    let enc = encoder_forward(model, src, overrides, None)?;
    let batch = src.batch;
    let mut seqs: Vec<Vec<TokenId>> = vec![vec![start]; batch];
    let mut done = vec![false; batch];
    while seqs[0].len() < max_len && done.iter().any(|&d| !d) {
        let len = seqs[0].len();
        let mut ids = Vec::with_capacity(batch * len);
        for s in &seqs {
            ids.extend_from_slice(s);
        }
        let dec_in = PaddedBatch { ids, batch, len, lens: vec![len; batch] };
        let dec = decoder_forward(model, &enc.out, src, &dec_in, overrides, None)?;
        for b in 0..batch {
            let row = dec.logits.row(b * len + (len - 1));
            let mut best = 0usize;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = j;
                    best_v = v;
                }
            }
            let tok = best as TokenId;
            if done[b] {
                seqs[b].push(pad);
            } else {
                seqs[b].push(tok);
                if tok == eos {
                    done[b] = true;
                }
            }
        }
    }
    // truncate after the first <eos>
    for s in seqs.iter_mut() {
        if let Some(pos) = s.iter().position(|&t| t == eos) {
            s.truncate(pos + 1);
        }
    }
    Ok(seqs)
}
