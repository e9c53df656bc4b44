//! Mechanistic analysis: counterfactual prompt pairs, per-head activation
//! patching with KL maps, circuit evaluation under head ablation, and
//! embedding-space PCA with number-theoretic labels.

mod pca;

pub use pca::{pca, symmetric_eigen, PcaResult};

use crate::codec::{self, TokenId, Vocabulary};
use crate::model::{
    greedy_decode, pad_batch, run_forward, split_target, all_slots, AttnKind, HeadOverride, Model,
    Overrides, PaddedBatch, Side, SlotId,
};
use crate::numtheory;
use crate::rng::{mix64, CounterRng};
use crate::sampler::{draw_instance, ModExpInstance, SamplerSpec};
use crate::{Error, Result};
use ndarray::{Array2, ArrayView1};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairFilter {
    None,
    /// Clean instances satisfy a^b < c, so the modulo is the identity.
    NoReduction,
}

impl std::fmt::Display for PairFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PairFilter::None => write!(f, "none"),
            PairFilter::NoReduction => write!(f, "no_reduction"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPair {
    pub clean: ModExpInstance,
    pub counterfactual: ModExpInstance,
}

fn digit_len(n: u64, base: u64) -> usize {
    codec::encode_int(n, base).len()
}

/// a^b < c without overflow; c is small so any growth past c fails fast.
fn pow_below(a: u64, b: u64, c: u64) -> Option<u64> {
    let mut acc: u64 = 1;
    if b == 0 {
        return (acc < c).then_some(acc);
    }
    if a == 0 {
        return (0 < c).then_some(0);
    }
    for _ in 0..b {
        acc = acc.checked_mul(a)?;
        if acc >= c {
            return None;
        }
    }
    Some(acc)
}

const STREAM_PAIRS: u64 = 0x70_61_69_72;

/// Build clean/counterfactual prompt pairs: clean drawn from `spec`
/// (optionally restricted to no-reduction instances), counterfactual
/// resampling (a, b) under the same operand law with identical digit-group
/// lengths and the same modulus, so token sequences align position by
/// position.
pub fn build_prompt_pairs(
    spec: &SamplerSpec,
    n: usize,
    filter: PairFilter,
    base: u64,
) -> Result<Vec<PromptPair>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("build_prompt_pairs: n must be >= 1".into()));
    }
    let mut pairs = Vec::with_capacity(n);
    let mut rng = CounterRng::from_stream(mix64(spec.seed ^ STREAM_PAIRS), &[n as u64]);
    let mut attempts = 0u64;
    while pairs.len() < n {
        attempts += 1;
        if attempts > spec.max_rejections {
            return Err(Error::RejectionExhausted {
                target: pairs.len() as u64,
                attempts,
            });
        }
        let clean = draw_instance(spec, &mut rng)?;
        if filter == PairFilter::NoReduction && pow_below(clean.a, clean.b, clean.c).is_none() {
            continue;
        }
        let la = digit_len(clean.a, base);
        let lb = digit_len(clean.b, base);
        let mut found = None;
        for _ in 0..spec.max_rejections {
            let cand = draw_instance(spec, &mut rng)?;
            if (cand.a, cand.b) == (clean.a, clean.b) {
                continue;
            }
            if digit_len(cand.a, base) != la || digit_len(cand.b, base) != lb {
                continue;
            }
            let d = numtheory::modpow(cand.a, cand.b, clean.c)?;
            found = Some(ModExpInstance { a: cand.a, b: cand.b, c: clean.c, d });
            break;
        }
        match found {
            Some(counterfactual) => pairs.push(PromptPair { clean, counterfactual }),
            None => {
                return Err(Error::RejectionExhausted {
                    target: pairs.len() as u64,
                    attempts: spec.max_rejections,
                })
            }
        }
    }
    Ok(pairs)
}

/// KL(softmax(p) || softmax(q)) in nats, computed in log space.
pub fn kl_divergence(p_logits: ArrayView1<'_, f64>, q_logits: ArrayView1<'_, f64>) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(Error::Shape(format!(
            "kl: length mismatch {} vs {}",
            p_logits.len(),
            q_logits.len()
        )));
    }
    if p_logits.iter().chain(q_logits.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Divergence("kl: non-finite logits".into()));
    }
    let lse = |v: ArrayView1<'_, f64>| -> f64 {
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
    };
    let lp = lse(p_logits);
    let lq = lse(q_logits);
    let mut kl = 0.0;
    for (&p, &q) in p_logits.iter().zip(q_logits.iter()) {
        let logp = p - lp;
        kl += logp.exp() * (logp - (q - lq));
    }
    Ok(kl.max(0.0))
}

/// KL summed over the given rows of two logit matrices.
fn kl_over_rows(p: &Array2<f64>, q: &Array2<f64>, rows: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &r in rows {
        total += kl_divergence(p.row(r), q.row(r))?;
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct PatchReport {
    /// slot -> (mean KL, std KL) over pairs.
    pub kl: BTreeMap<SlotId, (f64, f64)>,
    /// slot -> per-pair KL values, pair order preserved.
    pub per_pair: BTreeMap<SlotId, Vec<f64>>,
    pub pair_count: usize,
    pub subset_filter: String,
}

pub(crate) struct PatchBatches {
    pub src_clean: PaddedBatch,
    pub src_cf: PaddedBatch,
    pub dec_in: PaddedBatch,
    /// Supervised (answer-token) row indices per pair.
    pub answer_rows: Vec<Vec<usize>>,
}

pub(crate) fn batch_pairs(pairs: &[PromptPair], vocab: &Vocabulary) -> Result<PatchBatches> {
    let pad = vocab.pad_id();
    let mut clean_srcs: Vec<Vec<TokenId>> = Vec::with_capacity(pairs.len());
    let mut cf_srcs: Vec<Vec<TokenId>> = Vec::with_capacity(pairs.len());
    let mut tgts: Vec<Vec<TokenId>> = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (cs, ct) = codec::encode_instance(&pair.clean, vocab);
        let (fs, _) = codec::encode_instance(&pair.counterfactual, vocab);
        if cs.ids.len() != fs.ids.len() {
            return Err(Error::Shape(format!(
                "pair sources are not length-aligned: {} vs {}",
                cs.ids.len(),
                fs.ids.len()
            )));
        }
        clean_srcs.push(cs.ids);
        cf_srcs.push(fs.ids);
        tgts.push(ct.ids);
    }
    let width = clean_srcs.iter().map(|s| s.len()).max().unwrap();
    let src_clean = pad_batch(&clean_srcs, pad, Some(width))?;
    let src_cf = pad_batch(&cf_srcs, pad, Some(width))?;
    let tgt = pad_batch(&tgts, pad, None)?;
    let (dec_in, _, mask) = split_target(&tgt, pad)?;
    let answer_rows: Vec<Vec<usize>> = (0..pairs.len())
        .map(|b| {
            (0..dec_in.len)
                .map(|t| b * dec_in.len + t)
                .filter(|&r| mask[r])
                .collect()
        })
        .collect();
    Ok(PatchBatches { src_clean, src_cf, dec_in, answer_rows })
}

fn f64_logits(l: &Array2<f32>) -> Array2<f64> {
    l.mapv(|x| x as f64)
}

/// Patchable slots: decoder heads by default, encoder heads when asked.
pub fn patch_slots(config: &crate::model::ModelConfig, include_encoder: bool) -> Vec<SlotId> {
    all_slots(config)
        .into_iter()
        .filter(|slot| include_encoder || slot.0 == Side::Decoder)
        .collect()
}

/// For every head slot: replace the clean run's head output with the
/// counterfactual run's (teacher-forcing the clean target prefix in both),
/// and measure the KL between unpatched and patched clean output
/// distributions, summed over answer positions, averaged over pairs.
pub fn patch_sweep(
    model: &Model<f32>,
    pairs: &[PromptPair],
    vocab: &Vocabulary,
    include_encoder: bool,
    subset_filter: &str,
) -> Result<PatchReport> {
    if pairs.is_empty() {
        return Err(Error::domain("patch_sweep: no pairs"));
    }
    let b = batch_pairs(pairs, vocab)?;
    let clean = run_forward(model, &b.src_clean, &b.dec_in, None, false)?;
    let cf = run_forward(model, &b.src_cf, &b.dec_in, None, true)?;
    let cf_trace = cf.trace.unwrap();
    let clean_logits = f64_logits(&clean.logits);

    let mut kl = BTreeMap::new();
    let mut per_pair = BTreeMap::new();
    for slot in patch_slots(&model.config, include_encoder) {
        let mut ovs = Overrides::new();
        ovs.insert(slot, HeadOverride::Full(cf_trace.heads[&slot].clone()));
        let patched = run_forward(model, &b.src_clean, &b.dec_in, Some(&ovs), false)?;
        let patched_logits = f64_logits(&patched.logits);
        let mut kls = Vec::with_capacity(pairs.len());
        for rows in &b.answer_rows {
            kls.push(kl_over_rows(&clean_logits, &patched_logits, rows)?);
        }
        let mean = kls.iter().sum::<f64>() / kls.len() as f64;
        let var = kls.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / kls.len() as f64;
        kl.insert(slot, (mean, var.sqrt()));
        per_pair.insert(slot, kls);
    }
    Ok(PatchReport { kl, per_pair, pair_count: pairs.len(), subset_filter: subset_filter.into() })
}

/// Worst-case per-pair KL when each head is patched with its own clean
/// activation (should be ~0: patching is a no-op on identical inputs).
pub fn clean_patch_max_kl(
    model: &Model<f32>,
    pairs: &[PromptPair],
    vocab: &Vocabulary,
    include_encoder: bool,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::domain("clean_patch_max_kl: no pairs"));
    }
    let b = batch_pairs(pairs, vocab)?;
    let clean = run_forward(model, &b.src_clean, &b.dec_in, None, true)?;
    let trace = clean.trace.unwrap();
    let clean_logits = f64_logits(&clean.logits);
    let mut worst = 0.0f64;
    for slot in patch_slots(&model.config, include_encoder) {
        let mut ovs = Overrides::new();
        ovs.insert(slot, HeadOverride::Full(trace.heads[&slot].clone()));
        let patched = run_forward(model, &b.src_clean, &b.dec_in, Some(&ovs), false)?;
        let patched_logits = f64_logits(&patched.logits);
        for rows in &b.answer_rows {
            worst = worst.max(kl_over_rows(&clean_logits, &patched_logits, rows)?);
        }
    }
    Ok(worst)
}

/// Worst-case per-pair KL between the counterfactual run and a clean run
/// with every head patched from the counterfactual (should be ~0: full
/// substitution reproduces the counterfactual distribution).
pub fn full_substitution_max_kl(
    model: &Model<f32>,
    pairs: &[PromptPair],
    vocab: &Vocabulary,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::domain("full_substitution_max_kl: no pairs"));
    }
    let b = batch_pairs(pairs, vocab)?;
    let cf = run_forward(model, &b.src_cf, &b.dec_in, None, true)?;
    let cf_trace = cf.trace.unwrap();
    let mut ovs = Overrides::new();
    for slot in patch_slots(&model.config, true) {
        ovs.insert(slot, HeadOverride::Full(cf_trace.heads[&slot].clone()));
    }
    let patched = run_forward(model, &b.src_clean, &b.dec_in, Some(&ovs), false)?;
    let cf_logits = f64_logits(&cf.logits);
    let patched_logits = f64_logits(&patched.logits);
    let mut worst = 0.0f64;
    for rows in &b.answer_rows {
        worst = worst.max(kl_over_rows(&cf_logits, &patched_logits, rows)?);
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    Mean,
    Zero,
}

#[derive(Clone, Debug)]
pub struct CircuitSpec {
    pub active_heads: BTreeSet<SlotId>,
    pub ablation_mode: AblationMode,
}

/// Ablation overrides for every decoder slot outside the circuit. Mean mode
/// takes the position-wise mean head activation over `reference`
/// (teacher-forced); zero mode zeroes the head output.
fn ablation_overrides(
    model: &Model<f32>,
    circuit: &CircuitSpec,
    reference: &[ModExpInstance],
    vocab: &Vocabulary,
) -> Result<Overrides<f32>> {
    let slots = patch_slots(&model.config, false);
    for slot in &circuit.active_heads {
        if !all_slots(&model.config).contains(slot) {
            return Err(Error::Config(format!("circuit head {slot:?} not in model")));
        }
    }
    let ablated: Vec<SlotId> =
        slots.into_iter().filter(|s| !circuit.active_heads.contains(s)).collect();
    let mut ovs = Overrides::new();
    match circuit.ablation_mode {
        AblationMode::Zero => {
            for slot in ablated {
                ovs.insert(slot, HeadOverride::Zero);
            }
        }
        AblationMode::Mean => {
            if reference.is_empty() {
                return Err(Error::domain("mean ablation: empty reference batch"));
            }
            let pad = vocab.pad_id();
            let mut srcs = Vec::with_capacity(reference.len());
            let mut tgts = Vec::with_capacity(reference.len());
            for inst in reference {
                let (s, t) = codec::encode_instance(inst, vocab);
                srcs.push(s.ids);
                tgts.push(t.ids);
            }
            let src = pad_batch(&srcs, pad, None)?;
            let tgt = pad_batch(&tgts, pad, None)?;
            let (dec_in, _, _) = split_target(&tgt, pad)?;
            let fwd = run_forward(model, &src, &dec_in, None, true)?;
            let trace = fwd.trace.unwrap();
            let batch = src.batch;
            for slot in ablated {
                let act = &trace.heads[&slot];
                let q_len = act.dim().0 / batch;
                let hd = act.dim().1;
                let mut mean = Array2::<f32>::zeros((q_len, hd));
                for bi in 0..batch {
                    for t in 0..q_len {
                        let row = act.row(bi * q_len + t);
                        let mut m = mean.row_mut(t);
                        m += &row;
                    }
                }
                mean.mapv_inplace(|x| x / batch as f32);
                ovs.insert(slot, HeadOverride::PerPosition(mean));
            }
        }
    }
    Ok(ovs)
}

/// Greedy-decode accuracy of the ablated circuit and of the full model on
/// the same dataset.
pub fn circuit_eval(
    model: &Model<f32>,
    circuit: &CircuitSpec,
    dataset: &[ModExpInstance],
    reference: &[ModExpInstance],
    vocab: &Vocabulary,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::domain("circuit_eval: empty dataset"));
    }
    let ovs = ablation_overrides(model, circuit, reference, vocab)?;
    let acc = |overrides: Option<&Overrides<f32>>| -> Result<f64> {
        let pad = vocab.pad_id();
        let eos = vocab.eos_id();
        let start = vocab.plus_id();
        let mut correct = 0u64;
        for chunk in dataset.chunks(batch_size) {
            let srcs: Vec<Vec<TokenId>> =
                chunk.iter().map(|i| codec::encode_instance(i, vocab).0.ids).collect();
            let src = pad_batch(&srcs, pad, None)?;
            let decoded =
                greedy_decode(model, &src, start, eos, pad, model.config.max_tgt_len, overrides)?;
            for (inst, seq) in chunk.iter().zip(decoded.iter()) {
                if codec::decode_prediction(seq, vocab) == Some(inst.d) {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    };
    let full = acc(None)?;
    let circuit_acc = acc(Some(&ovs))?;
    Ok((circuit_acc, full))
}

fn kind_name(slot: &SlotId) -> &'static str {
    match (slot.0, slot.2) {
        (Side::Decoder, AttnKind::SelfAttn) => "self",
        (Side::Decoder, AttnKind::Cross) => "cross",
        (Side::Encoder, _) => "enc_self",
    }
}

pub fn write_kl_map_csv(path: &Path, report: &PatchReport) -> Result<()> {
    let mut out = String::from("layer,kind,head,mean_kl,std_kl\n");
    for (slot, (mean, std)) in &report.kl {
        out.push_str(&format!("{},{},{},{mean},{std}\n", slot.1, kind_name(slot), slot.3));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_per_pair_kl_csv(path: &Path, report: &PatchReport) -> Result<()> {
    let mut out = String::from("layer,kind,head,pair,kl\n");
    for (slot, kls) in &report.per_pair {
        for (i, kl) in kls.iter().enumerate() {
            out.push_str(&format!("{},{},{},{i},{kl}\n", slot.1, kind_name(slot), slot.3));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn describe_circuit(circuit: &CircuitSpec) -> String {
    if circuit.active_heads.is_empty() {
        return "empty".into();
    }
    circuit
        .active_heads
        .iter()
        .map(|s| format!("{}{}h{}", kind_name(s), s.1, s.3))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn write_circuit_csv(
    path: &Path,
    circuit: &CircuitSpec,
    circuit_acc: f64,
    full_acc: f64,
    subset: &str,
) -> Result<()> {
    let mode = match circuit.ablation_mode {
        AblationMode::Mean => "mean",
        AblationMode::Zero => "zero",
    };
    let out = format!(
        "circuit,ablation_mode,circuit_acc,full_acc,subset\n{},{mode},{circuit_acc},{full_acc},{subset}\n",
        describe_circuit(circuit)
    );
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Embedding rows for token values 1..=100 (single tokens only when
/// base > 100).
pub fn value_embeddings(model: &Model<f32>, vocab: &Vocabulary) -> Result<Array2<f64>> {
    if vocab.base() <= 100 {
        return Err(Error::Config(format!(
            "embedding report needs base > 100 so values 1-100 are single tokens (base = {})",
            vocab.base()
        )));
    }
    let d = model.config.d_model;
    let mut out = Array2::zeros((100, d));
    for v in 1..=100u64 {
        let id = vocab.digit_id(v) as usize;
        for j in 0..d {
            out[(v as usize - 1, j)] = model.params.tok_emb[(id, j)] as f64;
        }
    }
    Ok(out)
}

/// PCA (k = 3) of the 1..=100 token embeddings of two checkpoints of the
/// same architecture, joined with number-theory labels; writes one
/// projection table per checkpoint.
pub fn embedding_report(
    before: &Model<f32>,
    after: &Model<f32>,
    vocab: &Vocabulary,
    order_modulus: u64,
    multiple_primes: &[u64],
    out_before: &Path,
    out_after: &Path,
) -> Result<()> {
    let arch = |m: &Model<f32>| crate::model::ModelConfig { seed: 0, ..m.config.clone() };
    if arch(before) != arch(after) {
        return Err(Error::Config("embedding report: checkpoints differ in architecture".into()));
    }
    let values: Vec<u64> = (1..=100).collect();
    let labels = numtheory::build_label_table(&values, order_modulus, multiple_primes)?;
    for (model, path) in [(before, out_before), (after, out_after)] {
        let emb = value_embeddings(model, vocab)?;
        let res = pca(&emb, 3)?;
        let mut out = String::from("value,pc1,pc2,pc3,");
        out.push_str(numtheory::LABEL_CSV_HEADER.split_once(',').unwrap().1);
        out.push('\n');
        for (i, label) in labels.iter().enumerate() {
            let row = numtheory::label_csv_row(label);
            let label_rest = row.split_once(',').unwrap().1;
            out.push_str(&format!(
                "{},{},{},{},{label_rest}\n",
                values[i],
                res.projections[(i, 0)],
                res.projections[(i, 1)],
                res.projections[(i, 2)],
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::build_vocabulary;
    use crate::model::{init_model, ModelConfig};
    use crate::sampler::{OperandLaw, OutcomeLaw};
    use ndarray::arr1;
    use proptest::prelude::*;

    fn desk_like_spec(seed: u64) -> SamplerSpec {
        let mut spec = SamplerSpec::new(OperandLaw::Reciprocal, OutcomeLaw::Computed, seed);
        spec.m = 10_000;
        spec.c_max = 20;
        spec
    }

    fn small_model(seed: u64) -> (Model<f32>, Vocabulary) {
        let vocab = build_vocabulary(1000).unwrap();
        let cfg = ModelConfig {
            n_layers_enc: 1,
            n_layers_dec: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: vocab.size(),
            max_src_len: codec::max_src_len(10_000, 20, 1000),
            max_tgt_len: codec::max_tgt_len(20, 1000),
            seed,
        };
        (init_model(&cfg).unwrap(), vocab)
    }

    #[test]
    fn pairs_are_aligned_and_filtered() {
        let spec = desk_like_spec(3);
        let pairs = build_prompt_pairs(&spec, 100, PairFilter::NoReduction, 1000).unwrap();
        assert_eq!(pairs.len(), 100);
        for p in &pairs {
            assert!(pow_below(p.clean.a, p.clean.b, p.clean.c).is_some());
            assert_eq!(p.clean.d, pow_below(p.clean.a, p.clean.b, p.clean.c).unwrap());
            assert_eq!(p.clean.c, p.counterfactual.c);
            assert_ne!((p.clean.a, p.clean.b), (p.counterfactual.a, p.counterfactual.b));
            assert_eq!(digit_len(p.clean.a, 1000), digit_len(p.counterfactual.a, 1000));
            assert_eq!(digit_len(p.clean.b, 1000), digit_len(p.counterfactual.b, 1000));
            let vocab = build_vocabulary(1000).unwrap();
            let (cs, _) = codec::encode_instance(&p.clean, &vocab);
            let (fs, _) = codec::encode_instance(&p.counterfactual, &vocab);
            assert_eq!(cs.ids.len(), fs.ids.len());
            assert_eq!(
                p.counterfactual.d,
                numtheory::modpow(p.counterfactual.a, p.counterfactual.b, p.counterfactual.c)
                    .unwrap()
            );
        }
        // deterministic
        let again = build_prompt_pairs(&spec, 100, PairFilter::NoReduction, 1000).unwrap();
        assert_eq!(pairs, again);
    }

    #[test]
    fn kl_closed_forms() {
        let p = arr1(&[0.0, 0.0, 0.0]);
        assert_eq!(kl_divergence(p.view(), p.view()).unwrap(), 0.0);
        // p concentrated on one outcome, q uniform over two: KL = ln 2
        let big = 60.0;
        let p = arr1(&[big, 0.0]);
        let q = arr1(&[0.5, 0.5]);
        let kl = kl_divergence(p.view(), q.view()).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-9, "kl {kl}");
        assert!(kl_divergence(p.view(), arr1(&[1.0]).view()).is_err());
        assert!(kl_divergence(arr1(&[f64::NAN, 0.0]).view(), q.view()).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            p in proptest::collection::vec(-10.0f64..10.0, 6),
            q in proptest::collection::vec(-10.0f64..10.0, 6),
        ) {
            let p = ndarray::Array1::from(p);
            let q = ndarray::Array1::from(q);
            let kl = kl_divergence(p.view(), q.view()).unwrap();
            prop_assert!(kl >= 0.0 && kl.is_finite());
        }
    }

    #[test]
    fn clean_on_clean_patching_is_identity() {
        let (model, vocab) = small_model(5);
        let spec = desk_like_spec(5);
        let pairs = build_prompt_pairs(&spec, 8, PairFilter::None, 1000).unwrap();
        let kl = clean_patch_max_kl(&model, &pairs, &vocab, true).unwrap();
        assert!(kl <= 1e-9, "clean-on-clean KL {kl}");
    }

    #[test]
    fn full_substitution_reproduces_counterfactual() {
        let (model, vocab) = small_model(6);
        let spec = desk_like_spec(6);
        let pairs = build_prompt_pairs(&spec, 8, PairFilter::None, 1000).unwrap();
        let kl = full_substitution_max_kl(&model, &pairs, &vocab).unwrap();
        assert!(kl <= 1e-6, "full substitution KL {kl}");
    }

    #[test]
    fn patch_sweep_covers_all_slots_nonnegatively() {
        let (model, vocab) = small_model(7);
        let spec = desk_like_spec(7);
        let pairs = build_prompt_pairs(&spec, 6, PairFilter::None, 1000).unwrap();
        let report = patch_sweep(&model, &pairs, &vocab, false, "none").unwrap();
        let slots = patch_slots(&model.config, false);
        assert_eq!(report.kl.len(), slots.len());
        for slot in &slots {
            let (mean, std) = report.kl[slot];
            assert!(mean >= 0.0 && mean.is_finite());
            assert!(std >= 0.0 && std.is_finite());
            assert_eq!(report.per_pair[slot].len(), 6);
        }
        assert_eq!(report.pair_count, 6);
    }

    #[test]
    fn all_heads_active_equals_full_model() {
        let (model, vocab) = small_model(8);
        let spec = desk_like_spec(8);
        let data: Vec<ModExpInstance> =
            (0..40).map(|i| crate::sampler::instance_at(&spec, i).unwrap()).collect();
        let reference = &data[..10];
        for mode in [AblationMode::Mean, AblationMode::Zero] {
            let circuit = CircuitSpec {
                active_heads: patch_slots(&model.config, false).into_iter().collect(),
                ablation_mode: mode,
            };
            let (circuit_acc, full_acc) =
                circuit_eval(&model, &circuit, &data, reference, &vocab, 16).unwrap();
            assert_eq!(circuit_acc, full_acc);
        }
    }

    #[test]
    fn empty_circuit_changes_behavior() {
        let (model, vocab) = small_model(9);
        let spec = desk_like_spec(9);
        let data: Vec<ModExpInstance> =
            (0..30).map(|i| crate::sampler::instance_at(&spec, i).unwrap()).collect();
        let circuit = CircuitSpec { active_heads: BTreeSet::new(), ablation_mode: AblationMode::Zero };
        let (circuit_acc, full_acc) =
            circuit_eval(&model, &circuit, &data, &data[..8], &vocab, 16).unwrap();
        assert!(circuit_acc <= full_acc + 1e-12);
        let bad = CircuitSpec {
            active_heads: [(Side::Decoder, 9, AttnKind::SelfAttn, 0)].into_iter().collect(),
            ablation_mode: AblationMode::Zero,
        };
        assert!(circuit_eval(&model, &bad, &data, &data[..8], &vocab, 16).is_err());
    }

    #[test]
    fn embedding_report_requires_wide_base_and_shares_labels() {
        let (model, vocab) = small_model(10);
        let dir = tempfile::tempdir().unwrap();
        let before = dir.path().join("pca_before.csv");
        let after = dir.path().join("pca_after.csv");
        embedding_report(&model, &model, &vocab, 97, &[2, 3, 23], &before, &after).unwrap();
        let tb = std::fs::read_to_string(&before).unwrap();
        let ta = std::fs::read_to_string(&after).unwrap();
        assert_eq!(tb.lines().count(), 101);
        assert_eq!(tb, ta, "same model twice must give identical tables");
        assert!(tb.starts_with("value,pc1,pc2,pc3,lowest_prime_factor,"));
        // label columns identical even for different checkpoints
        let (other, _) = small_model(11);
        embedding_report(&model, &other, &vocab, 97, &[2, 3], &before, &after).unwrap();
        let tb = std::fs::read_to_string(&before).unwrap();
        let ta = std::fs::read_to_string(&after).unwrap();
        let labels = |text: &str| -> Vec<String> {
            text.lines()
                .skip(1)
                .map(|l| l.splitn(5, ',').nth(4).unwrap().to_string())
                .collect::<Vec<_>>()
        };
        assert_eq!(labels(&tb), labels(&ta));

        let narrow = build_vocabulary(97).unwrap();
        let cfg = ModelConfig {
            vocab_size: narrow.size(),
            ..model.config.clone()
        };
        let m97: Model<f32> = init_model(&cfg).unwrap();
        assert!(value_embeddings(&m97, &narrow).is_err());
    }
}
