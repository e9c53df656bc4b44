//! Base-B tokenization of (a, b, c, d) tuples.
//!
//! Source:  V3 + digits(a) + digits(b) + digits(c)
//! Target:  + digits(d) <eos>
//!
//! "+" is the group separator preceding every integer, "V3" an opaque tag
//! token. Digit tokens are the base-B digits 0..B-1.

use crate::sampler::ModExpInstance;
use crate::{Error, Result};

pub type TokenId = u32;

/// Token inventory for one base: digits 0..base-1, then "+", "V3", "<pad>",
/// "<eos>". Ids are dense and assigned in that order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    base: u64,
}

impl Vocabulary {
    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn size(&self) -> usize {
        self.base as usize + 4
    }

    pub fn plus_id(&self) -> TokenId {
        self.base as TokenId
    }

    pub fn v3_id(&self) -> TokenId {
        self.base as TokenId + 1
    }

    pub fn pad_id(&self) -> TokenId {
        self.base as TokenId + 2
    }

    pub fn eos_id(&self) -> TokenId {
        self.base as TokenId + 3
    }

    pub fn digit_id(&self, digit: u64) -> TokenId {
        debug_assert!(digit < self.base);
        digit as TokenId
    }

    /// The digit value of a token id, if it is a digit token.
    pub fn as_digit(&self, id: TokenId) -> Option<u64> {
        ((id as u64) < self.base).then_some(id as u64)
    }

    pub fn token_str(&self, id: TokenId) -> String {
        match self.as_digit(id) {
            Some(d) => d.to_string(),
            None if id == self.plus_id() => "+".into(),
            None if id == self.v3_id() => "V3".into(),
            None if id == self.pad_id() => "<pad>".into(),
            None if id == self.eos_id() => "<eos>".into(),
            None => format!("<unk:{id}>"),
        }
    }
}

pub fn build_vocabulary(base: u64) -> Result<Vocabulary> {
    if base < 2 {
        return Err(Error::Config("vocabulary base must be >= 2".into()));
    }
    Ok(Vocabulary { base })
}

/// Canonical base-B digits, most significant first; 0 encodes as [0].
pub fn encode_int(mut n: u64, base: u64) -> Vec<u64> {
    assert!(base >= 2);
    if n == 0 {
        return vec![0];
    }
    let mut digits = Vec::new();
    while n > 0 {
        digits.push(n % base);
        n /= base;
    }
    digits.reverse();
    digits
}

/// Inverse of `encode_int`. In strict mode, non-canonical leading zeros are
/// rejected. Overflow past u64 is rejected in either mode.
pub fn decode_int(digits: &[u64], base: u64, strict: bool) -> Result<u64> {
    if digits.is_empty() {
        return Err(Error::Format { what: "digit list", detail: "empty".into() });
    }
    if strict && digits.len() > 1 && digits[0] == 0 {
        return Err(Error::Format { what: "digit list", detail: "leading zero".into() });
    }
    let mut n: u64 = 0;
    for &d in digits {
        if d >= base {
            return Err(Error::Format {
                what: "digit list",
                detail: format!("digit {d} out of range for base {base}"),
            });
        }
        n = n
            .checked_mul(base)
            .and_then(|x| x.checked_add(d))
            .ok_or(Error::Format { what: "digit list", detail: "overflow".into() })?;
    }
    Ok(n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub role: Role,
}

/// Encode one instance into encoder source and decoder target sequences.
pub fn encode_instance(inst: &ModExpInstance, vocab: &Vocabulary) -> (TokenSeq, TokenSeq) {
    let base = vocab.base();
    let mut src = vec![vocab.v3_id()];
    for n in [inst.a, inst.b, inst.c] {
        src.push(vocab.plus_id());
        src.extend(encode_int(n, base).into_iter().map(|d| vocab.digit_id(d)));
    }
    let mut tgt = vec![vocab.plus_id()];
    tgt.extend(encode_int(inst.d, base).into_iter().map(|d| vocab.digit_id(d)));
    tgt.push(vocab.eos_id());
    (
        TokenSeq { ids: src, role: Role::Source },
        TokenSeq { ids: tgt, role: Role::Target },
    )
}

/// Parse a source sequence back into (a, b, c). Strict: expects exactly
/// V3 then three "+"-prefixed canonical digit groups.
pub fn decode_source(seq: &TokenSeq, vocab: &Vocabulary) -> Result<(u64, u64, u64)> {
    let bad = |detail: &str| Error::Format { what: "source sequence", detail: detail.into() };
    let ids = &seq.ids;
    if ids.first() != Some(&vocab.v3_id()) {
        return Err(bad("missing V3 tag"));
    }
    let mut groups: Vec<Vec<u64>> = Vec::new();
    for &id in &ids[1..] {
        if id == vocab.plus_id() {
            groups.push(Vec::new());
        } else if let Some(d) = vocab.as_digit(id) {
            groups.last_mut().ok_or_else(|| bad("digit before first '+'"))?.push(d);
        } else {
            return Err(bad("unexpected token"));
        }
    }
    if groups.len() != 3 {
        return Err(bad("expected three integer groups"));
    }
    let mut vals = groups.iter().map(|g| decode_int(g, vocab.base(), true));
    Ok((vals.next().unwrap()?, vals.next().unwrap()?, vals.next().unwrap()?))
}

/// Parse a target sequence ("+ digits <eos>") back into d. Strict.
pub fn decode_target(seq: &TokenSeq, vocab: &Vocabulary) -> Result<u64> {
    let bad = |detail: &str| Error::Format { what: "target sequence", detail: detail.into() };
    let ids = &seq.ids;
    if ids.first() != Some(&vocab.plus_id()) || ids.last() != Some(&vocab.eos_id()) {
        return Err(bad("expected '+ digits <eos>'"));
    }
    let digits: Option<Vec<u64>> = ids[1..ids.len() - 1].iter().map(|&id| vocab.as_digit(id)).collect();
    decode_int(&digits.ok_or_else(|| bad("non-digit token"))?, vocab.base(), true)
}

/// Lenient readout of a model prediction. Leading "+" tokens and trailing
/// <eos>/<pad> are stripped; the rest must be a nonempty canonical digit
/// run. Anything else is malformed (None), never a crash.
pub fn decode_prediction(ids: &[TokenId], vocab: &Vocabulary) -> Option<u64> {
    let mut start = 0;
    while start < ids.len() && ids[start] == vocab.plus_id() {
        start += 1;
    }
    let mut end = ids.len();
    while end > start && (ids[end - 1] == vocab.eos_id() || ids[end - 1] == vocab.pad_id()) {
        end -= 1;
    }
    let digits: Option<Vec<u64>> = ids[start..end].iter().map(|&id| vocab.as_digit(id)).collect();
    decode_int(&digits?, vocab.base(), true).ok()
}

/// Full template rendering, e.g.
/// "V3 +750 178 +996 884 +95 +1" for 750178^996884 = 1 mod 95 in base 1000.
pub fn template_string(inst: &ModExpInstance, base: u64) -> String {
    let mut s = String::from("V3");
    for n in [inst.a, inst.b, inst.c, inst.d] {
        let digits = encode_int(n, base);
        s.push_str(" +");
        s.push_str(
            &digits.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "),
        );
    }
    s
}

fn digits_needed(max_value: u64, base: u64) -> usize {
    encode_int(max_value, base).len()
}

/// Fixed upper bound on source length for operands <= m, modulus <= c_max.
pub fn max_src_len(m: u64, c_max: u64, base: u64) -> usize {
    1 + 2 * (1 + digits_needed(m, base)) + (1 + digits_needed(c_max, base))
}

/// Fixed upper bound on target length for d < c_max.
pub fn max_tgt_len(c_max: u64, base: u64) -> usize {
    2 + digits_needed(c_max.saturating_sub(1).max(1), base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inst(a: u64, b: u64, c: u64, d: u64) -> ModExpInstance {
        ModExpInstance { a, b, c, d }
    }

    #[test]
    fn vocabulary_sizes() {
        assert_eq!(build_vocabulary(1000).unwrap().size(), 1004);
        assert_eq!(build_vocabulary(999).unwrap().size(), 1003);
        let v2 = build_vocabulary(2).unwrap();
        assert_eq!(v2.size(), 6);
        assert_eq!(v2.as_digit(0), Some(0));
        assert_eq!(v2.as_digit(1), Some(1));
        assert_eq!(v2.as_digit(2), None);
        assert!(build_vocabulary(1).is_err());
    }

    #[test]
    fn encode_int_examples() {
        assert_eq!(encode_int(750_178, 1000), vec![750, 178]);
        assert_eq!(encode_int(0, 1000), vec![0]);
        assert_eq!(encode_int(999_999, 1000), vec![999, 999]);
        assert_eq!(encode_int(100, 10), vec![1, 0, 0]);
    }

    #[test]
    fn decode_int_examples() {
        assert_eq!(decode_int(&[750, 178], 1000, true).unwrap(), 750_178);
        assert_eq!(decode_int(&[0], 1000, true).unwrap(), 0);
        assert_eq!(decode_int(&[1, 0, 0], 10, true).unwrap(), 100);
        assert!(decode_int(&[], 10, true).is_err());
        assert!(decode_int(&[10], 10, true).is_err());
        assert!(decode_int(&[0, 5], 10, true).is_err(), "leading zero rejected in strict mode");
        assert_eq!(decode_int(&[0, 5], 10, false).unwrap(), 5);
    }

    #[test]
    fn worked_example_tokens() {
        let vocab = build_vocabulary(1000).unwrap();
        let x = inst(750_178, 996_884, 95, 1);
        let (src, tgt) = encode_instance(&x, &vocab);
        let render = |ids: &[TokenId]| {
            ids.iter().map(|&i| vocab.token_str(i)).collect::<Vec<_>>().join(" ")
        };
        assert_eq!(render(&src.ids), "V3 + 750 178 + 996 884 + 95");
        assert_eq!(render(&tgt.ids), "+ 1 <eos>");
        assert_eq!(template_string(&x, 1000), "V3 +750 178 +996 884 +95 +1");
        assert_eq!(decode_source(&src, &vocab).unwrap(), (750_178, 996_884, 95));
        assert_eq!(decode_target(&tgt, &vocab).unwrap(), 1);
    }

    #[test]
    fn degenerate_instance_target() {
        let vocab = build_vocabulary(1000).unwrap();
        let (_, tgt) = encode_instance(&inst(0, 0, 1, 0), &vocab);
        assert_eq!(tgt.ids, vec![vocab.plus_id(), vocab.digit_id(0), vocab.eos_id()]);
    }

    #[test]
    fn decode_prediction_examples() {
        let vocab = build_vocabulary(1000).unwrap();
        let plus = vocab.plus_id();
        let eos = vocab.eos_id();
        assert_eq!(decode_prediction(&[plus, 91, eos], &vocab), Some(91));
        assert_eq!(decode_prediction(&[plus, eos], &vocab), None);
        assert_eq!(decode_prediction(&[plus, 1, 19, eos], &vocab), Some(1019));
        assert_eq!(decode_prediction(&[plus, 0, 19, eos], &vocab), None, "non-canonical");
        assert_eq!(decode_prediction(&[plus, vocab.v3_id(), 3, eos], &vocab), None);
        assert_eq!(decode_prediction(&[], &vocab), None);
        // interior '+' is not stripped
        assert_eq!(decode_prediction(&[plus, 1, plus, 2, eos], &vocab), None);
    }

    #[test]
    fn source_length_bound_holds() {
        assert!(max_src_len(1_000_000, 100, 999) <= 11);
        assert!(max_src_len(1_000_000, 100, 1000) <= 11);
        let vocab = build_vocabulary(999).unwrap();
        let (src, _) = encode_instance(&inst(1_000_000, 1_000_000, 100, 0), &vocab);
        assert!(src.ids.len() <= 11);
    }

    proptest! {
        #[test]
        fn roundtrip_random_instances(
            a in 0u64..=1_000_000,
            b in 0u64..=1_000_000,
            c in 1u64..=100,
            base in prop_oneof![Just(999u64), Just(1000), Just(1013), Just(1279)],
        ) {
            let d = crate::numtheory::modpow(a, b, c).unwrap();
            let vocab = build_vocabulary(base).unwrap();
            let x = inst(a, b, c, d);
            let (src, tgt) = encode_instance(&x, &vocab);
            prop_assert_eq!(decode_source(&src, &vocab).unwrap(), (a, b, c));
            prop_assert_eq!(decode_target(&tgt, &vocab).unwrap(), d);
            prop_assert!(src.ids.len() <= max_src_len(1_000_000, 100, base));
            prop_assert!(tgt.ids.len() <= max_tgt_len(100, base));
        }

        #[test]
        fn encode_int_is_injective_roundtrip(n in 0u64..=10_000_000, base in 2u64..=1300) {
            let digits = encode_int(n, base);
            prop_assert!(digits[0] != 0 || digits.len() == 1);
            prop_assert_eq!(decode_int(&digits, base, true).unwrap(), n);
        }
    }
}
