#![no_main]

use libfuzzer_sys::fuzz_target;
use mexp::codec::{build_vocabulary, decode_prediction, TokenId};

fuzz_target!(|input: (u16, Vec<u32>)| {
    let (base_raw, ids) = input;
    let base = 2 + (base_raw as u64) % 1998;
    let vocab = build_vocabulary(base).unwrap();
    let ids: Vec<TokenId> = ids;
    let _ = decode_prediction(&ids, &vocab);
});
