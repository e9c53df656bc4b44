#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = mexp::model::parse_checkpoint(data) {
        let bytes = mexp::model::serialize_checkpoint(&ckpt).unwrap();
        let again = mexp::model::parse_checkpoint(&bytes).unwrap();
        assert_eq!(again.epoch, ckpt.epoch);
        assert_eq!(again.model.config, ckpt.model.config);
    }
});
