#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(inst) = mexp::dataset::parse_dataset_line(line) {
            let json = serde_json::to_string(&inst).unwrap();
            let again = mexp::dataset::parse_dataset_line(&json).unwrap();
            assert_eq!(again, inst);
        }
    }
});
