#![no_main]

use libfuzzer_sys::fuzz_target;
use verdrift::fingerprint::parse_index;

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = parse_index(data) {
        for e in entries {
            let _ = e.key();
        }
    }
});
