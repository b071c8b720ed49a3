#![no_main]

use libfuzzer_sys::fuzz_target;
use verdrift::twin::{read_model, write_model};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = read_model(data) {
        assert_eq!(read_model(&write_model(&model)).unwrap(), model);
    }
});
