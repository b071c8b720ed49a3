#![no_main]

use libfuzzer_sys::fuzz_target;
use verdrift::twin::{read_scores_csv, write_scores_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_scores_csv(data) {
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &records).unwrap();
        assert_eq!(read_scores_csv(&buf[..]).unwrap().len(), records.len());
    }
});
