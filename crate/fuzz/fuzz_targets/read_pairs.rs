#![no_main]

use std::sync::Arc;

use libfuzzer_sys::fuzz_target;
use verdrift::fingerprint::{FingerprintImage, PIXEL_COUNT};
use verdrift::pairing::{read_pairs, write_pairs};

fuzz_target!(|data: &[u8]| {
    let resolve = |k: &verdrift::fingerprint::ImageKey| {
        (k.window_index < 30).then(|| Arc::new(FingerprintImage::new(k.clone(), vec![7; PIXEL_COUNT]).unwrap()))
    };
    if let Ok(pairs) = read_pairs(data, resolve) {
        let mut buf = Vec::new();
        write_pairs(&mut buf, &pairs).unwrap();
        assert_eq!(read_pairs(&buf[..], resolve).unwrap(), pairs);
    }
});
