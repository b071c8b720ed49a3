#![no_main]

use libfuzzer_sys::fuzz_target;
use verdrift::fingerprint::{decode_png, encode_png, PIXEL_COUNT};

fuzz_target!(|data: &[u8]| {
    if let Ok(px) = decode_png(data) {
        assert_eq!(px.len(), PIXEL_COUNT);
        assert_eq!(decode_png(&encode_png(&px).unwrap()).unwrap(), px);
    }
});
