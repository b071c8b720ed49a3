#![no_main]

use libfuzzer_sys::fuzz_target;
use verdrift::capture::{parse_capture, DeviceSelector};

fuzz_target!(|data: &[u8]| {
    let sel = DeviceSelector::Mac([0x02, 0x1a, 0x0c, 0x00, 0x00, 0x0c]);
    if let Ok(cap) = parse_capture(data, &sel) {
        for p in cap.packets() {
            p.validate().expect("parsed records are valid");
        }
    }
    let _ = parse_capture(data, &DeviceSelector::Ipv4([192, 168, 1, 32].into()));
});
