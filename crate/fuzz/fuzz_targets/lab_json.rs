#![no_main]

use libfuzzer_sys::fuzz_target;
use verdrift::synth::LabConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(lab) = LabConfig::from_json(text) {
        if let Some(id) = lab.device_ids().first() {
            let _ = lab.profile_for(id, lab.change_day);
        }
        assert_eq!(LabConfig::from_json(&lab.to_json()).unwrap(), lab);
    }
});
