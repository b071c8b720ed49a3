#![no_main]

use libfuzzer_sys::fuzz_target;
use verdrift::synth::{read_emission_log, write_emission_log};

fuzz_target!(|data: &[u8]| {
    if let Ok(log) = read_emission_log(data) {
        let mut buf = Vec::new();
        write_emission_log(&mut buf, &log).unwrap();
        assert_eq!(read_emission_log(&buf[..]).unwrap(), log);
    }
});
