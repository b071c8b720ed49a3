#![no_main]

use libfuzzer_sys::fuzz_target;
use verdrift::flow::DeviceDayStats;

fuzz_target!(|data: &[u8]| {
    if let Ok(stats) = DeviceDayStats::read_csv(data, "fuzz", 1) {
        let mut buf = Vec::new();
        stats.write_csv(&mut buf).unwrap();
        let back = DeviceDayStats::read_csv(&buf[..], "fuzz", 1).unwrap();
        assert_eq!(back.per_window.len(), stats.per_window.len());
    }
});
