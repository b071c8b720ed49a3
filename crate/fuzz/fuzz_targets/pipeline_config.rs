#![no_main]

use libfuzzer_sys::fuzz_target;
use verdrift::pipeline::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<PipelineConfig>(data) {
        if cfg.validate().is_ok() {
            let _ = cfg.run_seeds(cfg.runs);
            let _ = cfg.train_config(&cfg.run_seeds(1));
        }
    }
});
