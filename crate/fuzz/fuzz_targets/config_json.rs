#![no_main]

use cbct4d_core::PipelineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = PipelineConfig::from_json(data) {
        let _ = cfg.binning();
        assert_eq!(PipelineConfig::from_json(cfg.to_json().as_bytes()).unwrap(), cfg);
    }
});
