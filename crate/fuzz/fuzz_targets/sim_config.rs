#![no_main]
use libfuzzer_sys::fuzz_target;

use fedmtl::fedsim::SimConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<SimConfig>(data) {
        let _ = cfg.validate();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: SimConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
});
