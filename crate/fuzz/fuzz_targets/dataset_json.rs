#![no_main]
use libfuzzer_sys::fuzz_target;

use fedmtl::graph::Dataset;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ds) = Dataset::from_json(text) {
        // accepted datasets must satisfy their own invariants
        for s in &ds.samples {
            s.validate(&ds.manifest).unwrap();
            assert_eq!(s.label.len(), ds.manifest.num_tasks);
        }
        assert_eq!(ds.manifest.num_samples, ds.samples.len());
    }
});
