#![no_main]
use libfuzzer_sys::fuzz_target;

use fedmtl_cli::ExperimentSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(spec) = ExperimentSpec::from_json(text) else {
        return;
    };
    // planning must respect the cap without allocating the whole product first
    if let Ok(plans) = spec.plan() {
        assert!(plans.len() <= spec.sweep_cap);
        assert_eq!(Some(plans.len()), spec.run_count());
    }
    assert_eq!(ExperimentSpec::from_value(spec.to_value()).unwrap(), spec);
});
