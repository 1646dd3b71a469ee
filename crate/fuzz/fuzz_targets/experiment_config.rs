#![no_main]

use libfuzzer_sys::fuzz_target;
use pcal_core::experiment::ExperimentConfig;

fuzz_target!(|text: &str| {
    if let Ok(config) = ExperimentConfig::from_toml(text) {
        let again = ExperimentConfig::from_toml(&config.to_toml()).unwrap();
        assert_eq!(again, config);
    }
});
