#![no_main]
use g3dk_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = RunConfig::parse(text) {
        let again = RunConfig::parse(&cfg.to_text()).expect("printed config parses");
        assert_eq!(cfg, again);
    }
});
