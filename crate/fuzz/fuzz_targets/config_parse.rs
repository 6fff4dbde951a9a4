#![no_main]

use dod_core::io::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = RunConfig::from_toml(text) else { return };
    let _ = cfg.validate();
    let back = RunConfig::from_toml(&cfg.to_toml()).expect("resolved config parses");
    assert_eq!(back.to_toml(), cfg.to_toml());
});
