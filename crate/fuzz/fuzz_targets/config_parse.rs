//! Run-config text parsing must never panic, and any config it accepts must
//! survive a canonicalize → reparse round trip with the same hash.

#![no_main]

use libfuzzer_sys::fuzz_target;

use latentrag::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = RunConfig::parse(text) else { return };
    let canonical = cfg.canonical();
    let reparsed = RunConfig::parse(&canonical).expect("canonical form must reparse");
    assert_eq!(reparsed.canonical(), canonical, "canonicalization must be a fixed point");
    assert_eq!(reparsed.hash(), cfg.hash(), "hash must survive the round trip");
});
