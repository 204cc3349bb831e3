//! Vocabulary JSON parsing must never panic, and any vocabulary it accepts
//! must serialize back to a form that parses to the same table.

#![no_main]

use libfuzzer_sys::fuzz_target;

use latentrag::vocab::Vocabulary;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(vocab) = Vocabulary::from_json(text) else { return };
    let reparsed = Vocabulary::from_json(&vocab.to_json()).expect("re-emitted JSON must parse");
    assert_eq!(reparsed.len(), vocab.len());
    assert_eq!(reparsed.m(), vocab.m());
    assert_eq!(reparsed.n(), vocab.n());
});
