//! QA JSONL parsing must never panic, and accepted files must survive a
//! render → reparse round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;

use latentrag::formats::{parse_jsonl, render_jsonl, QA_ARTIFACT};
use latentrag::synth::QAItem;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(file) = parse_jsonl::<QAItem>(QA_ARTIFACT, text) else { return };
    let rendered = render_jsonl(QA_ARTIFACT, &file.config_hash, &file.items)
        .expect("accepted QA file must re-render");
    let reparsed =
        parse_jsonl::<QAItem>(QA_ARTIFACT, &rendered).expect("re-rendered QA file must reparse");
    assert_eq!(reparsed.items.len(), file.items.len());
    assert_eq!(reparsed.config_hash, file.config_hash);
});
