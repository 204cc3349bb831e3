//! Teacher-trajectory JSONL parsing must never panic, and accepted files
//! must survive a render → reparse round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;

use latentrag::formats::{parse_jsonl, render_jsonl, TEACHER_ARTIFACT};
use latentrag::synth::TeacherTrajectory;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(file) = parse_jsonl::<TeacherTrajectory>(TEACHER_ARTIFACT, text) else { return };
    let rendered = render_jsonl(TEACHER_ARTIFACT, &file.config_hash, &file.items)
        .expect("accepted teacher file must re-render");
    let reparsed = parse_jsonl::<TeacherTrajectory>(TEACHER_ARTIFACT, &rendered)
        .expect("re-rendered teacher file must reparse");
    assert_eq!(reparsed.items.len(), file.items.len());
    assert_eq!(reparsed.config_hash, file.config_hash);
});
