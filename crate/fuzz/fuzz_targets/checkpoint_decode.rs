//! Checkpoint decoding must never panic on arbitrary bytes, and any archive
//! it accepts must re-encode to the identical byte sequence.

#![no_main]

use libfuzzer_sys::fuzz_target;

use latentrag::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(checkpoint) = Checkpoint::from_bytes(data) else { return };
    let bytes = checkpoint.to_bytes();
    let redecoded = Checkpoint::from_bytes(&bytes).expect("re-encoded archive must decode");
    assert_eq!(redecoded.to_bytes(), bytes, "encoding must be canonical");
    assert_eq!(redecoded.content_hash(), checkpoint.content_hash());
});
