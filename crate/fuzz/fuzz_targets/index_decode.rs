//! Corpus-index decoding must never panic on arbitrary bytes, and any index
//! it accepts must re-encode to the identical byte sequence.

#![no_main]

use libfuzzer_sys::fuzz_target;

use latentrag::retrieval::CorpusIndex;

fuzz_target!(|data: &[u8]| {
    let Ok(index) = CorpusIndex::from_bytes(data) else { return };
    let bytes = index.to_bytes();
    let redecoded = CorpusIndex::from_bytes(&bytes).expect("re-encoded index must decode");
    assert_eq!(redecoded.to_bytes(), bytes, "encoding must be canonical");
    assert_eq!(redecoded.len(), index.len());
});
