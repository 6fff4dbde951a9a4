#![no_main]

use dod_core::io::Checkpoint;
use libfuzzer_sys::fuzz_target;

// Arbitrary bytes must decode or error, never panic or over-allocate, and
// anything accepted must survive a re-encode unchanged.
fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode();
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        // bytewise, since payloads may hold NaN
        assert_eq!(again.encode(), bytes);
    }
});
