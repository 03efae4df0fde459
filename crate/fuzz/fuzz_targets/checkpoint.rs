#![no_main]

use libfuzzer_sys::fuzz_target;
use sgnn_core::math::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        let bytes = c.to_bytes().expect("parsed checkpoint serializes");
        let again = Checkpoint::from_bytes(&bytes).expect("reparse");
        assert_eq!(again.to_bytes().expect("reserialize"), bytes);
    }
});
