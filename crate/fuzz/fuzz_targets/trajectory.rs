#![no_main]

use libfuzzer_sys::fuzz_target;
use sgnn_core::scenes::Trajectory;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Trajectory::from_bytes(data) {
        let bytes = t.to_bytes().expect("parsed trajectory serializes");
        let again = Trajectory::from_bytes(&bytes).expect("reparse");
        assert_eq!(again.to_bytes().expect("reserialize"), bytes);
    }
});
