#![no_main]

use libfuzzer_sys::fuzz_target;
use sgnn_core::math::Checkpoint;
use sgnn_core::model::Model;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        let _ = Model::from_checkpoint(&c);
    }
});
