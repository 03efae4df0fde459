#![no_main]

use libfuzzer_sys::fuzz_target;
use sgnn_core::scenes::SceneConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = SceneConfig::parse(text) {
        let text = cfg.to_text();
        assert_eq!(SceneConfig::parse(&text).expect("reparse").to_text(), text);
    }
});
