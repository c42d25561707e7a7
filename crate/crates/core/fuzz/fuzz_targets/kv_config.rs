#![no_main]

use gracaps::kv::Document;
use gracaps::ModelConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(doc) = Document::parse(text) else { return };
    let again = Document::parse(&doc.to_string()).expect("rendered documents parse");
    assert_eq!(again, doc);
    if let Ok(cfg) = ModelConfig::from_kv(&doc) {
        let _ = cfg.validate();
    }
});
