#![no_main]

use std::path::Path;

use gracaps::dataset::parse_idx_labels;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_idx_labels(data, Path::new("fuzz"));
});
