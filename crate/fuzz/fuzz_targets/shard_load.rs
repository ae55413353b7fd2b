#![no_main]
use libfuzzer_sys::fuzz_target;
use pgfedsplit::data::{dump_shards, load_shards};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(shards) = load_shards(text, 10) {
            let again = load_shards(&dump_shards(&shards), 10).expect("dump must reload");
            assert_eq!(again.len(), shards.len());
        }
    }
});
