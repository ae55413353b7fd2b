#![no_main]
use libfuzzer_sys::fuzz_target;
use pgfedsplit::prototypes::PrototypeStore;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(store) = PrototypeStore::parse_snapshot(text) {
            let _ = store.export_snapshot();
        }
    }
});
