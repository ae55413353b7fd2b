#![no_main]
use libfuzzer_sys::fuzz_target;
use pgfedsplit::codec::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let _ = ckpt.encode();
    }
});
