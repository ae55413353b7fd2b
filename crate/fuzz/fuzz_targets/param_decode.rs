#![no_main]
use libfuzzer_sys::fuzz_target;
use pgfedsplit::codec::{decode_linear, decode_mlp, decode_tensors};
use pgfedsplit::tensor::Activation;

fuzz_target!(|data: &[u8]| {
    let _ = decode_tensors(data);
    let _ = decode_linear(data);
    let _ = decode_mlp(data, Activation::Relu);
});
