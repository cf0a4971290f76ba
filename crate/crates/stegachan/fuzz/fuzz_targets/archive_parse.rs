#![no_main]

use libfuzzer_sys::fuzz_target;
use stegachan::ndgrad::TensorArchive;

fuzz_target!(|data: &[u8]| {
    // Parsing arbitrary bytes must never panic or over-allocate.
    let Ok(archive) = TensorArchive::from_bytes(data) else {
        return;
    };
    // Accepted archives round-trip losslessly.
    let bytes = archive.to_bytes();
    let again = TensorArchive::from_bytes(&bytes).expect("serialized archive parses");
    assert_eq!(again.to_bytes(), bytes);
});
