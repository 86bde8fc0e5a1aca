#![no_main]

use libfuzzer_sys::fuzz_target;
use mcqa_core::checkpoint::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok((model, vocab)) = decode_checkpoint(data) {
        // Anything accepted must survive a re-encode unchanged.
        let bytes = encode_checkpoint(&model, vocab.as_ref()).expect("accepted model re-encodes");
        let (again, _) = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
        assert!(again == model);
    }
});
