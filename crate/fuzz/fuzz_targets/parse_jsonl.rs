#![no_main]

use libfuzzer_sys::fuzz_target;
use mcqa_core::data::{parse_dataset, LoadOptions};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok((instances, vocab)) = parse_dataset(text, None, LoadOptions::default()) {
        for inst in &instances {
            assert!(inst.gold < inst.answers.len());
            assert!(inst.question.iter().chain(inst.answers.iter().flatten()).all(|&t| (t as usize) < vocab.len()));
        }
    }
});
