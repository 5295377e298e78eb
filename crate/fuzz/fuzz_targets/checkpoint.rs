// SPDX-License-Identifier: MIT OR Apache-2.0

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = numalign::models::read_checkpoint(data) {
        // an accepted checkpoint is a usable model
        let vocab = ckpt.model.task.vocabulary();
        let tokens = [vocab.bos().unwrap_or(0), vocab.demo_ids()[0]];
        let _ = ckpt.model.logits(&tokens);
    }
});
