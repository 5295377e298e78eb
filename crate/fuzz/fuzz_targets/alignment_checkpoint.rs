// SPDX-License-Identifier: MIT OR Apache-2.0

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rec) = numalign::alignment::read_alignment(data) {
        let d = rec.alignment.dim();
        let h = numalign::autodiff::Matrix::zeros((1, d));
        let _ = rec.alignment.interchange(&h, &h, &rec.partition);
    }
});
