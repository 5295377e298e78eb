// SPDX-License-Identifier: MIT OR Apache-2.0

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((spec, samples)) = numalign::symbolic::read_interventions(data) {
        let mut buf = Vec::new();
        numalign::symbolic::write_interventions(&spec, &samples, &mut buf).unwrap();
        let (spec2, samples2) = numalign::symbolic::read_interventions(&buf[..]).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(samples, samples2);
    }
});
