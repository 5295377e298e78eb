// SPDX-License-Identifier: MIT OR Apache-2.0

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = numalign::corpus::read_dataset(data) {
        // anything accepted must survive a round trip unchanged
        let mut buf = Vec::new();
        numalign::corpus::write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(numalign::corpus::read_dataset(&buf[..]).unwrap(), ds);
    }
});
