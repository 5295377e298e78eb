// SPDX-License-Identifier: MIT OR Apache-2.0

#![no_main]

use libfuzzer_sys::fuzz_target;

use numalign::analysis::{read_csv, CurveRow, IiaRow, ReportKind};

fuzz_target!(|data: &[u8]| {
    let _ = read_csv::<IiaRow, _>(ReportKind::Iia, data);
    let _ = read_csv::<CurveRow, _>(ReportKind::Curves, data);
});
