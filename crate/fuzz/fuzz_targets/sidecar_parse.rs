#![no_main]

use cbct4d_core::io::Sidecar;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(sc) = Sidecar::parse(data) {
        let _ = sc.payload_len();
    }
});
