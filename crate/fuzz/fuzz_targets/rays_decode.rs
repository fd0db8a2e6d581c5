#![no_main]

use cbct4d_core::io::encode_payload;
use cbct4d_core::RayVolume;
use libfuzzer_sys::fuzz_target;

// Input: u16 LE header length, sidecar JSON, raw payload.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let n = u16::from_le_bytes([data[0], data[1]]) as usize;
    let rest = &data[2..];
    let (header, payload) = rest.split_at(n.min(rest.len()));
    if let Ok(v) = RayVolume::decode(header, payload) {
        // decoded data re-encodes to the same bytes
        assert_eq!(encode_payload(&v.data).unwrap(), payload);
    }
});
