#![no_main]

use cbct4d_core::Dvf;
use libfuzzer_sys::fuzz_target;

// Input: u16 LE header length, sidecar JSON, then the payload bytes split
// into three equal components.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let n = u16::from_le_bytes([data[0], data[1]]) as usize;
    let rest = &data[2..];
    let (header, payload) = rest.split_at(n.min(rest.len()));
    let third = payload.len() / 3;
    let (a, bc) = payload.split_at(third);
    let (b, c) = bc.split_at(third);
    let _ = Dvf::decode(header, [a, b, c]);
});
