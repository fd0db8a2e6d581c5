#![no_main]

use cbct4d_core::ConeBeamGeometry;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = ConeBeamGeometry::from_json(data) {
        let back = ConeBeamGeometry::from_json(g.to_json().as_bytes()).unwrap();
        assert_eq!(back, g);
    }
});
