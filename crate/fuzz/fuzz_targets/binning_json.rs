#![no_main]

use cbct4d_core::PhaseBinning;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(b) = PhaseBinning::from_json(data) {
        assert_eq!(b.counts().iter().sum::<usize>(), b.n_views());
        assert_eq!(PhaseBinning::from_json(b.to_json().as_bytes()).unwrap(), b);
    }
});
