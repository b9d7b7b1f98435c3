#![no_main]

use asymdsd_core::data_io::{decode_cloud, encode_cloud};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cloud) = decode_cloud(data) {
        // Anything accepted must re-encode to the same bytes.
        assert_eq!(encode_cloud(&cloud), data);
    }
});
