#![no_main]
use g3dk_core::synthscene::{decode_frame_blob, encode_frame_blob};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = decode_frame_blob(data) {
        assert_eq!(encode_frame_blob(&frame), data);
    }
});
