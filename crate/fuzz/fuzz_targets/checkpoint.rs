#![no_main]
use g3dk_core::diffkit::{read_checkpoint, write_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = read_checkpoint(data) {
        let again = read_checkpoint(&write_checkpoint(&entries)).expect("re-encoded checkpoint parses");
        assert_eq!(entries.len(), again.len());
        for ((na, ta), (nb, tb)) in entries.iter().zip(&again) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &g3dk_core::diffkit::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }
});
