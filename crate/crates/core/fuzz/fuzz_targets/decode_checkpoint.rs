#![no_main]

use asymdsd_core::tensorfile::TensorTable;
use asymdsd_core::trainer::TrainState;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = TensorTable::decode(data) {
        // Entry order may differ from the input, but re-encoding is stable.
        let bytes = table.encode();
        assert_eq!(TensorTable::decode(&bytes).expect("own encoding decodes").encode(), bytes);
        let _ = TrainState::from_table(&table);
    }
});
