#![no_main]

use libfuzzer_sys::fuzz_target;
use thz_chanest::harness::Scenario;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(scn) = Scenario::from_json_str(text, None) else { return };
    assert!(scn.realizations > 0 && !scn.sweep.is_empty());
    for i in 0..scn.sweep.len() {
        scn.sweep.apply(&scn.base, i).validate().expect("validated scenario has valid points");
        let _ = scn.sweep.label(i);
    }
});
