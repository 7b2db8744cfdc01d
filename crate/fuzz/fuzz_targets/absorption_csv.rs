#![no_main]

use libfuzzer_sys::fuzz_target;
use thz_chanest::AbsorptionTable;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(table) = AbsorptionTable::from_csv_str(text) else { return };
    let pts = table.points();
    assert!(!pts.is_empty());
    assert!(pts.windows(2).all(|w| w[0].0 < w[1].0));
    for f in [0.0, pts[0].0, pts[pts.len() - 1].0, 1e12, f64::MAX] {
        let k = table.at(f);
        assert!(k.is_finite() && k >= 0.0);
    }
});
