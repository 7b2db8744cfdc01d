#![no_main]

use libfuzzer_sys::fuzz_target;
use thz_chanest::SystemConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = SystemConfig::from_json_str(text, None) else { return };
    // Anything accepted must survive a round trip and stay valid.
    let again = serde_json::to_string(&cfg).expect("serializable");
    let back = SystemConfig::from_json_str(&again, None).expect("round trip parses");
    assert!((back.t_s() / cfg.t_s() - 1.0).abs() < 1e-12);
    assert!(cfg.t_s() > 0.0 && cfg.t_s().is_finite());
});
