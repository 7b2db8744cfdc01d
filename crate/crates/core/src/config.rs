//! Scenario constants and their JSON / CSV loaders.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Which sub-solver drives the delay-selector update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DelaySolver {
    /// Box-constrained LASSO followed by thresholding.
    #[default]
    Lasso,
    /// Greedy OMP with `L_p` atoms per antenna pair.
    Omp,
}

/// All scenario constants.
///
/// JSON field names follow the usual symbol names (`N`, `M`, `f_c`, ...).
/// Optional fields fall back to the desk-scale defaults of [`SystemConfig::default`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Transmit antennas.
    #[serde(rename = "N")]
    pub n_tx: usize,
    /// Receive antennas.
    #[serde(rename = "M")]
    pub n_rx: usize,
    /// Carrier frequency (Hz).
    pub f_c: f64,
    /// Bandwidth (Hz).
    #[serde(rename = "W")]
    pub bandwidth: f64,
    /// Sampling period; derived as `1/(2W)`. Accepted on input only if consistent.
    #[serde(rename = "T_s", default, skip_serializing_if = "Option::is_none")]
    pub sampling_period: Option<f64>,
    /// Training length in slots.
    #[serde(rename = "T")]
    pub t_len: usize,
    /// Resolvable paths.
    #[serde(rename = "L_p")]
    pub n_paths: usize,
    /// Delay taps per selector block (lags `0..K`).
    #[serde(rename = "K")]
    pub k_max: usize,
    /// Channel filter taps; defaults to `K`.
    #[serde(rename = "L_t", default)]
    pub l_taps: Option<usize>,
    /// TX-RX distance (m).
    #[serde(default = "defaults::distance")]
    pub d_tx_rx: f64,
    /// Per-path pathloss exponents; defaults to `[2, 3, 3, ...]`.
    #[serde(default)]
    pub xi: Option<Vec<f64>>,
    /// Molecular absorption coefficient at the carrier.
    #[serde(default = "defaults::kappa")]
    pub kappa_abs: f64,
    /// Optional two-column CSV (frequency_hz, kappa); overrides `kappa_abs` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absorption_table: Option<PathBuf>,
    /// Transmit power (dBm). Informational: SNR is referenced to received power.
    #[serde(rename = "P_t", default = "defaults::tx_power")]
    pub p_t: f64,
    /// SNR in dB; `null` means noiseless.
    #[serde(default = "defaults::snr")]
    pub snr_db: Option<f64>,
    /// ADMM penalty.
    #[serde(default = "defaults::rho")]
    pub rho: f64,
    /// Delay-selector sparsity weight; `null` uses `0.1 * ||A^H b||_inf`.
    #[serde(default)]
    pub lambda_e: Option<f64>,
    /// Beamspace sparsity weight; `null` picks a noise-scaled default.
    #[serde(default)]
    pub lambda_z: Option<f64>,
    /// ADMM iteration cap.
    #[serde(rename = "I_max", default = "defaults::i_max")]
    pub i_max: usize,
    /// Binarization threshold.
    #[serde(default = "defaults::thr")]
    pub thr: f64,
    /// Position-noise variance in dB; `null` means exact positions.
    #[serde(default)]
    pub sigma_p2: Option<f64>,
    /// RNG seed.
    #[serde(default)]
    pub seed: u64,
    /// Delay-selector solver.
    #[serde(default)]
    pub e_solver: DelaySolver,
    /// Largest dense pilot matrix (entries) that may be materialized.
    #[serde(default = "defaults::phi_cap")]
    pub phi_cap: usize,

    /// Loaded contents of `absorption_table`, when given.
    #[serde(skip)]
    pub absorption: Option<AbsorptionTable>,
}

mod defaults {
    pub fn distance() -> f64 {
        1.0
    }
    pub fn kappa() -> f64 {
        0.5
    }
    pub fn tx_power() -> f64 {
        10.0
    }
    pub fn snr() -> Option<f64> {
        Some(30.0)
    }
    pub fn rho() -> f64 {
        6.0
    }
    pub fn i_max() -> usize {
        50
    }
    pub fn thr() -> f64 {
        0.5
    }
    pub fn phi_cap() -> usize {
        1 << 24
    }
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            n_tx: 8,
            n_rx: 8,
            f_c: 150e9,
            bandwidth: 10e9,
            sampling_period: None,
            t_len: 24,
            n_paths: 3,
            k_max: 8,
            l_taps: None,
            d_tx_rx: defaults::distance(),
            xi: None,
            kappa_abs: defaults::kappa(),
            absorption_table: None,
            p_t: defaults::tx_power(),
            snr_db: defaults::snr(),
            rho: defaults::rho(),
            lambda_e: None,
            lambda_z: None,
            i_max: defaults::i_max(),
            thr: defaults::thr(),
            sigma_p2: None,
            seed: 0,
            e_solver: DelaySolver::Lasso,
            phi_cap: defaults::phi_cap(),
            absorption: None,
        }
    }
}

impl SystemConfig {
    /// Parses and validates a JSON document. A relative `absorption_table` path is
    /// resolved against `base_dir` when given.
    pub fn from_json_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let cfg: SystemConfig = serde_json::from_str(text)?;
        cfg.resolve(base_dir)
    }

    /// Loads the absorption table named in the config (relative paths against
    /// `base_dir`) and validates.
    pub fn resolve(mut self, base_dir: Option<&Path>) -> Result<Self> {
        if let Some(table) = self.absorption_table.clone() {
            let path = match base_dir {
                Some(dir) if table.is_relative() => dir.join(table),
                _ => table,
            };
            let csv_text = std::fs::read_to_string(&path)?;
            self.absorption = Some(AbsorptionTable::from_csv_str(&csv_text)?);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text, path.parent())
    }

    pub fn with_absorption_table(mut self, table: AbsorptionTable) -> Self {
        self.absorption = Some(table);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_tx == 0 || self.n_rx == 0 {
            return bad("antenna counts must be >= 1".into());
        }
        if self.n_paths == 0 || self.t_len == 0 || self.k_max == 0 {
            return bad("L_p, T and K must be >= 1".into());
        }
        if self.l_taps == Some(0) {
            return bad("L_t must be >= 1".into());
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return bad(format!("bandwidth must be positive, got {}", self.bandwidth));
        }
        if !(self.f_c.is_finite() && self.f_c > 0.0) {
            return bad(format!("carrier must be positive, got {}", self.f_c));
        }
        if let Some(ts) = self.sampling_period {
            let derived = 1.0 / (2.0 * self.bandwidth);
            if !((ts - derived).abs() <= 1e-12 * derived) {
                return bad(format!("T_s = {ts} disagrees with 1/(2W) = {derived}"));
            }
        }
        if !(self.d_tx_rx.is_finite() && self.d_tx_rx > 0.0) {
            return bad(format!("d_tx_rx must be positive, got {}", self.d_tx_rx));
        }
        if !(self.kappa_abs.is_finite() && self.kappa_abs >= 0.0) {
            return bad(format!("kappa_abs must be >= 0, got {}", self.kappa_abs));
        }
        if let Some(xi) = &self.xi {
            if xi.len() != self.n_paths {
                return bad(format!("xi has {} entries, L_p = {}", xi.len(), self.n_paths));
            }
            if xi.iter().any(|x| !x.is_finite()) {
                return bad("xi entries must be finite".into());
            }
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        for (name, v) in [("lambda_e", self.lambda_e), ("lambda_z", self.lambda_z)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return bad(format!("{name} must be >= 0, got {v}"));
                }
            }
        }
        if !(self.thr > 0.0 && self.thr < 1.0) {
            return bad(format!("thr must lie in (0,1), got {}", self.thr));
        }
        if let Some(s) = self.snr_db {
            if !s.is_finite() {
                return bad("snr_db must be finite or null".into());
            }
        }
        if let Some(s) = self.sigma_p2 {
            if !s.is_finite() {
                return bad("sigma_p2 must be finite or null".into());
            }
        }
        if !self.p_t.is_finite() {
            return bad("P_t must be finite".into());
        }
        Ok(())
    }

    /// `1 / (2W)`.
    pub fn t_s(&self) -> f64 {
        1.0 / (2.0 * self.bandwidth)
    }

    pub fn l_t(&self) -> usize {
        self.l_taps.unwrap_or(self.k_max)
    }

    /// Carrier wavelength.
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.f_c
    }

    /// Pathloss exponent of path `ell` (0-based; path 0 is the LoS path).
    pub fn xi(&self, ell: usize) -> f64 {
        match &self.xi {
            Some(v) => v[ell],
            None if ell == 0 => 2.0,
            None => 3.0,
        }
    }

    /// Absorption coefficient at the carrier, from the table when one is loaded.
    pub fn kappa(&self) -> f64 {
        match &self.absorption {
            Some(table) => table.at(self.f_c),
            None => self.kappa_abs,
        }
    }

    /// `sigma_p2` converted to a linear variance (0 when positions are exact).
    pub fn position_noise_var(&self) -> f64 {
        self.sigma_p2.map_or(0.0, |db| 10f64.powf(db / 10.0))
    }

    /// Number of (m, n, l) triples, i.e. the column count of `H`.
    pub fn n_triples(&self) -> usize {
        self.n_rx * self.n_tx * self.n_paths
    }
}

/// Piecewise-linear frequency -> absorption coefficient table.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorptionTable {
    points: Vec<(f64, f64)>,
}

impl AbsorptionTable {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Parse("absorption table is empty".into()));
        }
        for &(f, k) in &points {
            if !f.is_finite() || !k.is_finite() {
                return Err(Error::Parse("non-finite entry in absorption table".into()));
            }
            if k < 0.0 {
                return Err(Error::Parse(format!("negative absorption coefficient {k}")));
            }
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Parse("duplicate frequency in absorption table".into()));
        }
        Ok(Self { points })
    }

    /// Parses `frequency_hz,kappa` rows. A leading non-numeric row is treated as a header;
    /// blank lines and `#` comments are skipped.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut points = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            if record.iter().all(|f| f.is_empty()) {
                continue;
            }
            if record.len() != 2 {
                return Err(Error::Parse(format!(
                    "row {}: expected 2 columns, found {}",
                    row + 1,
                    record.len()
                )));
            }
            let parsed = (record[0].parse::<f64>(), record[1].parse::<f64>());
            match parsed {
                (Ok(f), Ok(k)) => points.push((f, k)),
                _ if row == 0 => continue,
                _ => return Err(Error::Parse(format!("row {}: not numeric", row + 1))),
            }
        }
        Self::new(points)
    }

    /// Linear interpolation, clamped to the end values outside the table.
    pub fn at(&self, f: f64) -> f64 {
        let p = &self.points;
        if f <= p[0].0 {
            return p[0].1;
        }
        if f >= p[p.len() - 1].0 {
            return p[p.len() - 1].1;
        }
        let i = p.partition_point(|&(x, _)| x <= f);
        let (f0, k0) = p[i - 1];
        let (f1, k1) = p[i];
        // Halved so that tables spanning most of the f64 range do not overflow.
        let w = (0.5 * f - 0.5 * f0) / (0.5 * f1 - 0.5 * f0);
        k0 + (k1 - k0) * w
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_period_is_half_inverse_bandwidth() {
        let cfg = SystemConfig::default();
        assert_eq!(cfg.t_s(), 1.0 / (2.0 * 10e9));
        assert!((cfg.t_s() - 50e-12).abs() < 1e-24);
    }

    #[test]
    fn default_pathloss_exponents() {
        let cfg = SystemConfig::default();
        assert_eq!(cfg.xi(0), 2.0);
        assert_eq!(cfg.xi(1), 3.0);
        assert_eq!(cfg.xi(2), 3.0);
    }

    #[test]
    fn json_round_trip_uses_symbol_names() {
        let cfg = SystemConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        for key in ["\"N\"", "\"M\"", "\"L_p\"", "\"I_max\"", "\"P_t\"", "\"W\""] {
            assert!(text.contains(key), "{key} missing from {text}");
        }
        let back = SystemConfig::from_json_str(&text, None).unwrap();
        assert_eq!(back.n_tx, cfg.n_tx);
        assert_eq!(back.snr_db, cfg.snr_db);
    }

    #[test]
    fn minimal_json_fills_defaults() {
        let cfg = SystemConfig::from_json_str(
            r#"{"N": 4, "M": 2, "f_c": 1.5e11, "W": 1e10, "T": 12, "L_p": 2, "K": 8}"#,
            None,
        )
        .unwrap();
        assert_eq!(cfg.l_t(), 8);
        assert_eq!(cfg.rho, 6.0);
        assert_eq!(cfg.snr_db, Some(30.0));
        assert_eq!(cfg.position_noise_var(), 0.0);
    }

    #[test]
    fn rejects_inconsistent_sampling_period() {
        let err = SystemConfig::from_json_str(
            r#"{"N": 4, "M": 2, "f_c": 1.5e11, "W": 1e10, "T_s": 1e-9, "T": 12, "L_p": 2, "K": 8}"#,
            None,
        );
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rejects_bad_values() {
        for patch in [
            r#""N": 0"#,
            r#""W": -1"#,
            r#""kappa_abs": -1"#,
            r#""d_tx_rx": 0"#,
            r#""thr": 1.0"#,
            r#""xi": [2]"#,
        ] {
            let base = r#""M": 2, "f_c": 1.5e11, "T": 12, "L_p": 2, "K": 8"#;
            let mut fields = vec![base.to_string(), patch.to_string()];
            if !patch.contains("\"N\"") {
                fields.push(r#""N": 2"#.into());
            }
            if !patch.contains("\"W\"") {
                fields.push(r#""W": 1e10"#.into());
            }
            let text = format!("{{{}}}", fields.join(","));
            assert!(
                SystemConfig::from_json_str(&text, None).is_err(),
                "accepted {text}"
            );
        }
    }

    #[test]
    fn unknown_field_is_an_error() {
        let err = SystemConfig::from_json_str(
            r#"{"N": 2, "M": 2, "f_c": 1.5e11, "W": 1e10, "T": 4, "L_p": 1, "K": 2, "bogus": 1}"#,
            None,
        );
        assert!(err.is_err());
    }

    #[test]
    fn absorption_table_interpolates_and_clamps() {
        let table =
            AbsorptionTable::from_csv_str("frequency_hz,kappa\n100e9,0.2\n200e9,0.6\n").unwrap();
        assert!((table.at(150e9) - 0.4).abs() < 1e-12);
        assert_eq!(table.at(50e9), 0.2);
        assert_eq!(table.at(300e9), 0.6);
    }

    #[test]
    fn absorption_table_survives_extreme_frequencies() {
        let t = AbsorptionTable::new(vec![(-f64::MAX, 1.0), (f64::MAX, 3.0)]).unwrap();
        assert_eq!(t.at(0.0), 2.0);
        assert!(t.at(1e308).is_finite());
    }

    #[test]
    fn absorption_table_rejects_garbage() {
        assert!(AbsorptionTable::from_csv_str("").is_err());
        assert!(AbsorptionTable::from_csv_str("1,2,3\n").is_err());
        assert!(AbsorptionTable::from_csv_str("1,-2\n").is_err());
        assert!(AbsorptionTable::from_csv_str("1,2\n1,3\n").is_err());
        assert!(AbsorptionTable::from_csv_str("1,2\nx,y\n").is_err());
    }

    #[test]
    fn table_overrides_scalar_kappa() {
        let table = AbsorptionTable::new(vec![(100e9, 1.0), (200e9, 3.0)]).unwrap();
        let cfg = SystemConfig::default().with_absorption_table(table);
        assert!((cfg.kappa() - 2.0).abs() < 1e-12);
    }
}
