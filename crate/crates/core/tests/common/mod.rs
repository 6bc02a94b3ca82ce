#![allow(dead_code)]

use std::path::Path;

use adcbound::config::RunConfig;

/// The two-pole example: H(z) = (z + 1) / (z (z - 1)), three levels, |q|.
pub fn two_pole_json(d: u32, gamma_lo: f64, gamma_hi: f64, tol: f64) -> String {
    format!(
        r#"{{
  "model": {{"transfer_function": {{"num": [1, 1], "den": [1, -1, 0]}}}},
  "alphabet": [-1.5, 0, 1.5],
  "penalty": "abs",
  "D": {d},
  "search": {{"gamma_lo": {gamma_lo:?}, "gamma_hi": {gamma_hi:?}, "tol_gamma": {tol:?}}}
}}"#
    )
}

pub fn two_pole(d: u32) -> RunConfig {
    RunConfig::from_json(&two_pole_json(d, 0.0, 1.1875, 0.005)).unwrap()
}

pub fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}
