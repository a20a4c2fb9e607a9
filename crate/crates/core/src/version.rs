//! Build identification: toolkit version, schema versions and a fingerprint
//! of the metric parameters.

use sha2::{Digest, Sha256};

use crate::corpus::SCHEMA_VERSION;
use crate::metrics::MetricParams;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Version of the pipeline config file format.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// SHA-256 over the canonical JSON of the metric parameters, hex, first 16 chars.
pub fn metric_fingerprint(params: &MetricParams) -> String {
    let canonical = serde_json::to_string(params).expect("params serialize");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn version_info() -> String {
    format!(
        "medforge {TOOLKIT_VERSION}\nschema_version {SCHEMA_VERSION}\nconfig_schema_version {CONFIG_SCHEMA_VERSION}\nmetric_fingerprint {}",
        metric_fingerprint(&MetricParams::default())
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn info_and_fingerprint() {
        let v = version_info();
        assert!(v.contains("schema_version 1"));
        assert_eq!(v, version_info());
        let base = metric_fingerprint(&MetricParams::default());
        let changed = metric_fingerprint(&MetricParams {
            meteor_gamma: 0.4,
            ..Default::default()
        });
        assert_ne!(base, changed);
        assert_eq!(base.len(), 16);
    }
}
