use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::convhead::HeadParams;
use crate::error::Result;
use crate::geometry::write_atomic;
use crate::metrics::TrackingReport;
use crate::VERSION;

/// The JSON document every command emits. Metric groups a command does not
/// produce are omitted.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EvalReport {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ape: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pcdp: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pck: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose_acc: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tracking: Option<TrackingReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_count: Option<usize>,
    /// Command-specific extras.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
    pub config_hash: String,
    pub version: String,
}

impl EvalReport {
    pub fn new(command: &str, config: &Value) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash(config),
            version: VERSION.to_string(),
            ..Self::default()
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Write atomically to `path`, or print to stdout when `None`.
    pub fn emit(&self, path: Option<&Path>) -> Result<()> {
        let text = self.to_json();
        match path {
            Some(p) => write_atomic(p, text.as_bytes()),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

/// SHA-256 of the canonical (sorted-key, compact) JSON form of `config`.
pub fn config_hash(config: &Value) -> String {
    // serde_json maps are ordered by key, so this rendering is canonical.
    let canon = serde_json::to_string(config).expect("config serializes");
    hex(&Sha256::digest(canon.as_bytes()))
}

/// Stable description of a head for config hashing. Every identity head
/// hashes the same, so an untouched zero-init head reproduces the baseline
/// report byte for byte.
pub fn head_fingerprint(head: Option<&HeadParams>) -> String {
    match head {
        None => "identity".into(),
        Some(h) if h.is_identity() => "identity".into(),
        Some(h) => hex(&Sha256::digest(h.to_bytes())),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
