use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance block embedded in every JSON output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    /// SHA-256 over the command, its effective configuration and the digests
    /// of every input file.
    pub config_digest: String,
    pub seed: Option<u64>,
    pub tool_version: &'static str,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &'static str, config: &C, inputs: &[&[u8]], seed: Option<u64>) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(config).expect("config serializes"));
        for input in inputs {
            h.update([0]);
            h.update(Sha256::digest(input));
        }
        Self {
            command,
            config_digest: hex::encode(h.finalize()),
            seed,
            tool_version: env!("CARGO_PKG_VERSION"),
            timestamp: timestamp(),
        }
    }
}

/// RFC 3339 UTC time, or the instant given by `SOURCE_DATE_EPOCH`.
fn timestamp() -> String {
    let fixed = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0));
    fixed
        .unwrap_or_else(chrono::Utc::now)
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_config_and_inputs() {
        let a = RunManifest::new("estimate", &[1, 2], &[b"x"], Some(1));
        let b = RunManifest::new("estimate", &[1, 2], &[b"x"], Some(1));
        let c = RunManifest::new("estimate", &[1, 3], &[b"x"], Some(1));
        let d = RunManifest::new("estimate", &[1, 2], &[b"y"], Some(1));
        assert_eq!(a.config_digest, b.config_digest);
        assert_ne!(a.config_digest, c.config_digest);
        assert_ne!(a.config_digest, d.config_digest);
        assert_eq!(a.config_digest.len(), 64);
    }
}
