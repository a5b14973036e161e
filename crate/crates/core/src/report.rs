//! Verification outcomes, atomic file output and configuration hashing.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// How a check's measured value is compared with its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    AtMost,
    AtLeast,
    Skipped,
}

/// One verified property: what was measured, against which threshold, and
/// whether it passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub samples: usize,
    pub value: f64,
    pub threshold: f64,
    pub comparison: Comparison,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<String>,
}

impl CheckOutcome {
    /// Passes when `value ≤ threshold`.
    pub fn at_most(name: impl Into<String>, samples: usize, value: f64, threshold: f64) -> Self {
        Self::build(name, samples, value, threshold, Comparison::AtMost)
    }

    /// Passes when `value ≥ threshold`.
    pub fn at_least(name: impl Into<String>, samples: usize, value: f64, threshold: f64) -> Self {
        Self::build(name, samples, value, threshold, Comparison::AtLeast)
    }

    pub fn skipped(name: impl Into<String>, reason: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            samples: 0,
            value: 0.0,
            threshold: 0.0,
            comparison: Comparison::Skipped,
            passed: true,
            witness: Some(reason.into()),
        }
    }

    fn build(
        name: impl Into<String>,
        samples: usize,
        value: f64,
        threshold: f64,
        comparison: Comparison,
    ) -> Self {
        let passed = match comparison {
            Comparison::AtMost => value <= threshold,
            Comparison::AtLeast => value >= threshold,
            Comparison::Skipped => true,
        };
        CheckOutcome {
            name: name.into(),
            samples,
            value,
            threshold,
            comparison,
            passed,
            witness: None,
        }
    }

    pub fn with_witness(mut self, witness: Option<String>) -> Self {
        if !self.passed {
            self.witness = witness;
        }
        self
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        match self.comparison {
            Comparison::Skipped => format!(
                "{verdict} {} (skipped: {})",
                self.name,
                self.witness.as_deref().unwrap_or("")
            ),
            Comparison::AtMost | Comparison::AtLeast => {
                let op = if self.comparison == Comparison::AtMost { "<=" } else { ">=" };
                let mut s = format!(
                    "{verdict} {}: {:.6e} {op} {:.6e} (n = {})",
                    self.name, self.value, self.threshold, self.samples
                );
                if let Some(w) = &self.witness {
                    s.push_str(&format!(" witness: {w}"));
                }
                s
            }
        }
    }
}

/// Named list of outcomes with provenance of the run that produced them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config_hash: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn new(config_hash: String, seed: u64, checks: Vec<CheckOutcome>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        SuiteReport {
            config_hash,
            seed,
            passed,
            checks,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("suite report serializes")
    }
}

/// SHA-256 of the configuration text, hex encoded.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Writes `contents` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_flag_follows_comparison() {
        assert!(CheckOutcome::at_most("a", 1, 1.0, 1.0).passed);
        assert!(!CheckOutcome::at_most("a", 1, 1.1, 1.0).passed);
        assert!(CheckOutcome::at_least("b", 1, 0.9, 0.8).passed);
        assert!(!CheckOutcome::at_least("b", 1, f64::NAN, 0.8).passed);
        let s = SuiteReport::new("h".into(), 1, vec![CheckOutcome::at_most("a", 1, 2.0, 1.0)]);
        assert!(!s.passed);
        assert!(s.to_toml().contains("passed = false"));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("abc").len(), 64);
        assert_eq!(config_hash("abc"), config_hash("abc"));
        assert_ne!(config_hash("abc"), config_hash("abd"));
    }

    proptest::proptest! {
        #[test]
        fn pass_flag_matches_threshold(v in -1e3..1e3f64, t in -1e3..1e3f64) {
            proptest::prop_assert_eq!(CheckOutcome::at_most("a", 1, v, t).passed, v <= t);
            proptest::prop_assert_eq!(CheckOutcome::at_least("b", 1, v, t).passed, v >= t);
        }
    }
}
