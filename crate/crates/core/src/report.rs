//! Machine-readable reports for certification runs and sweeps: CSV for the
//! tabular data, JSON for metadata and verdicts, plot-ready two-column files,
//! atomic writes, and the config hash embedded in every output.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub lib_version: String,
    pub path_desc: String,
    pub grid_desc: String,
    pub error_bar_method: String,
    pub notes: Vec<String>,
}

impl Provenance {
    pub fn new(config_bytes: &[u8], seed: u64) -> Self {
        Provenance {
            config_hash: config_hash(config_bytes),
            seed,
            lib_version: env!("CARGO_PKG_VERSION").to_string(),
            path_desc: String::new(),
            grid_desc: String::new(),
            error_bar_method: "two-level refinement (Richardson)".to_string(),
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail { reason: String },
    Info,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Pass | Verdict::Info)
    }
}

/// Fitted constants of a pointwise bound certification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub sigma: f64,
    pub c: f64,
    pub epsilon: f64,
    pub time_power: f64,
    pub rx_power: f64,
    pub ry_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub coords: Vec<f64>,
    pub value: f64,
    pub error: f64,
    pub flags: Vec<String>,
}

/// One certification run or parameter sweep, reproducible from the recorded
/// seed and config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: String,
    pub axes: Vec<String>,
    pub points: Vec<SweepPoint>,
    pub verdict: Verdict,
    pub fit: Option<FitInfo>,
    pub provenance: Provenance,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.axes.join(","));
        out.push_str(",value,error,flags\n");
        for p in &self.points {
            for c in &p.coords {
                out.push_str(&format!("{c},"));
            }
            out.push_str(&format!("{},{},{}\n", p.value, p.error, p.flags.join(";")));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Plot-ready two-column file: first coordinate vs value.
    pub fn to_xy(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            out.push_str(&format!("{} {}\n", p.coords.first().unwrap_or(&0.0), p.value));
        }
        out
    }

    pub fn write_all(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        atomic_write(&dir.join(format!("{stem}.json")), self.to_json().as_bytes())?;
        atomic_write(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        atomic_write(&dir.join(format!("{stem}.dat")), self.to_xy().as_bytes())?;
        Ok(())
    }
}

/// Comparison of two sweeps on identical axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub axes: Vec<String>,
    pub points: Vec<ComparePoint>,
    pub any_flagged: bool,
    pub max_rel_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparePoint {
    pub coords: Vec<f64>,
    pub rel_diff: f64,
    pub combined_error: f64,
    pub flagged: bool,
}

pub fn config_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Write via a temp file in the same directory, then rename: readers never
/// observe a half-written report.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> SweepReport {
        SweepReport {
            kind: "test".into(),
            axes: vec!["mu".into()],
            points: vec![SweepPoint {
                coords: vec![0.25],
                value: 1.5,
                error: 0.01,
                flags: vec![],
            }],
            verdict: Verdict::Pass,
            fit: None,
            provenance: Provenance::new(b"cfg", 42),
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let a = report().to_json();
        let b = report().to_json();
        assert_eq!(a, b);
        assert_eq!(report().to_csv(), report().to_csv());
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        assert_eq!(config_hash(b"abc"), config_hash(b"abc"));
        assert_ne!(config_hash(b"abc"), config_hash(b"abd"));
        assert_eq!(config_hash(b"abc").len(), 64);
    }

    #[test]
    fn atomic_write_roundtrip() {
        let dir = std::env::temp_dir().join("parakernel-report-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("r.json");
        atomic_write(&p, b"{}").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"{}");
    }
}
