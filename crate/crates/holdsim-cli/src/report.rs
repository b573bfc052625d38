//! Output writers: CSV tables, JSON reports, and the run manifest.
//!
//! Data files (`points.csv`, `report.json`, `path.csv`) are written with
//! deterministic formatting, so reruns with the same configuration and seed
//! produce byte-identical files; the manifest records a SHA-256 digest of
//! each one. The manifest itself carries wall-clock time and is therefore not
//! byte-stable across runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use holdsim::experiments::{CheckReport, PathDump, RateReport};

use crate::CliError;

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// One data file referenced from the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

/// Run provenance: tool version, verb, seed, timing, the configuration text
/// echoed verbatim, digests of every data file, and a verb-specific summary.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub verb: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub config: String,
    pub files: Vec<FileEntry>,
    pub summary: serde_json::Value,
}

/// Renders the sweep point table with the frozen column set.
pub fn sweep_csv(report: &RateReport) -> String {
    let mut s = String::from("n,epsilon,kappa,metric,mean,stderr,R\n");
    for p in &report.points {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.n, p.epsilon, p.kappa, p.metric, p.mean, p.stderr, p.reps
        ));
    }
    s
}

/// Renders a single-replication trajectory dump, one row per mesh point.
pub fn path_csv(dump: &PathDump) -> String {
    let mut s = String::from("t");
    for label in &dump.labels {
        s.push(',');
        s.push_str(label);
    }
    s.push('\n');
    for (i, t) in dump.times.iter().enumerate() {
        s.push_str(&format!("{t}"));
        for col in &dump.columns {
            s.push_str(&format!(",{}", col[i]));
        }
        s.push('\n');
    }
    s
}

/// JSON document for the `check` verb.
#[derive(Debug, Serialize)]
pub struct CheckDocument {
    pub checks: Vec<CheckReport>,
}

/// Pretty-prints any serializable report with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// Collects data files for one run, then seals them into `manifest.json`.
pub struct OutputWriter {
    dir: PathBuf,
    files: Vec<FileEntry>,
    started: Instant,
}

impl OutputWriter {
    pub fn new(dir: &Path) -> Result<OutputWriter, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(OutputWriter {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Writes one data file and records its digest for the manifest.
    pub fn write(&mut self, name: &str, content: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, content)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(FileEntry {
            name: name.to_string(),
            sha256: sha256_hex(content.as_bytes()),
        });
        Ok(())
    }

    /// Writes the manifest and returns its path.
    pub fn finish(
        self,
        verb: &str,
        seed: u64,
        config_text: &str,
        summary: serde_json::Value,
    ) -> Result<PathBuf, CliError> {
        let manifest = Manifest {
            tool: "holdsim".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            verb: verb.to_string(),
            seed,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            config: config_text.to_string(),
            files: self.files,
            summary,
        };
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, to_json(&manifest)?)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use holdsim::experiments::RatePoint;

    #[test]
    fn sha256_matches_known_vector() {
        // FIPS 180-2 test vector for "abc".
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn csv_columns_are_frozen() {
        let report = RateReport {
            points: vec![RatePoint {
                n: 64,
                epsilon: 0.25,
                kappa: f64::INFINITY,
                metric: "clt".to_string(),
                mean: 0.5,
                stderr: 0.01,
                reps: 100,
            }],
            fits: vec![],
            aborted: 0,
            total_replications: 100,
        };
        let csv = sweep_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("n,epsilon,kappa,metric,mean,stderr,R"));
        assert_eq!(lines.next(), Some("64,0.25,inf,clt,0.5,0.01,100"));
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn path_csv_has_time_then_labels() {
        let dump = PathDump {
            times: vec![0.0, 0.5],
            labels: vec!["x[0]".to_string(), "X[0]".to_string()],
            columns: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
        };
        let csv = path_csv(&dump);
        assert_eq!(csv, "t,x[0],X[0]\n0,1,3\n0.5,2,4\n");
    }

    #[test]
    fn infinite_kappa_serializes_as_json_null() {
        let report = RateReport {
            points: vec![RatePoint {
                n: 64,
                epsilon: 0.25,
                kappa: f64::INFINITY,
                metric: "regime3".to_string(),
                mean: 0.5,
                stderr: 0.01,
                reps: 100,
            }],
            fits: vec![],
            aborted: 0,
            total_replications: 100,
        };
        let json = to_json(&report).unwrap();
        assert!(json.contains("\"kappa\": null"), "json was: {json}");
    }

    #[test]
    fn writer_records_digests() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = OutputWriter::new(dir.path()).unwrap();
        w.write("points.csv", "n\n1\n").unwrap();
        let manifest_path = w
            .finish("sweep", 7, "seed = 7\n", serde_json::json!({"ok": true}))
            .unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(manifest_path).unwrap()).unwrap();
        assert_eq!(manifest["verb"], "sweep");
        assert_eq!(manifest["seed"], 7);
        assert_eq!(manifest["files"][0]["name"], "points.csv");
        assert_eq!(
            manifest["files"][0]["sha256"],
            serde_json::Value::String(sha256_hex(b"n\n1\n"))
        );
        assert_eq!(manifest["config"], "seed = 7\n");
    }
}
