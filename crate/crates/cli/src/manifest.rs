//! Run manifests and the markdown report built from them.
//!
//! Wall-clock time lives only here, so result files stay byte-reproducible.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    /// Content hash of the canonical config JSON.
    pub input_hash: String,
    pub outputs: Vec<PathBuf>,
    pub duration_seconds: f64,
    pub exit_code: u8,
    pub summary: Vec<String>,
}

impl RunManifest {
    /// Writes `<stem>.manifest.json`; every listed output must exist.
    pub fn write(&self, dir: &Path, stem: &str) -> io::Result<PathBuf> {
        if let Some(missing) = self.outputs.iter().find(|p| !p.exists()) {
            return Err(io::Error::new(
                io::ErrorKind::NotFound,
                format!("manifest output {} does not exist", missing.display()),
            ));
        }
        let path = dir.join(format!("{stem}{MANIFEST_SUFFIX}"));
        let mut text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Every manifest in `dir`, sorted by file name.
pub fn collect_manifests(dir: &Path) -> io::Result<Vec<(String, RunManifest)>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(MANIFEST_SUFFIX))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let text = fs::read_to_string(dir.join(&name))?;
            let m: RunManifest = serde_json::from_str(&text).map_err(io::Error::other)?;
            Ok((name.trim_end_matches(MANIFEST_SUFFIX).to_string(), m))
        })
        .collect()
}

pub fn render_report(manifests: &[(String, RunManifest)]) -> String {
    let mut out = String::from("# middev run report\n\n");
    if manifests.is_empty() {
        out.push_str("No manifests found.\n");
        return out;
    }
    out.push_str("| run | command | exit | seconds | input hash |\n|---|---|---|---|---|\n");
    for (stem, m) in manifests {
        out.push_str(&format!(
            "| {stem} | {} | {} | {:.3} | `{}` |\n",
            m.command,
            m.exit_code,
            m.duration_seconds,
            &m.input_hash[..m.input_hash.len().min(12)]
        ));
    }
    for (stem, m) in manifests {
        out.push_str(&format!("\n## {stem}\n\n"));
        for line in &m.summary {
            out.push_str(&format!("- {line}\n"));
        }
        out.push_str("\nOutputs:\n\n");
        for p in &m.outputs {
            out.push_str(&format!("- `{}`\n", p.display()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(outputs: Vec<PathBuf>) -> RunManifest {
        RunManifest {
            tool_version: "0".into(),
            command: "rates".into(),
            config: serde_json::json!({}),
            input_hash: "abcdef0123456789".into(),
            outputs,
            duration_seconds: 0.5,
            exit_code: 0,
            summary: vec!["all checks pass".into()],
        }
    }

    #[test]
    fn missing_output_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(vec![dir.path().join("nope.json")]);
        assert!(m.write(dir.path(), "rates").is_err());
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("rates.json");
        fs::write(&out, "{}").unwrap();
        manifest(vec![out]).write(dir.path(), "rates").unwrap();
        let ms = collect_manifests(dir.path()).unwrap();
        assert_eq!(ms.len(), 1);
        let md = render_report(&ms);
        assert!(md.contains("| rates | rates | 0 | 0.500 | `abcdef012345` |"));
        assert!(md.contains("- all checks pass"));
    }

    #[test]
    fn empty_report() {
        assert!(render_report(&[]).contains("No manifests found."));
    }
}
