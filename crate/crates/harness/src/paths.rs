//! On-disk layout of a run directory and atomic file writes.
//!
//! Everything a run produces lives under `<out_root>/<run_name>/`:
//! corpus files, step-stamped checkpoints, per-stage loss curves, inference
//! outputs, metric reports, and the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;

/// Environment variable overriding the default output root (`runs`).
pub const OUT_ROOT_ENV: &str = "DYAD_OUT_ROOT";

pub fn resolve_out_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(env) = std::env::var_os(OUT_ROOT_ENV) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("runs")
}

#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(out_root: &Path, run_name: &str) -> RunPaths {
        RunPaths {
            dir: out_root.join(run_name),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.jsonl")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn checkpoint(&self, stage: &str, step: u64) -> PathBuf {
        self.checkpoints_dir().join(format!("{stage}-{step:06}.ckpt"))
    }

    pub fn curve(&self, stage: &str) -> PathBuf {
        self.dir.join("curves").join(format!("{stage}.csv"))
    }

    pub fn infer_dir(&self) -> PathBuf {
        self.dir.join("infer")
    }

    pub fn dialogue_dir(&self, index: usize) -> PathBuf {
        self.infer_dir().join(format!("d-{index:04}"))
    }

    pub fn infer_summary(&self) -> PathBuf {
        self.infer_dir().join("summary.json")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.dir.join("reports")
    }

    pub fn eval_csv(&self) -> PathBuf {
        self.reports_dir().join("eval.csv")
    }

    pub fn eval_md(&self) -> PathBuf {
        self.reports_dir().join("eval.md")
    }

    pub fn ablation_csv(&self) -> PathBuf {
        self.reports_dir().join("ablation.csv")
    }

    pub fn ablation_md(&self) -> PathBuf {
        self.reports_dir().join("ablation.md")
    }

    pub fn summary_md(&self) -> PathBuf {
        self.reports_dir().join("summary.md")
    }

    /// Path relative to the run dir, for manifest entries.
    pub fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    }
}

/// Write via a temp file in the same directory, then rename into place, so a
/// reader never sees a half-written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_stable_and_relative_paths_strip_the_run_dir() {
        let p = RunPaths::new(Path::new("/tmp/out"), "exp");
        assert_eq!(p.checkpoint("t2s", 42), PathBuf::from("/tmp/out/exp/checkpoints/t2s-000042.ckpt"));
        assert_eq!(p.rel(&p.curve("acoustic")), "curves/acoustic.csv");
        assert_eq!(p.rel(&p.eval_csv()), "reports/eval.csv");
    }

    #[test]
    fn atomic_write_creates_parents_and_replaces_content() {
        let tmp = tempfile::tempdir().unwrap();
        let target = tmp.path().join("a/b/c.txt");
        atomic_write(&target, b"one").unwrap();
        atomic_write(&target, b"two").unwrap();
        assert_eq!(fs::read(&target).unwrap(), b"two");
        // no stray temp file left behind
        let names: Vec<_> = fs::read_dir(target.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("c.txt")]);
    }

    #[test]
    fn out_root_resolution_prefers_the_flag() {
        assert_eq!(
            resolve_out_root(Some(Path::new("/x"))),
            PathBuf::from("/x")
        );
    }
}
