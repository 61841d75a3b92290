use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::RwLock;

use simdesk_bench::LatencyReport;

/// Latency reports by run id: ones stored in memory, then `<dir>/<run-id>.toml`.
#[derive(Default)]
pub struct ReportStore {
    memory: RwLock<BTreeMap<String, LatencyReport>>,
    dir: Option<PathBuf>,
}

impl ReportStore {
    pub fn with_dir(dir: impl Into<PathBuf>) -> ReportStore {
        ReportStore { memory: RwLock::default(), dir: Some(dir.into()) }
    }

    pub fn insert(&self, run_id: impl Into<String>, report: LatencyReport) {
        self.memory.write().expect("report lock poisoned").insert(run_id.into(), report);
    }

    pub fn get(&self, run_id: &str) -> Option<LatencyReport> {
        if !valid_run_id(run_id) {
            return None;
        }
        if let Some(r) = self.memory.read().expect("report lock poisoned").get(run_id) {
            return Some(r.clone());
        }
        let path = self.dir.as_ref()?.join(format!("{run_id}.toml"));
        match LatencyReport::read(&path) {
            Ok(r) => Some(r),
            Err(e) => {
                if path.exists() {
                    tracing::warn!(path = %path.display(), error = %e, "unreadable report");
                }
                None
            }
        }
    }
}

/// Letters, digits, `-` and `_`; keeps lookups inside the report directory.
pub fn valid_run_id(run_id: &str) -> bool {
    !run_id.is_empty() && run_id.len() <= 128 && run_id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}
