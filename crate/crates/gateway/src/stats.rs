use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RelayMode {
    Http,
    Websocket,
    RawTcp,
}

/// Byte counts of one finished relay. `bytes_up` flows client → backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelayStats {
    pub route: String,
    pub mode: RelayMode,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Milliseconds since the Unix epoch.
    pub opened_at: u64,
    pub closed_at: u64,
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

const KEEP: usize = 4096;

/// The most recent finished relays.
#[derive(Debug, Default)]
pub(crate) struct StatsLog {
    entries: Mutex<VecDeque<RelayStats>>,
}

impl StatsLog {
    pub(crate) fn push(&self, s: RelayStats) {
        let mut e = self.entries.lock().expect("stats mutex poisoned");
        if e.len() == KEEP {
            e.pop_front();
        }
        e.push_back(s);
    }

    pub(crate) fn snapshot(&self) -> Vec<RelayStats> {
        self.entries.lock().expect("stats mutex poisoned").iter().cloned().collect()
    }
}

/// Live counters of one relay; the record is written when the last clone drops.
#[derive(Debug)]
pub(crate) struct Tracker {
    route: String,
    mode: RelayMode,
    opened_at: u64,
    pub(crate) up: AtomicU64,
    pub(crate) down: AtomicU64,
    log: Arc<StatsLog>,
}

impl Tracker {
    pub(crate) fn new(route: String, mode: RelayMode, log: Arc<StatsLog>) -> Arc<Tracker> {
        Arc::new(Tracker { route, mode, opened_at: now_ms(), up: AtomicU64::new(0), down: AtomicU64::new(0), log })
    }

    pub(crate) fn add(&self, up: u64, down: u64) {
        self.up.fetch_add(up, Ordering::Relaxed);
        self.down.fetch_add(down, Ordering::Relaxed);
    }
}

impl Drop for Tracker {
    fn drop(&mut self) {
        self.log.push(RelayStats {
            route: std::mem::take(&mut self.route),
            mode: self.mode,
            bytes_up: self.up.load(Ordering::Relaxed),
            bytes_down: self.down.load(Ordering::Relaxed),
            opened_at: self.opened_at,
            closed_at: now_ms(),
        });
    }
}
