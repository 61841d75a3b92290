//! Nightly image snapshots and their retention.

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::session::{ImageRef, SessionId};

const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnapshotPolicy {
    /// Local time of day at which the nightly window opens.
    pub schedule: NaiveTime,
    /// Images kept per session. At least 1.
    pub retention: u32,
    /// Image reference with `{id}` in the repository and `{date}` in the tag.
    pub tag_pattern: String,
}

impl Default for SnapshotPolicy {
    fn default() -> Self {
        SnapshotPolicy {
            schedule: NaiveTime::from_hms_opt(2, 0, 0).expect("valid time"),
            retention: 7,
            tag_pattern: "backup/sess-{id}:{date}".to_owned(),
        }
    }
}

impl SnapshotPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.retention < 1 {
            return Err("snapshot retention must be at least 1".into());
        }
        let probe = self.image(SessionId::new(1).expect("1 is a valid id"), probe_date());
        let date = probe_date().format(DATE_FORMAT).to_string();
        match ImageRef::parse(&probe) {
            Some(ImageRef { name, tag: Some(tag) }) if tag.contains(&date) && name.contains("1") => Ok(()),
            _ => Err(format!(
                "tag pattern {:?} must render to name:tag with {{id}} in the name and {{date}} in the tag",
                self.tag_pattern
            )),
        }
    }

    /// Full image reference for the snapshot of `id` taken in the window of `date`.
    pub fn image(&self, id: SessionId, date: NaiveDate) -> String {
        self.tag_pattern
            .replace("{id}", &id.get().to_string())
            .replace("{date}", &date.format(DATE_FORMAT).to_string())
    }

    /// Repository part of the snapshot images of `id`.
    pub fn repository(&self, id: SessionId) -> String {
        let probe = self.image(id, probe_date());
        ImageRef::parse(&probe).map(|r| r.name.to_owned()).unwrap_or(probe)
    }

    /// Date encoded in `reference` if it is a snapshot image of `id`.
    pub fn date_of(&self, id: SessionId, reference: &str) -> Option<NaiveDate> {
        let (prefix, suffix) = self.tag_pattern.split_once("{date}")?;
        let prefix = prefix.replace("{id}", &id.get().to_string());
        let suffix = suffix.replace("{id}", &id.get().to_string());
        let middle = reference.strip_prefix(&prefix)?.strip_suffix(&suffix)?;
        NaiveDate::parse_from_str(middle, DATE_FORMAT).ok()
    }

    /// The window containing `now`: the date of the latest scheduled instant
    /// at or before `now`.
    pub fn window(&self, now: NaiveDateTime) -> NaiveDate {
        if now.time() >= self.schedule {
            now.date()
        } else {
            now.date().pred_opt().expect("dates in range")
        }
    }
}

fn probe_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 2).expect("valid date")
}

/// One thing the scheduler did, or tried to do, during a tick.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum SnapshotAction {
    Committed { session: SessionId, image: String },
    CommitFailed { session: SessionId, error: String },
    Deleted { session: SessionId, image: String },
    DeleteFailed { session: SessionId, image: String, error: String },
    ListFailed { session: SessionId, error: String },
}

impl SnapshotAction {
    pub fn session(&self) -> SessionId {
        match self {
            SnapshotAction::Committed { session, .. }
            | SnapshotAction::CommitFailed { session, .. }
            | SnapshotAction::Deleted { session, .. }
            | SnapshotAction::DeleteFailed { session, .. }
            | SnapshotAction::ListFailed { session, .. } => *session,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(d: u32, h: u32, m: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2026, 3, d).unwrap().and_hms_opt(h, m, 0).unwrap()
    }

    #[test]
    fn default_pattern() {
        let p = SnapshotPolicy::default();
        p.validate().unwrap();
        let id = SessionId::new(12).unwrap();
        let date = NaiveDate::from_ymd_opt(2026, 3, 4).unwrap();
        assert_eq!(p.image(id, date), "backup/sess-12:2026-03-04");
        assert_eq!(p.repository(id), "backup/sess-12");
        assert_eq!(p.date_of(id, "backup/sess-12:2026-03-04"), Some(date));
        assert_eq!(p.date_of(id, "backup/sess-12:latest"), None);
        assert_eq!(p.date_of(SessionId::new(1).unwrap(), "backup/sess-12:2026-03-04"), None);
    }

    #[test]
    fn windows() {
        let p = SnapshotPolicy::default();
        assert_eq!(p.window(at(5, 2, 0)), at(5, 0, 0).date());
        assert_eq!(p.window(at(5, 23, 59)), at(5, 0, 0).date());
        assert_eq!(p.window(at(5, 1, 59)), at(4, 0, 0).date());
    }

    #[test]
    fn rejects_bad_policies() {
        let mut p = SnapshotPolicy { retention: 0, ..Default::default() };
        assert!(p.validate().is_err());
        p.retention = 1;
        p.tag_pattern = "backup:{id}".into();
        assert!(p.validate().is_err());
        p.tag_pattern = "snap-{date}:{id}".into();
        assert!(p.validate().is_err());
    }

    #[test]
    fn schedule_parses_from_short_time() {
        let p: SnapshotPolicy = serde_json::from_str(r#"{"schedule":"03:30"}"#).unwrap();
        assert_eq!(p.schedule, NaiveTime::from_hms_opt(3, 30, 0).unwrap());
        assert_eq!(p.retention, 7);
    }
}
