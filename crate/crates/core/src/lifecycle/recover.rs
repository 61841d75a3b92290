//! Rebuilding the session table from the journal.

use std::collections::BTreeMap;

use super::journal::{check_gapless, BindingDelta, JournalEntry, JournalError};
use super::{CommandKind, SessionTable};
use crate::engine::{ContainerRef, EngineStatus};
use crate::session::{Session, SessionState};

/// Observed engine status of every container that still exists.
pub type EngineView = BTreeMap<ContainerRef, EngineStatus>;

/// Applies one journal entry to `table`. The live writer uses this too, so a
/// replayed table is built by exactly the code that built the original.
pub(crate) fn apply_entry(table: &mut SessionTable, entry: &JournalEntry) -> Result<(), String> {
    let at = entry.command.at;
    match &entry.command.kind {
        CommandKind::Create(spec) => {
            if table.get(&entry.session).is_some_and(|s| s.state != SessionState::Destroyed) {
                return Err(format!("create of live session {}", entry.session));
            }
            let binding = match &entry.binding {
                Some(BindingDelta::Bound(b)) => Some(b.clone()),
                _ => None,
            };
            let containers = entry.containers.clone().unwrap_or_default();
            table.insert(
                entry.session,
                Session {
                    id: entry.session,
                    spec: spec.clone(),
                    state: entry.resulting_state,
                    container: containers.renderer,
                    workers: containers.workers,
                    binding,
                    created_at: at,
                    updated_at: at,
                    last_error: entry.error.clone(),
                },
            );
        }
        kind => {
            let id = kind.target().expect("non-create commands name a session");
            if id != entry.session {
                return Err(format!("entry for {} carries command for {id}", entry.session));
            }
            let session = table.get_mut(&id).ok_or_else(|| format!("unknown session {id}"))?;
            session.state = entry.resulting_state;
            session.updated_at = at;
            if entry.error.is_some() {
                session.last_error = entry.error.clone();
            }
            match &entry.binding {
                Some(BindingDelta::Released) => session.binding = None,
                Some(BindingDelta::Bound(b)) => session.binding = Some(b.clone()),
                None => {}
            }
        }
    }
    Ok(())
}

/// Replays `journal` without consulting any engine.
pub fn replay(journal: &[JournalEntry]) -> Result<SessionTable, JournalError> {
    check_gapless(journal)?;
    let mut table = SessionTable::new();
    for entry in journal {
        apply_entry(&mut table, entry)
            .map_err(|reason| JournalError::CorruptJournal { sequence: entry.sequence, reason })?;
    }
    Ok(table)
}

fn expected_status(state: SessionState) -> Option<EngineStatus> {
    match state {
        SessionState::Running => Some(EngineStatus::Running),
        SessionState::Suspended => Some(EngineStatus::Paused),
        SessionState::Stopped => Some(EngineStatus::Exited),
        _ => None,
    }
}

/// Replays `journal`, then marks Failed every session whose containers the
/// engine no longer shows in the status the journal implies.
pub fn recover(journal: &[JournalEntry], view: &EngineView) -> Result<SessionTable, JournalError> {
    let mut table = replay(journal)?;
    for session in table.values_mut() {
        let Some(want) = expected_status(session.state) else { continue };
        let problem = session.containers().find_map(|c| match view.get(c) {
            None => Some(format!("container {} on {} missing after recovery", c.id, c.host)),
            Some(&got) if got != want => {
                Some(format!("container {} is {got:?} after recovery, expected {want:?}", c.id))
            }
            Some(_) => None,
        });
        if let Some(problem) = problem {
            tracing::warn!(session = %session.id, "{problem}");
            session.state = SessionState::Failed;
            session.last_error = Some(problem);
        }
    }
    Ok(table)
}
