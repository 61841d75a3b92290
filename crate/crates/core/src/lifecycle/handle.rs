use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use chrono::NaiveDateTime;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use super::{Command, Lifecycle, LifecycleError, SessionTable, SnapshotAction};
use crate::session::{Session, SessionId, Timestamp};

/// Time source for command timestamps and the snapshot schedule.
pub trait Clock: Send + Sync {
    /// Monotonic milliseconds.
    fn now(&self) -> Timestamp;

    /// Local wall-clock time.
    fn local_now(&self) -> NaiveDateTime;
}

#[derive(Debug)]
pub struct SystemClock {
    epoch_ms: u64,
    started: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        let epoch_ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
        SystemClock { epoch_ms, started: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.epoch_ms + self.started.elapsed().as_millis() as u64)
    }

    fn local_now(&self) -> NaiveDateTime {
        chrono::Local::now().naive_local()
    }
}

/// Simulated clock for tests. Only moves when told to.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<NaiveDateTime>,
}

impl ManualClock {
    pub fn new(start: NaiveDateTime) -> ManualClock {
        ManualClock { now: Mutex::new(start) }
    }

    pub fn set(&self, t: NaiveDateTime) {
        *self.now.lock().expect("clock mutex poisoned") = t;
    }

    pub fn advance(&self, d: chrono::Duration) {
        let mut now = self.now.lock().expect("clock mutex poisoned");
        *now += d;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        let t = *self.now.lock().expect("clock mutex poisoned");
        Timestamp(t.and_utc().timestamp_millis().max(0) as u64)
    }

    fn local_now(&self) -> NaiveDateTime {
        *self.now.lock().expect("clock mutex poisoned")
    }
}

enum Request {
    Apply(Command, oneshot::Sender<Result<Session, LifecycleError>>),
    Tick(NaiveDateTime, oneshot::Sender<Vec<SnapshotAction>>),
}

/// Cloneable front of a [`Lifecycle`] running on its own task. Commands and
/// snapshot ticks share one queue; reads come from the latest published
/// table without touching the queue.
#[derive(Clone)]
pub struct LifecycleHandle {
    tx: mpsc::Sender<Request>,
    table: watch::Receiver<Arc<SessionTable>>,
}

impl LifecycleHandle {
    /// Spawns the writer. The returned task yields the lifecycle back once
    /// every handle has been dropped.
    pub fn spawn(mut lifecycle: Lifecycle) -> (LifecycleHandle, JoinHandle<Lifecycle>) {
        let (tx, mut rx) = mpsc::channel::<Request>(256);
        let (table_tx, table) = watch::channel(Arc::new(lifecycle.sessions().clone()));
        let task = tokio::spawn(async move {
            while let Some(req) = rx.recv().await {
                match req {
                    Request::Apply(cmd, reply) => {
                        let result = lifecycle.apply_command(cmd).await;
                        table_tx.send_replace(Arc::new(lifecycle.sessions().clone()));
                        let _ = reply.send(result);
                    }
                    Request::Tick(now, reply) => {
                        let _ = reply.send(lifecycle.tick_scheduler(now).await);
                    }
                }
            }
            lifecycle
        });
        (LifecycleHandle { tx, table }, task)
    }

    pub async fn apply(&self, cmd: Command) -> Result<Session, LifecycleError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Request::Apply(cmd, reply)).await.map_err(|_| LifecycleError::Closed)?;
        rx.await.map_err(|_| LifecycleError::Closed)?
    }

    pub async fn tick(&self, now: NaiveDateTime) -> Result<Vec<SnapshotAction>, LifecycleError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Request::Tick(now, reply)).await.map_err(|_| LifecycleError::Closed)?;
        rx.await.map_err(|_| LifecycleError::Closed)
    }

    /// Snapshot of the session table as of the last completed command.
    pub fn sessions(&self) -> Arc<SessionTable> {
        self.table.borrow().clone()
    }

    pub fn get(&self, id: SessionId) -> Option<Session> {
        self.table.borrow().get(&id).cloned()
    }
}

/// Ticks the snapshot scheduler every `every` using `clock`.
pub fn spawn_scheduler(handle: LifecycleHandle, clock: Arc<dyn Clock>, every: Duration) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(every);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            interval.tick().await;
            match handle.tick(clock.local_now()).await {
                Ok(actions) => {
                    for a in &actions {
                        tracing::info!(?a, "snapshot");
                    }
                }
                Err(_) => return,
            }
        }
    })
}
