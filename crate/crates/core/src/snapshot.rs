//! The cross-loop state board `[S, a, τ, θ, I, h]`.

use std::sync::Arc;

use parking_lot::RwLock;

use crate::model::{DrivingStyle, EhmiMessage, Instruction, Intention, MetaAction, ScenarioDescription};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SharedSnapshot {
    pub state: ScenarioDescription,
    pub action: MetaAction,
    pub intention: Option<Intention>,
    pub style: DrivingStyle,
    pub instruction: Option<Instruction>,
    pub ehmi: Option<EhmiMessage>,
    pub version: u64,
    /// Environment tick the state belongs to.
    pub tick: u64,
    /// Tick at which `action` was last written.
    pub action_tick: u64,
    pub opponent: Option<u32>,
}

/// Tear-free holder of the current snapshot.
///
/// Readers get an `Arc` to an immutable version; writers copy, mutate and
/// swap under the write lock, so every read observes exactly one version.
#[derive(Debug, Default)]
pub struct SnapshotCell {
    inner: RwLock<Arc<SharedSnapshot>>,
}

impl SnapshotCell {
    pub fn new(initial: SharedSnapshot) -> Self {
        SnapshotCell {
            inner: RwLock::new(Arc::new(initial)),
        }
    }

    pub fn read(&self) -> Arc<SharedSnapshot> {
        self.inner.read().clone()
    }

    /// Applies `f` to a copy of the current snapshot and publishes it with the
    /// next version number. Returns the new version.
    pub fn update(&self, f: impl FnOnce(&mut SharedSnapshot)) -> u64 {
        let mut guard = self.inner.write();
        let mut next = SharedSnapshot::clone(&guard);
        f(&mut next);
        next.version = guard.version + 1;
        let version = next.version;
        *guard = Arc::new(next);
        version
    }
}
