use parking_lot::Mutex;

use crate::guest::{GuestProcess, Pid};

use super::{EventContext, EventState};

/// Per-process callbacks around an event.
///
/// `setup` runs before the first checkpoint or restart step, `restart`
/// runs on the destination just before resume and may veto it, and
/// `cleanup` runs exactly once when the event ends, whatever the outcome.
pub trait ProcessHooks: Send + Sync {
    fn setup(&self, _ev: &EventContext, _process: &GuestProcess) {}

    fn restart(&self, _ev: &EventContext, _process: &GuestProcess) -> Result<(), String> {
        Ok(())
    }

    fn cleanup(&self, _ev: &EventContext, _process: Option<&GuestProcess>, _outcome: EventState) {}
}

#[derive(Debug, Default)]
pub struct NoHooks;

impl ProcessHooks for NoHooks {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HookCall {
    Setup(Pid),
    Restart(Pid),
    Cleanup(Pid, EventState),
}

/// Hooks that log their calls and optionally veto restarts.
#[derive(Debug, Default)]
pub struct RecordingHooks {
    calls: Mutex<Vec<HookCall>>,
    veto: Option<String>,
}

impl RecordingHooks {
    pub fn vetoing(reason: &str) -> Self {
        RecordingHooks {
            calls: Mutex::default(),
            veto: Some(reason.into()),
        }
    }

    pub fn calls(&self) -> Vec<HookCall> {
        self.calls.lock().clone()
    }

    pub fn cleanups(&self) -> usize {
        self.calls
            .lock()
            .iter()
            .filter(|c| matches!(c, HookCall::Cleanup(..)))
            .count()
    }
}

impl ProcessHooks for RecordingHooks {
    fn setup(&self, ev: &EventContext, _process: &GuestProcess) {
        self.calls.lock().push(HookCall::Setup(ev.pid));
    }

    fn restart(&self, ev: &EventContext, _process: &GuestProcess) -> Result<(), String> {
        self.calls.lock().push(HookCall::Restart(ev.pid));
        match &self.veto {
            Some(r) => Err(r.clone()),
            None => Ok(()),
        }
    }

    fn cleanup(&self, ev: &EventContext, _process: Option<&GuestProcess>, outcome: EventState) {
        self.calls.lock().push(HookCall::Cleanup(ev.pid, outcome));
    }
}
