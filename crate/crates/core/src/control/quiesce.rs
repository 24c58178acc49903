use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::unbounded;

use crate::guest::{ProcessRef, RunState, Tid};

use super::{ControlError, QuiesceMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuiesceReport {
    pub threads: usize,
    /// Threads that entered the barrier; all of them for asynchronous quiesce.
    pub barrier_entries: usize,
    pub elapsed: Duration,
}

/// Stops a running process so its state can be read.
///
/// Synchronous quiesce runs every guest thread up to the barrier
/// concurrently and waits for all of them until `deadline`; a thread that
/// never reaches its safe point makes the call fail with
/// [`ControlError::QuiesceTimeout`] and leaves the process running.
/// Asynchronous quiesce freezes the process at once.
pub fn quiesce(
    process: &ProcessRef,
    method: QuiesceMethod,
    deadline: Duration,
) -> Result<QuiesceReport, ControlError> {
    let start = Instant::now();
    let (state, runnable): (RunState, Vec<(Tid, bool)>) = {
        let p = process.lock();
        (
            p.run_state,
            p.threads.iter().map(|t| (t.tid, t.never_yields)).collect(),
        )
    };
    if !matches!(state, RunState::Running | RunState::Resumed) {
        return Err(crate::guest::GuestError::InvalidState(state).into());
    }
    let threads = runnable.len();
    if method == QuiesceMethod::Asynchronous {
        process.lock().transition(RunState::Quiesced)?;
        return Ok(QuiesceReport {
            threads,
            barrier_entries: threads,
            elapsed: start.elapsed(),
        });
    }

    let (tx, rx) = unbounded::<Tid>();
    thread::scope(|s| {
        for &(tid, never_yields) in &runnable {
            let tx = tx.clone();
            s.spawn(move || {
                if !never_yields {
                    let _ = tx.send(tid);
                }
            });
        }
    });
    drop(tx);
    let until = start + deadline;
    let mut entered = Vec::with_capacity(threads);
    while entered.len() < threads {
        match rx.recv_deadline(until) {
            Ok(tid) => entered.push(tid),
            Err(_) => break,
        }
    }
    if entered.len() < threads {
        let wait = until.saturating_duration_since(Instant::now());
        thread::sleep(wait);
        return Err(ControlError::QuiesceTimeout {
            entered: entered.len(),
            threads,
        });
    }
    let mut p = process.lock();
    for t in p.threads.iter_mut() {
        t.in_barrier = entered.contains(&t.tid);
    }
    p.transition(RunState::Quiesced)?;
    Ok(QuiesceReport {
        threads,
        barrier_entries: entered.len(),
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guest::{GuestSpec, Host};

    fn spawn(threads: usize) -> ProcessRef {
        let mut host = Host::new();
        let pid = host.spawn_guest(&GuestSpec::new(threads, 4096)).unwrap();
        host.get(pid).unwrap()
    }

    #[test]
    fn synchronous_counts_every_thread() {
        let p = spawn(8);
        let r = quiesce(&p, QuiesceMethod::Synchronous, Duration::from_secs(1)).unwrap();
        assert_eq!(r.barrier_entries, 8);
        let g = p.lock();
        assert_eq!(g.run_state, RunState::Quiesced);
        assert!(g.threads.iter().all(|t| t.in_barrier));
    }

    #[test]
    fn stuck_thread_times_out_and_process_keeps_running() {
        let p = spawn(3);
        p.lock().threads[1].never_yields = true;
        let t0 = Instant::now();
        let err = quiesce(&p, QuiesceMethod::Synchronous, Duration::from_millis(50)).unwrap_err();
        assert!(t0.elapsed() >= Duration::from_millis(50));
        assert_eq!(
            err,
            ControlError::QuiesceTimeout {
                entered: 2,
                threads: 3
            }
        );
        let g = p.lock();
        assert_eq!(g.run_state, RunState::Running);
        assert!(g.threads.iter().all(|t| !t.in_barrier));
    }

    #[test]
    fn asynchronous_freezes_at_once() {
        let p = spawn(2);
        p.lock().threads[0].never_yields = true;
        let r = quiesce(&p, QuiesceMethod::Asynchronous, Duration::ZERO).unwrap();
        assert_eq!(r.barrier_entries, 2);
        assert_eq!(p.lock().run_state, RunState::Quiesced);
        assert!(quiesce(&p, QuiesceMethod::Asynchronous, Duration::ZERO).is_err());
    }
}
