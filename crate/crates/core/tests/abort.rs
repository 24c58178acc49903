use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use procmig::control::{EventState, RecordingHooks, RequestSpec, Strategy};
use procmig::guest::{Digest, GuestSpec, Pid, RegionId, RunState};
use procmig::node::{Node, NodeConfig, NodeError};
use procmig::proto::{Boundary, DaemonHandle, Fault};

static NEXT: AtomicU32 = AtomicU32::new(0);

struct Setup {
    src: Arc<Node>,
    dst: Arc<Node>,
    daemon: DaemonHandle,
    pids: Vec<Pid>,
    digests: Vec<Digest>,
}

fn setup(n: usize) -> Setup {
    let id = NEXT.fetch_add(1, Ordering::SeqCst);
    let src = Node::new(NodeConfig::named("src"));
    let dst = Node::new(NodeConfig::named("dst"));
    let daemon = dst.start_daemon(&format!("loopback:abort-{id}")).unwrap();
    src.host().create_region(RegionId(3), 2 * 4096);
    let pids: Vec<Pid> = (0..n)
        .map(|_| {
            src.spawn(&GuestSpec::new(2, 24 * 4096).with_shared(RegionId(3), 0, 2))
                .unwrap()
        })
        .collect();
    let digests = pids.iter().map(|p| src.digest(*p).unwrap()).collect();
    Setup {
        src,
        dst,
        daemon,
        pids,
        digests,
    }
}

fn assert_rolled_back(s: &Setup, what: &str) {
    for (pid, d) in s.pids.iter().zip(&s.digests) {
        let p = s.src.process(*pid).unwrap_or_else(|| panic!("{what}: pid {pid} gone"));
        assert_eq!(p.lock().run_state, RunState::Running, "{what}");
        assert_eq!(&s.src.digest(*pid).unwrap(), d, "{what}");
    }
    assert!(s.src.pids_in(RunState::Removed).is_empty(), "{what}");
    // The destination tears down on its own thread; give it a moment.
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
    while !(s.dst.host().is_empty() && s.dst.host().regions().is_empty()) {
        assert!(std::time::Instant::now() < deadline, "{what}: destination residue");
        std::thread::sleep(std::time::Duration::from_millis(5));
    }
}

fn run(s: &Setup, strategy: Strategy) -> Result<(), NodeError> {
    s.src
        .run(RequestSpec::migrate(s.pids.clone(), &s.daemon.endpoint(), strategy))
        .map(|_| ())
}

#[test]
fn link_cut_at_every_boundary_rolls_back() {
    for strategy in [Strategy::StopAndCopy, Strategy::pre_copy(), Strategy::lazy()] {
        for at in Boundary::ALL {
            let s = setup(2);
            s.src.inject(Fault::cut(at));
            let err = run(&s, strategy).expect_err(&format!("{strategy} cut {at}"));
            assert!(!matches!(err, NodeError::Rejected { .. }), "{err}");
            assert_rolled_back(&s, &format!("{strategy} cut {at}"));
        }
    }
}

#[test]
fn persistent_corruption_rolls_back() {
    for strategy in [Strategy::StopAndCopy, Strategy::pre_copy(), Strategy::lazy()] {
        let s = setup(2);
        s.src.inject(Fault::Corrupt {
            frame: 3,
            persistent: true,
        });
        run(&s, strategy).unwrap_err();
        assert_rolled_back(&s, &format!("{strategy} corrupt"));
    }
}

#[test]
fn single_corrupt_frame_is_retransmitted() {
    let s = setup(1);
    s.src.inject(Fault::Corrupt {
        frame: 3,
        persistent: false,
    });
    let r = s
        .src
        .run(RequestSpec::migrate(s.pids.clone(), &s.daemon.endpoint(), Strategy::StopAndCopy))
        .unwrap()
        .migration()
        .unwrap();
    assert!(r.processes[0].channel.retransmits >= 1);
    assert_eq!(s.dst.digest(Pid(r.processes[0].dest_pid)).unwrap(), s.digests[0]);
}

#[test]
fn restart_hook_veto_rolls_back() {
    for strategy in [Strategy::StopAndCopy, Strategy::pre_copy(), Strategy::lazy()] {
        let s = setup(3);
        let hooks = Arc::new(RecordingHooks::vetoing("policy says no"));
        s.dst.set_hooks(hooks.clone());
        let err = run(&s, strategy).unwrap_err();
        assert!(err.to_string().contains("veto"), "{err}");
        assert_rolled_back(&s, &format!("{strategy} veto"));
        assert_eq!(hooks.cleanups(), 3);
    }
}

#[test]
fn failed_batch_marks_source_events_failed() {
    let s = setup(1);
    s.src.inject(Fault::cut(Boundary::AfterTransfer));
    let id = s
        .src
        .submit(RequestSpec::migrate(s.pids.clone(), &s.daemon.endpoint(), Strategy::StopAndCopy))
        .unwrap();
    s.src.wait(id).unwrap_err();
    let evs = s.src.events(id).unwrap();
    assert!(evs.iter().all(|e| e.state() == EventState::Failed));
    assert!(evs.iter().all(|e| e.cleanup_ran()));
    // The pid is free for another attempt.
    run(&s, Strategy::StopAndCopy).unwrap();
    assert!(s.src.host().is_empty());
}
