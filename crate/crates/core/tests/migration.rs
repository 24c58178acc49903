use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use procmig::control::{EventState, RequestSpec, Strategy};
use procmig::guest::{GuestSpec, Pid, RegionId, RunState};
use procmig::node::{Node, NodeConfig, NodeError};
use procmig::proto::{DaemonHandle, MigrationReport, TouchPages};

static NEXT: AtomicU32 = AtomicU32::new(0);

fn pair() -> (Arc<Node>, Arc<Node>, DaemonHandle) {
    let n = NEXT.fetch_add(1, Ordering::SeqCst);
    let src = Node::new(NodeConfig::named("src"));
    let dst = Node::new(NodeConfig::named("dst"));
    let daemon = dst.start_daemon(&format!("loopback:mig-{n}")).unwrap();
    (src, dst, daemon)
}

fn migrate(src: &Arc<Node>, daemon: &DaemonHandle, pids: Vec<Pid>, s: Strategy) -> Result<MigrationReport, NodeError> {
    src.run(RequestSpec::migrate(pids, &daemon.endpoint(), s))
        .map(|o| o.migration().unwrap())
}

fn guest(pages: u64) -> GuestSpec {
    GuestSpec::new(2, pages * 4096)
}

#[test]
fn stop_and_copy_moves_one_process() {
    let (src, dst, daemon) = pair();
    let pid = src.spawn(&guest(64)).unwrap();
    let before = src.digest(pid).unwrap();
    let r = migrate(&src, &daemon, vec![pid], Strategy::StopAndCopy).unwrap();
    assert_eq!(r.processes.len(), 1);
    let p = &r.processes[0];
    assert_eq!(p.pages_pre_resume, 64);
    assert_eq!(p.pages_post_resume, 0);
    assert_eq!(r.negotiation_msgs, 3);
    assert!(!src.host().contains(pid));
    let dest_pid = Pid(p.dest_pid);
    assert_eq!(dst.digest(dest_pid).unwrap(), before);
    assert_eq!(dst.process(dest_pid).unwrap().lock().run_state, RunState::Resumed);
    let evs = src.events(procmig::ids::RequestId(r.request_id)).unwrap();
    assert!(evs.iter().all(|e| e.state() == EventState::Done));
}

#[test]
fn pre_copy_without_writes_freezes_nothing() {
    let (src, dst, daemon) = pair();
    let pid = src.spawn(&guest(32)).unwrap();
    let before = src.digest(pid).unwrap();
    let r = migrate(&src, &daemon, vec![pid], Strategy::pre_copy()).unwrap();
    let p = &r.processes[0];
    assert_eq!(p.rounds.len(), 1);
    assert_eq!(p.rounds[0].pages.len(), 32);
    assert!(p.final_pages.is_empty());
    assert_eq!(dst.digest(Pid(p.dest_pid)).unwrap(), before);
}

#[test]
fn lazy_pulls_touched_pages_then_drains() {
    let (src, dst, daemon) = pair();
    dst.set_guest_driver(Some(Arc::new(TouchPages(vec![1, 3, 5, 7, 9]))));
    let pid = src.spawn(&guest(40)).unwrap();
    let before = src.digest(pid).unwrap();
    let r = migrate(&src, &daemon, vec![pid], Strategy::lazy()).unwrap();
    let p = &r.processes[0];
    assert_eq!(p.pages_pre_resume, 0);
    assert_eq!(p.pull_requests, 5);
    assert_eq!(p.pages_post_resume, 40);
    assert_eq!(dst.digest(Pid(p.dest_pid)).unwrap(), before);
    assert!(!src.host().contains(pid));
}

#[test]
fn batch_with_shared_region_sends_it_once() {
    let (src, dst, daemon) = pair();
    src.host().create_region(RegionId(7), 4 * 4096);
    let pids: Vec<Pid> = (0..3)
        .map(|_| src.spawn(&guest(16).with_shared(RegionId(7), 0, 4)).unwrap())
        .collect();
    let digests: Vec<_> = pids.iter().map(|p| src.digest(*p).unwrap()).collect();
    let r = migrate(&src, &daemon, pids, Strategy::StopAndCopy).unwrap();
    assert_eq!(r.negotiation_msgs, 5);
    assert_eq!(r.processes.iter().map(|p| p.region_pages).sum::<u64>(), 4);
    for (p, d) in r.processes.iter().zip(&digests) {
        assert_eq!(&dst.digest(Pid(p.dest_pid)).unwrap(), d);
    }
    assert_eq!(dst.host().regions().refcount(RegionId(7)), 3);
}

#[test]
fn capability_mismatch_names_the_subsystem() {
    let (src, dst, daemon) = pair();
    src.register(procmig::subsystem::counter::descriptor()).unwrap();
    let pid = src.spawn(&guest(4)).unwrap();
    match migrate(&src, &daemon, vec![pid], Strategy::StopAndCopy) {
        Err(NodeError::CapabilityMismatch { subsystem, .. }) => assert_eq!(subsystem, "counter"),
        other => panic!("{other:?}"),
    }
    assert_eq!(src.process(pid).unwrap().lock().run_state, RunState::Running);
    assert!(dst.host().is_empty());
}

#[test]
fn page_size_mismatch_is_rejected() {
    let src = Node::new(NodeConfig::named("src"));
    let dst = Node::new(NodeConfig {
        page_size: 8192,
        ..NodeConfig::named("dst")
    });
    let daemon = dst.start_daemon("loopback:mig-pagesize").unwrap();
    let pid = src.spawn(&guest(4)).unwrap();
    match migrate(&src, &daemon, vec![pid], Strategy::StopAndCopy) {
        Err(NodeError::Rejected { subject, .. }) => assert_eq!(subject, "page_size"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn tcp_migration_with_small_buffer() {
    let src = Node::new(NodeConfig::named("src"));
    let mut cfg = NodeConfig::named("dst");
    cfg.channel.buffer_size = 4096;
    let dst = Node::new(cfg);
    let daemon = dst.start_daemon("127.0.0.1:0").unwrap();
    let pid = src.spawn(&guest(128)).unwrap();
    let before = src.digest(pid).unwrap();
    let r = migrate(&src, &daemon, vec![pid], Strategy::StopAndCopy).unwrap();
    assert_eq!(dst.digest(Pid(r.processes[0].dest_pid)).unwrap(), before);
}

#[test]
fn daemon_refuses_media_it_does_not_serve() {
    let (src, dst, daemon) = pair();
    dst.restrict_media(&["stream"]).unwrap();
    let pid = src.spawn(&guest(2)).unwrap();
    match migrate(&src, &daemon, vec![pid], Strategy::StopAndCopy) {
        Err(NodeError::Rejected { subject, .. }) => assert_eq!(subject, "loopback"),
        other => panic!("{other:?}"),
    }
    assert!(dst.restrict_media(&["carrier-pigeon"]).is_err());
}
