use std::sync::Arc;

use procmig::control::{ControlError, RequestSpec, Strategy};
use procmig::guest::{FileMode, FileSpec, GuestSpec, Pid, ResourcePolicy};
use procmig::ids::{MigrationToken, RequestId};
use procmig::medium::{FILE_ADVANCE_OFFSET, FILE_QUERY_OFFSET};
use procmig::node::{Node, NodeConfig, NodeError};

fn file(fd: u32, policy: ResourcePolicy, offset: u64) -> FileSpec {
    FileSpec {
        fd,
        path: format!("/data/{fd}.log"),
        mode: FileMode::Write,
        policy,
        offset,
    }
}

fn migrated(name: &str, spec: &GuestSpec) -> (Arc<Node>, Arc<Node>, Pid, MigrationToken) {
    let src = Node::new(NodeConfig::named("src"));
    let dst = Node::new(NodeConfig::named("dst"));
    let daemon = dst.start_daemon(&format!("loopback:{name}")).unwrap();
    let pid = src.spawn(spec).unwrap();
    let r = src
        .run(RequestSpec::migrate(vec![pid], &daemon.endpoint(), Strategy::StopAndCopy))
        .unwrap()
        .migration()
        .unwrap();
    let token = MigrationToken::from_hex(&r.token).unwrap();
    (src, dst, Pid(r.processes[0].dest_pid), token)
}

#[test]
fn forwarded_file_offsets_live_on_the_source() {
    let spec = GuestSpec::new(1, 4096).with_file(file(3, ResourcePolicy::ForwardToSource, 500));
    let (src, dst, pid, token) = migrated("resid-fwd", &spec);
    assert_eq!(dst.residual_file_op(pid, 3, FILE_QUERY_OFFSET, 0).unwrap(), 500);
    assert_eq!(dst.residual_file_op(pid, 3, FILE_ADVANCE_OFFSET, 100).unwrap(), 600);
    assert_eq!(dst.residual_file_op(pid, 3, FILE_ADVANCE_OFFSET, 100).unwrap(), 700);
    assert_eq!(dst.residual_file_op(pid, 3, FILE_QUERY_OFFSET, 0).unwrap(), 700);
    src.release_residuals(token);
    assert_eq!(
        dst.residual_file_op(pid, 3, FILE_QUERY_OFFSET, 0),
        Err(NodeError::SourceGone)
    );
}

#[test]
fn source_shutdown_is_source_gone() {
    let spec = GuestSpec::new(1, 4096).with_file(file(4, ResourcePolicy::ForwardToSource, 7));
    let (src, dst, pid, _) = migrated("resid-drop", &spec);
    assert_eq!(dst.residual_file_op(pid, 4, FILE_QUERY_OFFSET, 0).unwrap(), 7);
    drop(src);
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
    loop {
        match dst.residual_file_op(pid, 4, FILE_QUERY_OFFSET, 0) {
            Err(NodeError::SourceGone) => break,
            Ok(_) if std::time::Instant::now() < deadline => {
                std::thread::sleep(std::time::Duration::from_millis(10))
            }
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn transferred_and_local_files_are_not_forwarded() {
    let spec = GuestSpec::new(1, 4096)
        .with_file(file(5, ResourcePolicy::Transfer, 11))
        .with_file(file(6, ResourcePolicy::UseLocal, 12));
    let (_src, dst, pid, _) = migrated("resid-local", &spec);
    let p = dst.process(pid).unwrap();
    assert_eq!(p.lock().file(5).unwrap().offset, 11);
    assert_eq!(p.lock().file(6).map(|f| f.policy), Some(ResourcePolicy::UseLocal));
    assert_eq!(
        dst.residual_file_op(pid, 5, FILE_QUERY_OFFSET, 0),
        Err(NodeError::SourceGone)
    );
}

#[test]
fn abort_of_unknown_or_finished_batches() {
    let src = Node::new(NodeConfig::named("src"));
    assert_eq!(src.abort(RequestId(999)), Err(ControlError::NotFound(RequestId(999))));
    let dst = Node::new(NodeConfig::named("dst"));
    let daemon = dst.start_daemon("loopback:resid-abort").unwrap();
    let pid = src.spawn(&GuestSpec::new(1, 4096)).unwrap();
    let id = src
        .submit(RequestSpec::migrate(vec![pid], &daemon.endpoint(), Strategy::StopAndCopy))
        .unwrap();
    src.wait(id).unwrap();
    assert_eq!(src.abort(id), Err(ControlError::AlreadyTerminal(id)));
}

#[test]
fn abort_before_commit_keeps_the_source() {
    let src = Node::new(NodeConfig::named("src"));
    let dst = Node::new(NodeConfig::named("dst"));
    let daemon = dst.start_daemon("loopback:resid-abort-live").unwrap();
    let pid = src.spawn(&GuestSpec::new(1, 2048 * 4096)).unwrap();
    let before = src.digest(pid).unwrap();
    let id = src
        .submit(RequestSpec::migrate(vec![pid], &daemon.endpoint(), Strategy::StopAndCopy))
        .unwrap();
    match src.abort(id) {
        Ok(()) => {
            src.wait(id).unwrap_err();
            assert_eq!(src.digest(pid).unwrap(), before);
            assert!(dst.host().is_empty() || {
                std::thread::sleep(std::time::Duration::from_millis(200));
                dst.host().is_empty()
            });
        }
        // The batch may already have committed on a fast machine.
        Err(ControlError::AlreadyTerminal(_)) => {
            src.wait(id).unwrap();
        }
        Err(e) => panic!("{e}"),
    }
}
