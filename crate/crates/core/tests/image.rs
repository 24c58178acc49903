use procmig::control::{ControlError, RequestSpec, Strategy};
use procmig::guest::{GuestSpec, RunState};
use procmig::ids::SubsystemId;
use procmig::medium::{MediumError, CHUNK_MAGIC, IMAGE_MAGIC};
use procmig::node::{Node, NodeConfig, NodeError, Outcome};
use procmig::subsystem::counter;

fn chunk_starts(image: &[u8]) -> Vec<usize> {
    image
        .windows(4)
        .enumerate()
        .filter(|(_, w)| *w == CHUNK_MAGIC)
        .map(|(i, _)| i)
        .collect()
}

#[test]
fn checkpoint_then_restart_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for pages in [0u64, 1, 64] {
        let path = dir.path().join(format!("g{pages}.img"));
        let path = path.to_str().unwrap();
        let a = Node::new(NodeConfig::named("a"));
        let pid = a.spawn(&GuestSpec::new(3, pages * 4096)).unwrap();
        let before = a.digest(pid).unwrap();
        match a.run(RequestSpec::checkpoint(pid, path)).unwrap() {
            Outcome::Checkpointed(r) => assert_eq!(r.pid, pid.0),
            other => panic!("{other:?}"),
        }
        assert_eq!(a.process(pid).unwrap().lock().run_state, RunState::Running);
        assert!(std::fs::read(path).unwrap().starts_with(IMAGE_MAGIC));

        let b = Node::new(NodeConfig::named("b"));
        let restored = b.run(RequestSpec::restart(path)).unwrap().restarted_pid().unwrap();
        assert_eq!(b.process(restored).unwrap().lock().run_state, RunState::Resumed);
        assert_eq!(b.digest(restored).unwrap(), before, "{pages} pages");
    }
}

#[test]
fn truncated_image_is_a_truncated_stream() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.img");
    let path = path.to_str().unwrap();
    let a = Node::new(NodeConfig::named("a"));
    let pid = a.spawn(&GuestSpec::new(1, 4 * 4096)).unwrap();
    a.run(RequestSpec::checkpoint(pid, path)).unwrap();
    let full = std::fs::read(path).unwrap();
    let starts = chunk_starts(&full);
    for cut in [starts[starts.len() - 1], starts[starts.len() / 2]] {
        std::fs::write(path, &full[..cut]).unwrap();
        let b = Node::new(NodeConfig::named("b"));
        assert_eq!(
            b.run(RequestSpec::restart(path)).unwrap_err(),
            NodeError::Control(ControlError::Medium(MediumError::TruncatedStream))
        );
        assert!(b.host().is_empty());
    }
}

#[test]
fn image_with_unknown_subsystem_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.img");
    let path = path.to_str().unwrap();
    let a = Node::new(NodeConfig::named("a"));
    a.register(counter::descriptor()).unwrap();
    let pid = a.spawn(&GuestSpec::new(1, 4096)).unwrap();
    counter::increment(&mut a.process(pid).unwrap().lock(), 5);
    a.run(RequestSpec::checkpoint(pid, path)).unwrap();

    let b = Node::new(NodeConfig::named("b"));
    assert_eq!(
        b.run(RequestSpec::restart(path)).unwrap_err(),
        NodeError::Control(ControlError::UnknownSubsystem(SubsystemId::new("counter").unwrap()))
    );
    b.register(counter::descriptor()).unwrap();
    let restored = b.run(RequestSpec::restart(path)).unwrap().restarted_pid().unwrap();
    assert_eq!(counter::value(&b.process(restored).unwrap().lock()), Some(5));
}

#[test]
fn offline_media_refuse_live_strategies() {
    let a = Node::new(NodeConfig::named("a"));
    let pid = a.spawn(&GuestSpec::new(1, 4096)).unwrap();
    for strategy in [Strategy::lazy(), Strategy::pre_copy()] {
        let mut spec = RequestSpec::checkpoint(pid, "/nonexistent/x.img");
        spec.strategy = strategy;
        assert!(matches!(
            a.submit(spec),
            Err(NodeError::Control(ControlError::InvalidCombination(_)))
        ));
        let mut spec = RequestSpec::migrate(vec![pid], "loopback:x", strategy);
        spec.medium = "image-file".into();
        assert!(matches!(
            a.submit(spec),
            Err(NodeError::Control(ControlError::InvalidCombination(_)))
        ));
    }
}
