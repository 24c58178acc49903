use std::time::Duration;

use procmig::control::{ExecCtx, QuiesceMethod, Strategy};
use procmig::ids::MigrationToken;
use procmig::medium::Endpoint;
use procmig::node::{Node, NodeConfig};
use procmig::proto::msg::{self, Accept, Offer, ProcessSummary, Reject, RejectReason};
use procmig::proto::{query_status, Link};

fn offer(node: &Node, version: u16) -> Offer {
    Offer {
        version,
        page_size: 4096,
        strategy: Strategy::StopAndCopy,
        quiesce: QuiesceMethod::Asynchronous,
        exec_ctx: ExecCtx::External,
        dedup: true,
        medium: "loopback".into(),
        processes: vec![ProcessSummary {
            pid: 1,
            threads: 1,
            private_pages: 1,
            shared: Vec::new(),
            files: Vec::new(),
        }],
        capabilities: node.registry().capabilities(),
    }
}

#[derive(Debug)]
enum Answer {
    Accept(#[allow(dead_code)] Accept),
    Reject(Reject),
}

fn exchange(endpoint: &str, token: MigrationToken, o: &Offer) -> Answer {
    let conn = endpoint.parse::<Endpoint>().unwrap().connect().unwrap();
    let link = Link::start(conn, None);
    link.send(msg::OFFER, token, o.encode()).unwrap();
    let f = link.recv(Duration::from_secs(5)).unwrap().unwrap();
    link.close();
    match f.kind {
        msg::ACCEPT => Answer::Accept(Accept::decode(&f.payload).unwrap()),
        msg::REJECT => Answer::Reject(Reject::decode(&f.payload).unwrap()),
        k => panic!("unexpected frame {k:#x}"),
    }
}

#[test]
fn second_offer_with_the_same_token_is_refused() {
    let dst = Node::new(NodeConfig::named("dst"));
    let daemon = dst.start_daemon("loopback:proto-dup").unwrap();
    let token = MigrationToken([9; 16]);
    let o = offer(&dst, msg::PROTOCOL_VERSION);
    assert!(matches!(exchange(&daemon.endpoint(), token, &o), Answer::Accept(_)));
    match exchange(&daemon.endpoint(), token, &o) {
        Answer::Reject(r) => {
            assert_eq!(r.reason, RejectReason::DuplicateToken);
            assert_eq!(r.subject, token.hex());
        }
        other => panic!("{other:?}"),
    }
    let other = MigrationToken([10; 16]);
    assert!(matches!(exchange(&daemon.endpoint(), other, &o), Answer::Accept(_)));
}

#[test]
fn version_mismatch_is_named() {
    let dst = Node::new(NodeConfig::named("dst"));
    let daemon = dst.start_daemon("loopback:proto-version").unwrap();
    let o = offer(&dst, msg::PROTOCOL_VERSION + 1);
    match exchange(&daemon.endpoint(), MigrationToken([1; 16]), &o) {
        Answer::Reject(r) => {
            assert_eq!(r.reason, RejectReason::VersionMismatch);
            assert_eq!(r.subject, "version");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn abandoned_offer_leaves_no_frames() {
    let dst = Node::new(NodeConfig::named("dst"));
    let daemon = dst.start_daemon("loopback:proto-abandon").unwrap();
    let o = offer(&dst, msg::PROTOCOL_VERSION);
    exchange(&daemon.endpoint(), MigrationToken([3; 16]), &o);
    std::thread::sleep(Duration::from_millis(100));
    assert!(dst.host().is_empty());
}

#[test]
fn status_query_reports_the_node() {
    let dst = Node::new(NodeConfig::named("dst-status"));
    dst.spawn(&procmig::guest::GuestSpec::new(1, 8192)).unwrap();
    let daemon = dst.start_daemon("loopback:proto-status").unwrap();
    let json = query_status(&daemon.endpoint(), Duration::from_secs(5)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["name"], "dst-status");
    assert_eq!(v["processes"][0]["pages"], 2);
    assert_eq!(v["subsystems"].as_array().unwrap().len(), 3);
}
