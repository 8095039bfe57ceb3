mod common;

use std::time::{Duration, Instant};

use bytes::Bytes;
use common::{n, start};
use enoki_core::netem::Role;
use enoki_core::noded::{Node, NodeConfig};
use enoki_core::proto::{first_blob, InvokeMode, Request, Response};
use enoki_core::ErrorKind;
use reqwest::StatusCode;

fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn url(node: &Node, path: &str) -> String {
    format!("http://{}{path}", node.http_addr())
}

async fn put(node: &Node, name: &str, body: &str) -> (StatusCode, String) {
    let resp = reqwest::Client::new()
        .put(url(node, &format!("/functions/{name}")))
        .body(body.to_owned())
        .send()
        .await
        .unwrap();
    (resp.status(), resp.text().await.unwrap())
}

async fn post(node: &Node, path: &str, body: &str) -> (StatusCode, String) {
    let resp = reqwest::Client::new()
        .post(url(node, path))
        .body(body.to_owned())
        .send()
        .await
        .unwrap();
    (resp.status(), resp.text().await.unwrap())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_api() {
    let cluster = start(&[("edge-1", Role::Edge), ("edge-2", Role::Edge)], &[("edge-1", "edge-2", 4.0, 0.0)]).await;
    let e1 = cluster.node("edge-1");
    let e2 = cluster.node("edge-2");

    let health = reqwest::get(url(e1, "/health")).await.unwrap();
    assert_eq!(health.status(), StatusCode::OK);
    assert_eq!(health.text().await.unwrap(), "ok");

    let (status, body) = put(e1, "movavg", r#"{"handler":"movavg"}"#).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, r#"{"created_keygroup":true}"#);
    assert_eq!(post(e1, "/functions/movavg", "4").await, (StatusCode::OK, "4.0".into()));

    let (status, body) = put(e2, "movavg", r#"{"handler":"movavg"}"#).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, r#"{"created_keygroup":false,"replicated_from":"edge-1"}"#);
    // The first value was replicated and is part of the window.
    assert_eq!(post(e2, "/functions/movavg", "8").await, (StatusCode::OK, "6.0".into()));

    assert_eq!(put(e1, "movavg", r#"{"handler":"movavg"}"#).await.0, StatusCode::OK);
    assert_eq!(put(e1, "movavg", r#"{"handler":"movavg","threads":3}"#).await.0, StatusCode::CONFLICT);
    assert_eq!(put(e1, "bad", r#"{"handler":"nope"}"#).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(put(e1, "bad", "not json").await.0, StatusCode::BAD_REQUEST);
    assert!(cluster
        .naming
        .service
        .lookup_keygroup(&"bad".parse().unwrap())
        .unwrap_err()
        .is(ErrorKind::NotFound));

    assert_eq!(put(e1, "echo", r#"{"handler":"echo"}"#).await.0, StatusCode::OK);
    assert_eq!(post(e1, "/functions/echo", "hi").await, (StatusCode::OK, "hi".into()));
    assert_eq!(post(e1, "/functions/unknown", "hi").await.0, StatusCode::NOT_FOUND);
    assert_eq!(post(e1, "/functions/unknown/async", "hi").await.0, StatusCode::NOT_FOUND);
    assert_eq!(post(e1, "/functions/movavg", "x").await.0, StatusCode::INTERNAL_SERVER_ERROR);
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn subprocess_handler_runs_the_hello_world_function() {
    let cluster = start(&[("edge-1", Role::Edge)], &[]).await;
    let e1 = cluster.node("edge-1");
    let body = format!(r#"{{"handler":"cmd:python3 {}"}}"#, fixture("hello.py"));
    assert_eq!(put(e1, "hello", &body).await.0, StatusCode::OK);
    assert_eq!(post(e1, "/functions/hello", "").await, (StatusCode::OK, "Hello World!\n".into()));
    assert_eq!(
        post(e1, "/functions/hello", "").await,
        (StatusCode::OK, "Hello World!\nHello World!\n".into())
    );
    assert_eq!(post(e1, "/functions/hello", "fail").await.0, StatusCode::INTERNAL_SERVER_ERROR);

    // Async returns before the handler's sleep is over.
    let t = Instant::now();
    assert_eq!(post(e1, "/functions/hello/async", "sleep").await.0, StatusCode::ACCEPTED);
    assert!(t.elapsed() < Duration::from_millis(250));
    assert!(e1.runtime().drain(Duration::from_secs(5)).await);
    assert!(t.elapsed() >= Duration::from_millis(300));
    assert_eq!(
        post(e1, "/functions/hello", "").await.1,
        "Hello World!\n".repeat(4)
    );

    let missing = r#"{"handler":"cmd:/definitely/not/here"}"#;
    assert_eq!(put(e1, "ghost", missing).await.0, StatusCode::BAD_REQUEST);
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_does_not_wait_for_busy_functions() {
    let cluster = start(&[("edge-1", Role::Edge)], &[]).await;
    let e1 = cluster.node("edge-1").clone();
    let body = format!(r#"{{"handler":"cmd:python3 {}","threads":1}}"#, fixture("hello.py"));
    assert_eq!(put(&e1, "hello", &body).await.0, StatusCode::OK);
    for _ in 0..5 {
        post(&e1, "/functions/hello/async", "sleep").await;
    }
    let t = Instant::now();
    let health = reqwest::get(url(&e1, "/health")).await.unwrap();
    assert_eq!(health.status(), StatusCode::OK);
    assert!(t.elapsed() < Duration::from_millis(200));
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn client_traffic_is_shaped() {
    let cluster = start(
        &[("client", Role::Client), ("edge-1", Role::Edge)],
        &[("client", "edge-1", 50.0, 0.0)],
    )
    .await;
    cluster.node("edge-1").deploy(enoki_core::runtime::FunctionSpec::new("echo", "echo")).await.unwrap();
    let client = cluster.client("client", "edge-1");
    for _ in 0..5 {
        let t = Instant::now();
        let req = Request::Invoke {
            function: "echo".into(),
            mode: InvokeMode::Sync,
            depth: 0,
        };
        let (resp, blobs) = client.call(&req, &[Bytes::from_static(b"x")]).await.unwrap();
        assert_eq!(resp, Response::Output);
        assert_eq!(first_blob(blobs), "x");
        assert!(t.elapsed() >= Duration::from_millis(50), "{:?}", t.elapsed());
    }
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rpc_dispatch_errors() {
    let cluster = start(&[("client", Role::Client), ("edge-1", Role::Edge)], &[]).await;
    cluster.node("edge-1").deploy(enoki_core::runtime::FunctionSpec::new("echo", "echo")).await.unwrap();
    let client = cluster.client("client", "edge-1");
    let entry = cluster
        .node("edge-1")
        .store()
        .put_local(&"echo".parse().unwrap(), "k", Bytes::from_static(b"v"), &Default::default())
        .unwrap();
    let (meta, value) = enoki_core::proto::EntryMeta::split(entry);
    let update = |kg: &str| Request::Update {
        keygroup: kg.parse().unwrap(),
        entry: meta.clone(),
    };
    let (resp, _) = client.call(&update("echo"), std::slice::from_ref(&value)).await.unwrap();
    assert!(matches!(resp, Response::Applied { .. }));
    let err = client.call(&update("other"), &[value]).await.unwrap_err();
    assert!(err.is(ErrorKind::NotFound));
    let err = client
        .call(&Request::LookupKeygroup { name: "x".parse().unwrap() }, &[])
        .await
        .unwrap_err();
    assert!(err.is(ErrorKind::BadRequest));
    client.ping().await.unwrap();
    cluster.shutdown().await;
}

#[tokio::test]
async fn startup_validation() {
    let naming = enoki_core::naming::NamingServer::start("127.0.0.1:0").await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let topo = dir.path().join("topology.json");
    std::fs::write(
        &topo,
        r#"{"nodes":[{"id":"edge-1","role":"edge"}],"links":[],"default":{"rtt_ms":0,"mbps":0}}"#,
    )
    .unwrap();
    let config = NodeConfig {
        id: n("edge-1"),
        listen_http: "127.0.0.1:0".into(),
        listen_rpc: "127.0.0.1:0".into(),
        naming_addr: naming.addr.to_string(),
        topology_path: topo.clone(),
        role: Role::Edge,
    };
    let err = Node::start(config.clone()).await.err().unwrap();
    assert!(err.is(ErrorKind::BadRequest), "{err}");

    let ok = NodeConfig {
        listen_http: "localhost:0".into(),
        ..config.clone()
    };
    let node = Node::start(ok).await.unwrap();
    let health = reqwest::get(url(&node, "/health")).await.unwrap();
    assert_eq!(health.status(), StatusCode::OK);
    node.shutdown().await;

    let stranger = NodeConfig {
        id: n("edge-9"),
        listen_http: "localhost:0".into(),
        ..config.clone()
    };
    assert!(Node::start(stranger).await.err().unwrap().is(ErrorKind::BadRequest));

    let unreachable = NodeConfig {
        listen_http: "localhost:0".into(),
        naming_addr: "127.0.0.1:1".into(),
        ..config
    };
    let t = Instant::now();
    let err = Node::start(unreachable).await.err().unwrap();
    assert!(err.is(ErrorKind::Unavailable), "{err}");
    assert!(t.elapsed() >= Duration::from_millis(4000));
}
