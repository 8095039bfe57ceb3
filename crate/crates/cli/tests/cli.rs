use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_enoki");

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Kills the process if the test panics before it is stopped.
struct Daemon(Child);

impl Daemon {
    fn spawn(args: &[&str]) -> Daemon {
        Daemon(
            Command::new(BIN)
                .args(args)
                .env("ENOKI_LOG", "warn")
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn()
                .unwrap(),
        )
    }

    /// Sends SIGINT and waits for a clean exit.
    fn interrupt(mut self) -> bool {
        Command::new("kill").args(["-INT", &self.0.id().to_string()]).status().unwrap();
        let deadline = Instant::now() + Duration::from_secs(10);
        while Instant::now() < deadline {
            if let Some(status) = self.0.try_wait().unwrap() {
                return status.success();
            }
            sleep(Duration::from_millis(50));
        }
        false
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn enoki(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn wait_for(addr: &str) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while std::net::TcpStream::connect(addr).is_err() {
        assert!(Instant::now() < deadline, "{addr} never came up");
        sleep(Duration::from_millis(50));
    }
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).trim().to_owned()
}

#[test]
fn daemons_deploy_and_invoke() {
    let dir = tempfile::tempdir().unwrap();
    let naming = format!("127.0.0.1:{}", free_port());
    let http = format!("127.0.0.1:{}", free_port());
    let rpc = format!("127.0.0.1:{}", free_port());
    let topo = dir.path().join("topology.json");
    std::fs::write(
        &topo,
        r#"{"nodes":[{"id":"edge-1","role":"edge"}],"links":[],"default":{"rtt_ms":0,"mbps":0}}"#,
    )
    .unwrap();
    let config = dir.path().join("node.json");
    let body = serde_json::json!({
        "id": "edge-1",
        "listen_http": http,
        "listen_rpc": rpc,
        "naming_addr": naming,
        "topology_path": topo,
        "role": "edge",
    });
    std::fs::write(&config, body.to_string()).unwrap();

    let naming_d = Daemon::spawn(&["naming", "--listen", &naming]);
    wait_for(&naming);
    let node_d = Daemon::spawn(&["node", "--config", config.to_str().unwrap()]);
    wait_for(&http);

    let out = enoki(&["deploy", "--node", &http, "--name", "avg", "--handler", "movavg", "--threads", "2", "--env", "k=v"]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("created_keygroup"));

    let avg = |input: &str| stdout(&enoki(&["invoke", "--node", &http, "--name", "avg", "--input", input]));
    assert_eq!(avg("4"), "4.0");
    assert_eq!(avg("6"), "5.0");
    let out = enoki(&["invoke", "--node", &http, "--name", "avg", "--async", "--input", "8"]);
    assert!(out.status.success(), "{out:?}");

    let missing = enoki(&["invoke", "--node", &http, "--name", "nope"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("NotFound"));
    let bad = enoki(&["deploy", "--node", &http, "--name", "x", "--handler", "bogus"]);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("BadRequest"));
    assert!(!enoki(&["deploy", "--node", &http, "--name", "x", "--handler", "movavg", "--env", "novalue"]).status.success());

    assert!(node_d.interrupt(), "node did not stop cleanly");
    assert!(naming_d.interrupt(), "naming did not stop cleanly");
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn bench_writes_both_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = enoki(&[
        "bench", "--scenario", "single", "--variant", "store=edge", "--duration", "1", "--repetitions", "1",
        "--seed", "3", "--out", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let report = lines(&out_dir.join("report.csv"));
    assert!(report[0].starts_with("scenario,variant,op,start_us"));
    assert!(report.len() >= 8, "{} rows", report.len());
    assert!(report[1..].iter().all(|r| r.starts_with("single,store=edge,")));
    let summary = lines(&out_dir.join("summary.csv"));
    assert_eq!(summary.len(), 2);

    let unknown = enoki(&["bench", "--scenario", "nope", "--out", out_dir.to_str().unwrap()]);
    assert!(!unknown.status.success());
    let wrong_variant = enoki(&["bench", "--scenario", "replication", "--variant", "store=edge"]);
    assert!(!wrong_variant.status.success());
}
