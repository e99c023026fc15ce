use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;

use futures_util::StreamExt;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;

use immunegrid::eventlog::{replay, run_to_log};
use immunegrid::scenario::builtin_scenario;
use immunegrid::service::Frame;

struct Running {
    addr: SocketAddr,
    stop: oneshot::Sender<()>,
    task: JoinHandle<std::io::Result<Vec<PathBuf>>>,
    dir: tempfile::TempDir,
    client: reqwest::Client,
}

async fn start() -> Running {
    let dir = tempfile::tempdir().unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, rx) = oneshot::channel();
    let data = dir.path().to_path_buf();
    let task = tokio::spawn(immunegrid_server::serve(listener, data, async {
        let _ = rx.await;
    }));
    Running {
        addr,
        stop,
        task,
        dir,
        client: reqwest::Client::new(),
    }
}

impl Running {
    fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.post(self.url(path)).json(&body).send().await.unwrap();
        let s = r.status().as_u16();
        (s, r.json().await.unwrap_or(Value::Null))
    }

    async fn create(&self, scenario: &str, seed: u64) -> String {
        let (s, v) = self.post("/runs", json!({"scenario": scenario, "seed": seed})).await;
        assert_eq!(s, 201, "{v}");
        v["id"].as_str().unwrap().to_string()
    }

    async fn log(&self, id: &str) -> Vec<u8> {
        let r = self.client.get(self.url(&format!("/runs/{id}/log"))).send().await.unwrap();
        assert_eq!(r.status().as_u16(), 200);
        r.bytes().await.unwrap().to_vec()
    }

    /// Stops the server; the data dir lives as long as the returned guard.
    async fn finish(self) -> (Vec<PathBuf>, tempfile::TempDir) {
        let _ = self.stop.send(());
        (self.task.await.unwrap().unwrap(), self.dir)
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn served_log_equals_batch_log() {
    let srv = start().await;
    let id = srv.create("bcell_crosslink", 7).await;
    let (s, h) = srv.post(&format!("/runs/{id}/advance"), json!({"ticks": 30})).await;
    assert_eq!(s, 200);
    assert_eq!(h["tick"], 30);
    assert_eq!(h["status"], "paused");
    let (s, h) = srv.post(&format!("/runs/{id}/advance"), json!({"until": 60})).await;
    assert_eq!((s, h["tick"].as_u64()), (200, Some(60)));
    let served = srv.log(&id).await;
    let sc = builtin_scenario("bcell_crosslink").unwrap();
    let (_, batch) = run_to_log(&sc, 7, 60, Vec::new(), |_, _| {}).unwrap();
    assert_eq!(served, batch);
    srv.finish().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn errors_map_to_status_codes() {
    let srv = start().await;
    let (s, v) = srv.post("/runs", json!({"scenario": "no_such", "seed": 1})).await;
    assert_eq!(s, 400);
    assert!(v["error"].as_str().unwrap().contains("simple_is"));

    let mut bad: Value = serde_json::to_value(builtin_scenario("bcell_crosslink").unwrap()).unwrap();
    bad["compartments"][0]["initial_concentrations"] = json!({"NOPE": 1});
    let (s, v) = srv.post("/runs", json!({"scenario": bad, "seed": 1})).await;
    assert_eq!(s, 422, "{v}");
    assert!(!v["report"]["errors"].as_array().unwrap().is_empty());

    let (s, _) = srv.post("/runs/r99/advance", json!({"ticks": 1})).await;
    assert_eq!(s, 404);

    let id = srv.create("bcell_crosslink", 1).await;
    let (s, h) = srv.post(&format!("/runs/{id}/advance"), json!({"ticks": 100000})).await;
    assert_eq!(s, 200);
    assert_eq!(h["tick"], 300);
    assert_eq!(h["status"], "finished");
    let inj = json!({"compartment": "tissue", "agent": "AG", "placement": {"kind": "uniform"}, "count": 5});
    let (s, _) = srv.post(&format!("/runs/{id}/inject"), inj).await;
    assert_eq!(s, 409);
    srv.finish().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn injection_is_logged_and_replays() {
    let srv = start().await;
    let id = srv.create("bcell_crosslink", 3).await;
    srv.post(&format!("/runs/{id}/advance"), json!({"ticks": 20})).await;
    let inj = json!({"compartment": "tissue", "agent": "AG", "placement": {"kind": "point", "x": 39, "y": 5, "z": 5}, "count": 50});
    let (s, v) = srv.post(&format!("/runs/{id}/inject"), inj).await;
    assert_eq!(s, 200, "{v}");
    assert_eq!(v, json!({"placed": 50, "tick": 20}));
    srv.post(&format!("/runs/{id}/advance"), json!({"ticks": 20})).await;
    let log = srv.log(&id).await;
    assert!(String::from_utf8_lossy(&log).contains("\"inject\""));
    assert!(replay(Cursor::new(log)).unwrap().matches());
    srv.finish().await;
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn subscribe(addr: SocketAddr, id: &str, query: &str) -> Ws {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/runs/{id}/frames?{query}"))
        .await
        .unwrap();
    ws
}

async fn collect(ws: &mut Ws, n: usize) -> Vec<Frame> {
    let mut out = Vec::new();
    while out.len() < n {
        if let Message::Text(t) = ws.next().await.unwrap().unwrap() {
            out.push(serde_json::from_str(&t).unwrap());
        }
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frame_stream_stride_and_slices() {
    let srv = start().await;
    let id = srv.create("bcell_crosslink", 2).await;
    let q = "stride=10&slices=tissue:B:x:0;tissue:B:x:400";
    let mut wa = subscribe(srv.addr, &id, q).await;
    let mut wb = subscribe(srv.addr, &id, q).await;
    srv.post(&format!("/runs/{id}/advance"), json!({"ticks": 100})).await;
    let a = collect(&mut wa, 10).await;
    let b = collect(&mut wb, 10).await;
    let ticks: Vec<u64> = a.iter().map(|f| f.tick).collect();
    assert_eq!(ticks, (1..=10).map(|k| k * 10).collect::<Vec<_>>());
    assert_eq!(a, b);
    for f in &a {
        assert_eq!(f.slices.len(), 2);
        assert_eq!(f.slices[0].rows, Some(10));
        assert!(f.slices[0].error.is_none());
        assert!(f.slices[1].error.is_some());
        assert!(f.slices[1].data.is_none());
        assert!(f.census["tissue"].cells["B"] > 0);
    }
    srv.finish().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shutdown_flushes_replayable_logs() {
    let srv = start().await;
    let id = srv.create("bcell_crosslink", 5).await;
    srv.post(&format!("/runs/{id}/advance"), json!({"ticks": 25})).await;
    let (s, h) = srv.post(&format!("/runs/{id}/resume"), json!({})).await;
    assert_eq!((s, h["status"].as_str()), (200, Some("running")));
    tokio::time::sleep(std::time::Duration::from_millis(100)).await;
    let (paths, _dir) = srv.finish().await;
    assert_eq!(paths.len(), 1);
    assert!(paths[0].ends_with(format!("{id}.ndjson")));
    let bytes = std::fs::read(&paths[0]).unwrap();
    let out = replay(Cursor::new(bytes)).unwrap();
    assert!(out.tick >= 25);
    assert!(out.matches());
}
