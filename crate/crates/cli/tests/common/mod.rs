#![allow(dead_code)]

use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_immunegrid"))
}

pub fn cli(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn immunegrid")
}

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// A `serve` child process on a free port.
pub struct Server {
    pub child: Child,
    pub base: String,
    http: reqwest::blocking::Client,
}

impl Server {
    pub fn start(data_dir: &Path) -> Server {
        let port = free_port();
        let child = bin()
            .args(["serve", "--port", &port.to_string(), "--data-dir"])
            .arg(data_dir)
            .spawn()
            .expect("spawn serve");
        let s = Server {
            child,
            base: format!("http://127.0.0.1:{port}"),
            http: reqwest::blocking::Client::new(),
        };
        let t0 = Instant::now();
        while s.http.get(format!("{}/runs", s.base)).send().is_err() {
            assert!(t0.elapsed() < Duration::from_secs(20), "server did not come up");
            std::thread::sleep(Duration::from_millis(50));
        }
        s
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .json(&body)
            .timeout(Duration::from_secs(600))
            .send()
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().unwrap_or(Value::Null))
    }

    pub fn get_bytes(&self, path: &str) -> Vec<u8> {
        self.http.get(format!("{}{path}", self.base)).send().unwrap().bytes().unwrap().to_vec()
    }

    /// Creates a run and advances it to `ticks`; returns the run id.
    pub fn run_to(&self, scenario: &str, seed: u64, ticks: u64) -> String {
        let (s, h) = self.post("/runs", json!({"scenario": scenario, "seed": seed}));
        assert_eq!(s, 201, "{h}");
        let id = h["id"].as_str().unwrap().to_string();
        let (s, h) = self.post(&format!("/runs/{id}/advance"), json!({"until": ticks}));
        assert_eq!(s, 200, "{h}");
        id
    }

    /// SIGTERM, then waits for a clean exit.
    pub fn terminate(mut self) -> std::process::ExitStatus {
        let pid = self.child.id().to_string();
        Command::new("kill").args(["-TERM", &pid]).status().expect("kill");
        self.child.wait().unwrap()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
    }
}
