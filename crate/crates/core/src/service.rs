//! Run lifecycle and live steering. Each run owns a worker thread holding the
//! world; commands reach it through one ordered queue and frames fan out to
//! subscribers over bounded channels.

use std::collections::BTreeMap;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventlog::{end_line, LogWriter};
use crate::scenario::{build_model, scenario_digest, validate_scenario, Axis, InjectSpec, Scenario, ValidationReport};
use crate::World;

/// Frames buffered per subscriber before the engine waits.
pub const FRAME_BUFFER: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Paused,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHandle {
    pub id: String,
    pub scenario: String,
    pub digest: String,
    pub seed: u64,
    pub tick: u64,
    /// Run length from the scenario.
    pub ticks: u64,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRequest {
    pub compartment: String,
    pub agent: String,
    pub axis: Axis,
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceFrame {
    #[serde(flatten)]
    pub request: SliceRequest,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cols: Option<u32>,
    /// Row-major.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompartmentFrame {
    pub cells: BTreeMap<String, u64>,
    pub molecules: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub tick: u64,
    pub census: BTreeMap<String, CompartmentFrame>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slices: Vec<SliceFrame>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceError {
    #[error("unknown run {0}")]
    NotFound(String),
    #[error("invalid scenario:\n{0}")]
    Invalid(ValidationReport),
    #[error("run {0} is finished")]
    Finished(String),
    #[error("{0}")]
    Inject(String),
    #[error("stride must be at least 1")]
    BadStride,
    #[error("run {0} stopped")]
    Stopped(String),
    #[error("io: {0}")]
    Io(String),
}

/// Census of every compartment with zero counts kept.
pub fn frame(world: &World, slices: &[SliceRequest]) -> Frame {
    let model = world.model();
    let census = world.census();
    let mut out = BTreeMap::new();
    for (ci, c) in census.compartments.iter().enumerate() {
        let cells = model.labels.iter().cloned().zip(c.cells.iter().copied()).collect();
        let molecules = model.molecules.iter().map(|m| m.name.clone()).zip(c.molecules.iter().copied()).collect();
        out.insert(model.compartments[ci].name.clone(), CompartmentFrame { cells, molecules });
    }
    Frame {
        tick: world.tick(),
        census: out,
        slices: slices.iter().map(|r| slice_frame(world, r)).collect(),
    }
}

fn slice_frame(world: &World, r: &SliceRequest) -> SliceFrame {
    let model = world.model();
    let res = (|| {
        let comp = model
            .compartment(&r.compartment)
            .ok_or_else(|| format!("unknown compartment {}", r.compartment))?;
        let agent = model.agent(&r.agent).ok_or_else(|| format!("unknown agent {}", r.agent))?;
        world.slice(comp.index(), agent, r.axis, r.index).map_err(|e| e.to_string())
    })();
    match res {
        Ok(s) => SliceFrame {
            request: r.clone(),
            rows: Some(s.rows),
            cols: Some(s.cols),
            data: Some(s.data),
            error: None,
        },
        Err(e) => SliceFrame {
            request: r.clone(),
            rows: None,
            cols: None,
            data: None,
            error: Some(e),
        },
    }
}

struct Subscriber {
    stride: u64,
    slices: Vec<SliceRequest>,
    tx: SyncSender<Frame>,
}

enum Command {
    Advance(u64, Sender<RunHandle>),
    RunUntil(u64, Sender<RunHandle>),
    Pause(Sender<RunHandle>),
    Resume(Sender<RunHandle>),
    Inject(InjectSpec, Sender<Result<(u64, u64), ServiceError>>),
    Subscribe(Subscriber, Sender<()>),
    Snapshot(Vec<SliceRequest>, Sender<Frame>),
    Handle(Sender<RunHandle>),
    Export(Sender<Result<Vec<u8>, ServiceError>>),
    Stop(Sender<Vec<u8>>),
}

struct Run {
    id: String,
    scenario: String,
    digest: String,
    seed: u64,
    ticks: u64,
    world: World,
    log: LogWriter<Vec<u8>>,
    status: RunStatus,
    subs: Vec<Subscriber>,
}

impl Run {
    fn handle(&self) -> RunHandle {
        RunHandle {
            id: self.id.clone(),
            scenario: self.scenario.clone(),
            digest: self.digest.clone(),
            seed: self.seed,
            tick: self.world.tick(),
            ticks: self.ticks,
            status: self.status,
        }
    }

    fn step(&mut self) {
        if self.world.tick() >= self.ticks {
            self.status = RunStatus::Finished;
            return;
        }
        let rep = self.world.step();
        self.log.write_events(&rep.events).expect("in-memory log");
        let tick = rep.tick;
        // a blocked send holds the engine until the subscriber catches up
        self.subs.retain(|s| {
            if tick % s.stride != 0 {
                return true;
            }
            s.tx.send(frame(&self.world, &s.slices)).is_ok()
        });
        if self.world.tick() >= self.ticks {
            self.status = RunStatus::Finished;
        }
    }

    fn advance_to(&mut self, target: u64) {
        let target = target.min(self.ticks);
        while self.world.tick() < target {
            self.step();
        }
        if self.world.tick() >= self.ticks {
            self.status = RunStatus::Finished;
        }
    }

    fn export(&self) -> Vec<u8> {
        let mut out = self.log.get_ref().clone();
        out.extend_from_slice(end_line(&self.world).as_bytes());
        out
    }

    /// Returns false once the run should shut down.
    fn apply(&mut self, cmd: Command) -> bool {
        match cmd {
            Command::Advance(n, tx) => {
                let t = self.world.tick().saturating_add(n);
                self.advance_to(t);
                let _ = tx.send(self.handle());
            }
            Command::RunUntil(t, tx) => {
                self.advance_to(t);
                let _ = tx.send(self.handle());
            }
            Command::Pause(tx) => {
                if self.status == RunStatus::Running {
                    self.status = RunStatus::Paused;
                }
                let _ = tx.send(self.handle());
            }
            Command::Resume(tx) => {
                if self.status == RunStatus::Paused {
                    self.status = RunStatus::Running;
                }
                let _ = tx.send(self.handle());
            }
            Command::Inject(spec, tx) => {
                let r = if self.status == RunStatus::Finished {
                    Err(ServiceError::Finished(self.id.clone()))
                } else {
                    match self.world.inject_live(&spec) {
                        Ok(placed) => {
                            let ev = self.world.drain_events();
                            self.log.write_events(&ev).expect("in-memory log");
                            Ok((placed, self.world.tick()))
                        }
                        Err(e) => Err(ServiceError::Inject(e.to_string())),
                    }
                };
                let _ = tx.send(r);
            }
            Command::Subscribe(s, tx) => {
                self.subs.push(s);
                let _ = tx.send(());
            }
            Command::Snapshot(slices, tx) => {
                let _ = tx.send(frame(&self.world, &slices));
            }
            Command::Handle(tx) => {
                let _ = tx.send(self.handle());
            }
            Command::Export(tx) => {
                let _ = tx.send(Ok(self.export()));
            }
            Command::Stop(tx) => {
                let _ = tx.send(self.export());
                return false;
            }
        }
        true
    }

    fn work(mut self, rx: Receiver<Command>) {
        loop {
            let cmd = if self.status == RunStatus::Running {
                match rx.try_recv() {
                    Ok(c) => Some(c),
                    Err(TryRecvError::Empty) => None,
                    Err(TryRecvError::Disconnected) => return,
                }
            } else {
                match rx.recv_timeout(Duration::from_secs(3600)) {
                    Ok(c) => Some(c),
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => return,
                }
            };
            match cmd {
                Some(c) => {
                    if !self.apply(c) {
                        return;
                    }
                }
                None => self.step(),
            }
        }
    }
}

struct RunEntry {
    tx: Sender<Command>,
    worker: Option<JoinHandle<()>>,
}

/// All runs of one service instance.
#[derive(Default)]
pub struct RunManager {
    runs: Mutex<BTreeMap<String, RunEntry>>,
    next: Mutex<u64>,
}

impl RunManager {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates, builds the world at tick 0 and starts the run paused.
    pub fn create_run(&self, scenario: Scenario, seed: u64) -> Result<RunHandle, ServiceError> {
        let report = validate_scenario(&scenario);
        if !report.is_ok() {
            return Err(ServiceError::Invalid(report));
        }
        let model = Arc::new(build_model(&scenario).map_err(|e| ServiceError::Invalid(ValidationReport {
                errors: vec![e.to_string()],
                warnings: Vec::new(),
            }))?);
        let id = {
            let mut n = self.next.lock().expect("id counter");
            *n += 1;
            format!("r{}", *n)
        };
        let world = World::new(model.clone(), seed);
        let log = LogWriter::new(Vec::new(), &scenario, model, seed).map_err(|e| ServiceError::Io(e.to_string()))?;
        let run = Run {
            id: id.clone(),
            scenario: scenario.name.clone(),
            digest: scenario_digest(&scenario),
            seed,
            ticks: scenario.run.ticks,
            world,
            log,
            status: RunStatus::Paused,
            subs: Vec::new(),
        };
        let handle = run.handle();
        let (tx, rx) = mpsc::channel();
        let worker = std::thread::Builder::new()
            .name(format!("run-{id}"))
            .spawn(move || run.work(rx))
            .map_err(|e| ServiceError::Io(e.to_string()))?;
        self.runs.lock().expect("run table").insert(
            id,
            RunEntry {
                tx,
                worker: Some(worker),
            },
        );
        Ok(handle)
    }

    pub fn ids(&self) -> Vec<String> {
        self.runs.lock().expect("run table").keys().cloned().collect()
    }

    fn send<T>(&self, id: &str, make: impl FnOnce(Sender<T>) -> Command) -> Result<T, ServiceError> {
        let tx = self
            .runs
            .lock()
            .expect("run table")
            .get(id)
            .map(|e| e.tx.clone())
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))?;
        let (rtx, rrx) = mpsc::channel();
        tx.send(make(rtx)).map_err(|_| ServiceError::Stopped(id.to_string()))?;
        rrx.recv().map_err(|_| ServiceError::Stopped(id.to_string()))
    }

    pub fn handle(&self, id: &str) -> Result<RunHandle, ServiceError> {
        self.send(id, Command::Handle)
    }

    /// Steps `n` ticks, clipped at the run length.
    pub fn advance(&self, id: &str, n: u64) -> Result<RunHandle, ServiceError> {
        self.send(id, |tx| Command::Advance(n, tx))
    }

    pub fn run_until(&self, id: &str, tick: u64) -> Result<RunHandle, ServiceError> {
        self.send(id, |tx| Command::RunUntil(tick, tx))
    }

    pub fn pause(&self, id: &str) -> Result<RunHandle, ServiceError> {
        self.send(id, Command::Pause)
    }

    /// Lets the worker step freely until paused or finished.
    pub fn resume(&self, id: &str) -> Result<RunHandle, ServiceError> {
        self.send(id, Command::Resume)
    }

    /// Returns `(placed, tick)`.
    pub fn inject(&self, id: &str, spec: InjectSpec) -> Result<(u64, u64), ServiceError> {
        self.send(id, |tx| Command::Inject(spec, tx))?
    }

    /// Frames for every tick divisible by `stride`, starting after the
    /// current tick.
    pub fn subscribe(&self, id: &str, stride: u64, slices: Vec<SliceRequest>) -> Result<Receiver<Frame>, ServiceError> {
        if stride == 0 {
            return Err(ServiceError::BadStride);
        }
        let (ftx, frx) = mpsc::sync_channel(FRAME_BUFFER);
        self.send(id, |tx| Command::Subscribe(Subscriber { stride, slices, tx: ftx }, tx))?;
        Ok(frx)
    }

    /// The current view, for clients that (re)connect.
    pub fn snapshot(&self, id: &str, slices: Vec<SliceRequest>) -> Result<Frame, ServiceError> {
        self.send(id, |tx| Command::Snapshot(slices, tx))
    }

    /// The log so far, closed with an end record at the current tick.
    pub fn export_log(&self, id: &str) -> Result<Vec<u8>, ServiceError> {
        self.send(id, Command::Export)?
    }

    /// Stops every run and returns their logs.
    pub fn shutdown(&self) -> Vec<(String, Vec<u8>)> {
        let entries: Vec<(String, RunEntry)> = std::mem::take(&mut *self.runs.lock().expect("run table")).into_iter().collect();
        let mut out = Vec::new();
        for (id, mut e) in entries {
            let (rtx, rrx) = mpsc::channel();
            if e.tx.send(Command::Stop(rtx)).is_ok() {
                if let Ok(log) = rrx.recv() {
                    out.push((id, log));
                }
            }
            if let Some(w) = e.worker.take() {
                let _ = w.join();
            }
        }
        out
    }
}

impl Drop for RunManager {
    fn drop(&mut self) {
        self.shutdown();
    }
}
