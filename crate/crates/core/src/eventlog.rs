//! Newline-delimited event logs: a header carrying the scenario and seed,
//! one flat record per event, and an end record with the final world hash.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{BondEventKind, CellRef, Event, EventBody, World};
use crate::scenario::{build_model, scenario_digest, InjectSpec, Model, Scenario, ScenarioError};

pub const LOG_FORMAT: &str = "immunegrid-log";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub digest: String,
    pub seed: u64,
    pub scenario: Scenario,
}

/// One flat log line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub t: u64,
    #[serde(default)]
    pub seq: u32,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<[u32; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clone: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inject: Option<InjectSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<String>,
}

impl LogRecord {
    fn cell(t: u64, seq: u32, kind: &str, who: &CellRef, model: &Model) -> Self {
        LogRecord {
            t,
            seq,
            kind: kind.into(),
            comp: Some(model.compartments[who.comp as usize].name.clone()),
            pos: Some(who.pos),
            cell: Some(who.cell),
            clone: Some(who.clone),
            label: Some(model.labels[who.label.index()].clone()),
            ..Default::default()
        }
    }

    pub fn from_event(e: &Event, model: &Model) -> Self {
        let (t, seq) = (e.tick, e.seq);
        let label = |l: crate::model::LabelId| model.labels[l.index()].clone();
        match &e.body {
            EventBody::Action { who, action, target } => LogRecord {
                action: Some(action.verb().into()),
                target: target.map(label),
                ..Self::cell(t, seq, "action", who, model)
            },
            EventBody::Birth { who, parent } => LogRecord {
                parent: *parent,
                ..Self::cell(t, seq, "birth", who, model)
            },
            EventBody::Death { who, cause } => LogRecord {
                cause: Some(cause.as_str().into()),
                ..Self::cell(t, seq, "death", who, model)
            },
            EventBody::Differentiate { who, from } => LogRecord {
                from: Some(label(*from)),
                ..Self::cell(t, seq, "differentiate", who, model)
            },
            EventBody::Relabel { who, from } => LogRecord {
                from: Some(label(*from)),
                ..Self::cell(t, seq, "relabel", who, model)
            },
            EventBody::DivisionBlocked { who } => Self::cell(t, seq, "division_blocked", who, model),
            EventBody::Transfer { who, from } => LogRecord {
                from: Some(model.compartments[*from as usize].name.clone()),
                ..Self::cell(t, seq, "transfer", who, model)
            },
            EventBody::Bond(b) => LogRecord {
                t,
                seq,
                kind: match b.kind {
                    BondEventKind::Bind => "bind",
                    BondEventKind::Unbind => "unbind",
                    BondEventKind::Decay => "decay",
                }
                .into(),
                comp: Some(model.compartments[b.comp as usize].name.clone()),
                pos: Some(b.pos),
                a: Some(model.molecules[b.a.index()].name.clone()),
                b: b.b.map(|x| model.molecules[x.index()].name.clone()),
                ..Default::default()
            },
            EventBody::Inject { spec, placed } => LogRecord {
                t,
                seq,
                kind: "inject".into(),
                inject: Some(spec.clone()),
                placed: Some(*placed),
                ..Default::default()
            },
        }
    }

    /// `label.verb` for cell actions, `label.die` for deaths,
    /// `label.differentiate` (new label) for differentiation.
    pub fn analysis_label(&self) -> Option<String> {
        let l = self.label.as_deref()?;
        match self.kind.as_str() {
            "action" => match self.action.as_deref()? {
                "die" => None,
                v => Some(format!("{l}.{v}")),
            },
            "death" => Some(format!("{l}.die")),
            "differentiate" => Some(format!("{l}.differentiate")),
            _ => None,
        }
    }
}

/// Writes header, events and the end record.
pub struct LogWriter<W: Write> {
    out: W,
    model: Arc<Model>,
    last: (u64, u32),
    lines: u64,
}

impl<W: Write> LogWriter<W> {
    pub fn new(mut out: W, scenario: &Scenario, model: Arc<Model>, seed: u64) -> std::io::Result<Self> {
        let header = LogHeader {
            format: LOG_FORMAT.into(),
            version: LOG_VERSION,
            digest: scenario_digest(scenario),
            seed,
            scenario: scenario.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        Ok(Self {
            out,
            model,
            last: (0, 0),
            lines: 1,
        })
    }

    pub fn write_events(&mut self, events: &[Event]) -> std::io::Result<()> {
        for e in events {
            debug_assert!((e.tick, e.seq) >= self.last, "events out of order");
            self.last = (e.tick, e.seq);
            serde_json::to_writer(&mut self.out, &LogRecord::from_event(e, &self.model))?;
            self.out.write_all(b"\n")?;
            self.lines += 1;
        }
        Ok(())
    }

    /// Appends the end record; the log is complete after this.
    pub fn finish(mut self, world: &World) -> std::io::Result<W> {
        self.out.write_all(end_line(world).as_bytes())?;
        self.out.flush()?;
        Ok(self.out)
    }

    pub fn get_ref(&self) -> &W {
        &self.out
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }
}

/// The end record for the world's current tick, newline included.
pub fn end_line(world: &World) -> String {
    let rec = LogRecord {
        t: world.tick(),
        seq: 0,
        kind: "end".into(),
        hash: Some(world.hash()),
        ..Default::default()
    };
    let mut s = serde_json::to_string(&rec).expect("record serializes");
    s.push('\n');
    s
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty log")]
    Empty,
    #[error("unsupported log format {format:?} version {version}")]
    Format { format: String, version: u32 },
    #[error("scenario digest mismatch: header {header}, scenario {actual}")]
    DigestMismatch { header: String, actual: String },
    #[error("log truncated at line {line}: no end record")]
    Truncated { line: usize },
    #[error("line {line}: records out of order")]
    Order { line: usize },
    #[error("line {line}: injection failed: {message}")]
    Inject { line: usize, message: String },
    #[error("line {line}: injection placed {got}, log recorded {expected}")]
    Placed { line: usize, expected: u64, got: u64 },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A parsed log.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    pub header: LogHeader,
    pub records: Vec<LogRecord>,
    /// Final tick and hash from the end record.
    pub end: (u64, String),
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str, n: usize) -> Result<T, LogError> {
    serde_json::from_str(line).map_err(|e| LogError::Parse {
        line: n,
        message: e.to_string(),
    })
}

/// Reads and checks a whole log (format, digest, ordering, end record).
pub fn read_log<R: BufRead>(r: R) -> Result<EventLog, LogError> {
    let mut lines = r.lines();
    let first = lines.next().ok_or(LogError::Empty)??;
    let header: LogHeader = parse_line(&first, 1)?;
    if header.format != LOG_FORMAT || header.version != LOG_VERSION {
        return Err(LogError::Format {
            format: header.format,
            version: header.version,
        });
    }
    let actual = scenario_digest(&header.scenario);
    if actual != header.digest {
        return Err(LogError::DigestMismatch {
            header: header.digest,
            actual,
        });
    }
    let mut records = Vec::new();
    let mut end = None;
    let mut n = 1;
    let mut last = (0u64, 0u32);
    for line in lines {
        n += 1;
        let line = line?;
        if end.is_some() {
            if line.trim().is_empty() {
                continue;
            }
            return Err(LogError::Parse {
                line: n,
                message: "content after end record".into(),
            });
        }
        let rec: LogRecord = parse_line(&line, n)?;
        if rec.kind == "end" {
            let hash = rec.hash.clone().ok_or_else(|| LogError::Parse {
                line: n,
                message: "end record without hash".into(),
            })?;
            end = Some((rec.t, hash));
            continue;
        }
        if (rec.t, rec.seq) < last {
            return Err(LogError::Order { line: n });
        }
        last = (rec.t, rec.seq);
        records.push(rec);
    }
    let end = end.ok_or(LogError::Truncated { line: n + 1 })?;
    Ok(EventLog { header, records, end })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub tick: u64,
    pub expected: String,
    pub actual: String,
}

impl ReplayOutcome {
    pub fn matches(&self) -> bool {
        self.expected == self.actual
    }
}

/// Re-executes a log from its embedded scenario, reapplying recorded live
/// injections, and compares the final world hash.
pub fn replay<R: BufRead>(r: R) -> Result<ReplayOutcome, LogError> {
    let log = read_log(r)?;
    let model = Arc::new(build_model(&log.header.scenario)?);
    let mut world = World::new(model, log.header.seed);
    for (i, rec) in log.records.iter().enumerate() {
        if rec.kind != "inject" {
            continue;
        }
        while world.tick() < rec.t {
            world.step();
        }
        let spec = rec.inject.as_ref().ok_or_else(|| LogError::Parse {
            line: i + 2,
            message: "inject record without spec".into(),
        })?;
        let placed = world.inject_live(spec).map_err(|e| LogError::Inject {
            line: i + 2,
            message: e.to_string(),
        })?;
        if Some(placed) != rec.placed {
            return Err(LogError::Placed {
                line: i + 2,
                expected: rec.placed.unwrap_or(0),
                got: placed,
            });
        }
    }
    while world.tick() < log.end.0 {
        world.step();
    }
    Ok(ReplayOutcome {
        tick: world.tick(),
        expected: log.end.1,
        actual: world.hash(),
    })
}

/// Runs a scenario headless for `ticks`, writing the full log to `out`.
pub fn run_to_log<W: Write>(
    scenario: &Scenario,
    seed: u64,
    ticks: u64,
    out: W,
    mut on_tick: impl FnMut(&World, &crate::engine::TickReport),
) -> Result<(World, W), LogError> {
    let model = Arc::new(build_model(scenario)?);
    let mut world = World::new(model.clone(), seed);
    let mut w = LogWriter::new(out, scenario, model, seed)?;
    for _ in 0..ticks {
        let rep = world.step();
        w.write_events(&rep.events)?;
        on_tick(&world, &rep);
    }
    let out = w.finish(&world)?;
    Ok((world, out))
}
