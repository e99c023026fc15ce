//! Declarative scenario documents: parsing, validation, compilation and the
//! shipped scenarios.

mod compile;
mod format;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use compile::{compile, AgentFilter, AgentRef, CompartmentModel, Injection, Model, Transfer};
pub use format::*;

use crate::ode::{KineticsParams, KineticsState};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.errors {
            writeln!(f, "error: {e}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario:\n{0}")]
    Invalid(ValidationReport),
    #[error("unknown built-in {name:?}; valid names: {}", BUILTIN_NAMES.join(", "))]
    UnknownBuiltin { name: String },
    #[error("{0:?} is a kinetics parameter set, not an agent scenario")]
    NotAScenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parses a document without semantic checks.
pub fn parse_scenario_unchecked(text: &str) -> Result<Scenario, ScenarioError> {
    serde_json::from_str(text).map_err(|e| ScenarioError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Parses and validates a document.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let sc = parse_scenario_unchecked(text)?;
    let report = validate_scenario(&sc);
    if report.is_ok() {
        Ok(sc)
    } else {
        Err(ScenarioError::Invalid(report))
    }
}

pub fn validate_scenario(sc: &Scenario) -> ValidationReport {
    compile(sc).1
}

/// Validates and compiles, returning the full report on failure.
pub fn build_model(sc: &Scenario) -> Result<Model, ScenarioError> {
    match compile(sc) {
        (Some(m), _) => Ok(m),
        (None, report) => Err(ScenarioError::Invalid(report)),
    }
}

pub fn serialize_scenario(sc: &Scenario) -> String {
    serde_json::to_string_pretty(sc).expect("scenario serializes")
}

/// Hex SHA-256 of the canonical (compact) serialization.
pub fn scenario_digest(sc: &Scenario) -> String {
    let canon = serde_json::to_vec(sc).expect("scenario serializes");
    hex::encode(Sha256::digest(&canon))
}

pub const BUILTIN_NAMES: [&str; 5] = [
    "feedback_local",
    "simple_is",
    "bcell_crosslink",
    "kinetics_fig1",
    "kinetics_fig2",
];

const FEEDBACK_LOCAL: &str = include_str!("../../scenarios/feedback_local.json");
const SIMPLE_IS: &str = include_str!("../../scenarios/simple_is.json");
const BCELL_CROSSLINK: &str = include_str!("../../scenarios/bcell_crosslink.json");

/// Parameters and initial state of one kinetics figure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticsSetup {
    pub params: KineticsParams<f64>,
    pub init: KineticsState<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Builtin {
    Scenario(Box<Scenario>),
    Kinetics(KineticsSetup),
}

pub fn builtin(name: &str) -> Result<Builtin, ScenarioError> {
    let text = match name {
        "feedback_local" => FEEDBACK_LOCAL,
        "simple_is" => SIMPLE_IS,
        "bcell_crosslink" => BCELL_CROSSLINK,
        "kinetics_fig1" | "kinetics_fig2" => {
            let fig2 = name == "kinetics_fig2";
            return Ok(Builtin::Kinetics(KineticsSetup {
                params: KineticsParams {
                    p_infect: 0.3,
                    p_kill: if fig2 { 1.0 } else { 0.5 },
                    p_resp: if fig2 { 0.8 } else { 0.1 },
                    s: 0.01,
                    d_i: 0.01,
                    d_k: 0.01,
                    d_c: 0.01,
                },
                init: KineticsState::new(0.1, 0.1, 1.0),
            }));
        }
        _ => {
            return Err(ScenarioError::UnknownBuiltin {
                name: name.to_string(),
            })
        }
    };
    Ok(Builtin::Scenario(Box::new(parse_scenario(text)?)))
}

/// The agent-based built-ins only.
pub fn builtin_scenario(name: &str) -> Result<Scenario, ScenarioError> {
    match builtin(name)? {
        Builtin::Scenario(s) => Ok(*s),
        Builtin::Kinetics(_) => Err(ScenarioError::NotAScenario(name.to_string())),
    }
}

pub fn builtin_kinetics(name: &str) -> Result<KineticsSetup, ScenarioError> {
    match builtin(name)? {
        Builtin::Kinetics(k) => Ok(k),
        Builtin::Scenario(_) => Err(ScenarioError::UnknownBuiltin {
            name: name.to_string(),
        }),
    }
}

/// A built-in name or a path to a scenario file.
pub fn load_scenario(name_or_path: &str) -> Result<Scenario, ScenarioError> {
    if BUILTIN_NAMES.contains(&name_or_path) {
        return builtin_scenario(name_or_path);
    }
    let path = std::path::Path::new(name_or_path);
    if !path.exists() {
        return Err(ScenarioError::UnknownBuiltin {
            name: name_or_path.to_string(),
        });
    }
    parse_scenario(&std::fs::read_to_string(path)?)
}
