//! Deterministic simulation of accidents, attacks and their outcomes.

pub mod attack;
pub mod config;
mod harness;
pub mod outcome;
pub mod transcript;

pub use attack::{inject_attack, AttackSpec, CollusionBehavior, InvalidAttack, TamperField};
pub use config::{ConfigError, ScenarioConfig, VehicleSpec};
pub use harness::{
    build_world, run_scenario, run_scenario_on, SimOutcome, LEDGER_FILE, LEDGER_JSON_FILE, METRICS_FILE, REGISTRY_FILE,
    TRANSCRIPT_FILE, UNCONFIRMED_FILE,
};
pub use outcome::{classify_outcome, AttackOutcome, Classification, Metrics};
pub use transcript::{LogLevel, Transcript};
