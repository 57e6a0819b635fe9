//! Scenario files.
//!
//! A scenario is a JSON document:
//!
//! ```json
//! {
//!   "name": "fig2_normal",
//!   "seed": 42,
//!   "world": {
//!     "base_stations": [{ "id": 1, "position": { "x": 0, "y": 0 } }],
//!     "vehicles": [
//!       { "id": 1, "label": "A", "position": { "x": 0, "y": 0 },
//!         "velocity": { "vx": 0, "vy": 13.4 }, "reputation": 50 }
//!     ],
//!     "population": { "count": 100, "first_id": 1000,
//!                     "area": { "min_x": -2000, "min_y": -2000, "max_x": 2000, "max_y": 2000 } }
//!   },
//!   "accident": { "colliding": [1, 2], "time_ms": 60000 },
//!   "protocol": { "m": 5, "threshold": "supermajority", "reply_window_ms": 500 },
//!   "latency": { "dsrc_ms": 10, "cellular_ms": 50, "loss_rate": 0.0 },
//!   "attacks": [{ "kind": "tamper_event", "attacker": 3, "field": "speed", "delta": 5.0 }]
//! }
//! ```
//!
//! Vehicle fields beyond `id` and `position` are optional: `velocity`
//! (m/s, default at rest), `reputation` (default 50), `plate`/`vin`,
//! `key_seed` (64 hex chars; default derived from the id), `sensor_speed`
//! (what the vehicle's own EDR reports, default the true speed) and
//! `observations` (speed estimates recorded at the accident instant,
//! default: true speeds of colliding vehicles in DSRC range).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Encoder;
use crate::crypto::digest;
use crate::event::Observation;
use crate::net::{BaseStation, Position, Velocity};
use crate::protocol::{LatencyModel, ProtocolParams, ThresholdRule};
use crate::registry::{ReputationScore, VehicleId};

use super::attack::AttackSpec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigError {
    /// Dotted path of the offending field, e.g. `world.vehicles[2].id`.
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

fn default_reputation() -> ReputationScore {
    ReputationScore::from_milli(50_000)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub id: VehicleId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vin: Option<String>,
    pub position: Position,
    #[serde(default)]
    pub velocity: Velocity,
    #[serde(default = "default_reputation")]
    pub reputation: ReputationScore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_seed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor_speed: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub observations: Vec<Observation>,
}

impl VehicleSpec {
    pub fn new(id: u32, x: f64, y: f64) -> Self {
        Self {
            id: VehicleId(id),
            label: None,
            plate: None,
            vin: None,
            position: Position::new(x, y),
            velocity: Velocity::default(),
            reputation: default_reputation(),
            key_seed: None,
            sensor_speed: None,
            observations: Vec::new(),
        }
    }

    pub fn key_seed_bytes(&self) -> Result<[u8; 32], String> {
        match &self.key_seed {
            Some(h) => {
                let bytes = hex::decode(h).map_err(|e| format!("not hex: {e}"))?;
                bytes.try_into().map_err(|_| "expected 32 bytes".to_string())
            }
            None => {
                let mut enc = Encoder::new();
                enc.raw(b"POE/key/v1").value(&self.id);
                Ok(digest(&enc.finish()).0)
            }
        }
    }

    pub fn plate(&self) -> String {
        self.plate.clone().unwrap_or_else(|| format!("PLT-{:05}", self.id.0))
    }

    pub fn vin(&self) -> String {
        self.vin.clone().unwrap_or_else(|| format!("VIN{:014}", self.id.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Area {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

/// Randomly placed background traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub count: u32,
    pub first_id: u32,
    pub area: Area,
    #[serde(default = "PopulationSpec::default_reputation_range")]
    pub reputation: (f64, f64),
    #[serde(default = "PopulationSpec::default_max_speed")]
    pub max_speed: f64,
    /// Defaults to the scenario seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PopulationSpec {
    fn default_reputation_range() -> (f64, f64) {
        (20.0, 90.0)
    }

    fn default_max_speed() -> f64 {
        20.0
    }

    pub fn generate(&self, scenario_seed: u64) -> Vec<VehicleSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.unwrap_or(scenario_seed));
        let (lo, hi) = self.reputation;
        (0..self.count)
            .map(|i| {
                let x = rng.gen_range(self.area.min_x..=self.area.max_x);
                let y = rng.gen_range(self.area.min_y..=self.area.max_y);
                let heading = rng.gen_range(0.0..std::f64::consts::TAU);
                let speed = rng.gen_range(0.0..=self.max_speed);
                let rep = rng.gen_range(lo..=hi);
                let mut v = VehicleSpec::new(self.first_id + i, x, y);
                v.velocity = Velocity {
                    vx: speed * heading.sin(),
                    vy: speed * heading.cos(),
                };
                v.reputation = ReputationScore::from_milli((rep * 1000.0).round() as u32);
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub base_stations: Vec<BaseStation>,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<PopulationSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccidentSpec {
    pub colliding: Vec<VehicleId>,
    pub time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub world: WorldSpec,
    pub accident: AccidentSpec,
    #[serde(default)]
    pub protocol: ProtocolParams,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Explicit vehicles followed by the generated population.
    pub fn all_vehicles(&self) -> Vec<VehicleSpec> {
        let mut all = self.world.vehicles.clone();
        if let Some(pop) = &self.world.population {
            all.extend(pop.generate(self.seed));
        }
        all
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.protocol;
        if !(p.dsrc_range.is_finite() && p.dsrc_range > 0.0) {
            return Err(ConfigError::new("protocol.dsrc_range", "must be positive"));
        }
        if p.m == 0 {
            return Err(ConfigError::new("protocol.m", "federation size must be at least 1"));
        }
        if p.threshold == ThresholdRule::Fixed(0) {
            return Err(ConfigError::new(
                "protocol.threshold",
                "fixed threshold must be at least 1",
            ));
        }
        if p.edr_capacity == 0 || p.edr_period_ms == 0 {
            return Err(ConfigError::new("protocol", "EDR capacity and period must be positive"));
        }
        let l = &self.latency;
        if !(0.0..=1.0).contains(&l.loss_rate) {
            return Err(ConfigError::new("latency.loss_rate", "must lie in [0, 1]"));
        }
        if self.world.base_stations.is_empty() {
            return Err(ConfigError::new(
                "world.base_stations",
                "at least one base station is required",
            ));
        }
        let mut cells = BTreeSet::new();
        for (i, bs) in self.world.base_stations.iter().enumerate() {
            if !cells.insert(bs.id) {
                return Err(ConfigError::new(
                    format!("world.base_stations[{i}].id"),
                    "duplicate cell id",
                ));
            }
            if !bs.position.is_finite() {
                return Err(ConfigError::new(
                    format!("world.base_stations[{i}].position"),
                    "must be finite",
                ));
            }
        }
        if let Some(pop) = &self.world.population {
            let a = &pop.area;
            let finite = [a.min_x, a.min_y, a.max_x, a.max_y].iter().all(|v| v.is_finite());
            if !finite || a.min_x > a.max_x || a.min_y > a.max_y {
                return Err(ConfigError::new(
                    "world.population.area",
                    "must be a finite, non-empty rectangle",
                ));
            }
            let (lo, hi) = pop.reputation;
            if !(0.0 <= lo && lo <= hi && hi <= 100.0) {
                return Err(ConfigError::new(
                    "world.population.reputation",
                    "must be a range within [0, 100]",
                ));
            }
            if !(pop.max_speed.is_finite() && pop.max_speed >= 0.0) {
                return Err(ConfigError::new("world.population.max_speed", "must be non-negative"));
            }
        }

        let mut ids = BTreeMap::new();
        let explicit = self.world.vehicles.len();
        for (i, v) in self.all_vehicles().iter().enumerate() {
            let path = if i < explicit {
                format!("world.vehicles[{i}]")
            } else {
                format!("world.population[{}]", i - explicit)
            };
            if ids.insert(v.id, i).is_some() {
                return Err(ConfigError::new(
                    format!("{path}.id"),
                    format!("duplicate vehicle id {}", v.id),
                ));
            }
            if !v.position.is_finite() {
                return Err(ConfigError::new(format!("{path}.position"), "must be finite"));
            }
            if !(v.velocity.vx.is_finite() && v.velocity.vy.is_finite()) {
                return Err(ConfigError::new(format!("{path}.velocity"), "must be finite"));
            }
            if let Err(e) = v.key_seed_bytes() {
                return Err(ConfigError::new(format!("{path}.key_seed"), e));
            }
            if v.sensor_speed.is_some_and(|s| !(s.is_finite() && s >= 0.0)) {
                return Err(ConfigError::new(format!("{path}.sensor_speed"), "must be non-negative"));
            }
            for (j, o) in v.observations.iter().enumerate() {
                if !(o.estimated_speed.is_finite() && o.estimated_speed >= 0.0) {
                    return Err(ConfigError::new(
                        format!("{path}.observations[{j}].estimated_speed"),
                        "must be non-negative",
                    ));
                }
            }
        }
        if self.accident.colliding.is_empty() {
            return Err(ConfigError::new(
                "accident.colliding",
                "at least one colliding vehicle is required",
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, id) in self.accident.colliding.iter().enumerate() {
            if !ids.contains_key(id) {
                return Err(ConfigError::new(
                    format!("accident.colliding[{i}]"),
                    format!("unknown vehicle {id}"),
                ));
            }
            if !seen.insert(*id) {
                return Err(ConfigError::new(
                    format!("accident.colliding[{i}]"),
                    format!("vehicle {id} listed twice"),
                ));
            }
        }
        let known: BTreeSet<VehicleId> = ids.keys().copied().collect();
        for (i, a) in self.attacks.iter().enumerate() {
            a.check(&known, &self.accident.colliding)
                .map_err(|e| ConfigError::new(format!("attacks[{i}]"), e.to_string()))?;
        }
        Ok(())
    }
}
