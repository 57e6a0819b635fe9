//! Single-threaded discrete-event scheduler.
//!
//! Pending work is ordered by `(time, sender, sequence)`; the sequence
//! number is global and strictly increasing, so the order is total and a
//! run is a pure function of its configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crypto::{digest_of, keygen, KeyPair};
use crate::event::{AccidentId, EdrLog, EdrSample, Observation};
use crate::ledger::Ledger;
use crate::net::{vehicular_network_in, Position, VehicleState, WorldState};
use crate::protocol::{
    apply_incentives, detect_accident, AccidentContext, Address, Channel, Destination, Directory, Input, Message,
    NodeState, Outbound, SignedMessage, Timer,
};
use crate::registry::{DmvRegistry, RegistryEntry, VehicleId};

use super::attack::{behaviours, Actor};
use super::config::{ConfigError, ScenarioConfig, VehicleSpec};
use super::outcome::{classify_outcome, metrics, participations, Classification, Inputs, Metrics};
use super::transcript::{Delivery, DmvNote, DropReason, Entry, LogLevel, LogNote, NoteEntry, Status, Transcript};

/// Upper bound on processed items; a run that needs more is a bug.
const MAX_STEPS: usize = 5_000_000;

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub scenario: String,
    pub seed: u64,
    pub accident_id: AccidentId,
    pub classification: Classification,
    pub ledger: Ledger,
    pub transcript: Transcript,
    pub metrics: Metrics,
    /// Registry the run started with.
    pub registry: DmvRegistry,
    /// Registry after incentives were applied.
    pub registry_after: DmvRegistry,
}

/// Registry, keys and world for a scenario.
pub fn build_world(
    cfg: &ScenarioConfig,
) -> Result<(DmvRegistry, BTreeMap<VehicleId, KeyPair>, WorldState), ConfigError> {
    let mut registry = DmvRegistry::default();
    let mut keys = BTreeMap::new();
    let mut world = WorldState {
        vehicles: BTreeMap::new(),
        base_stations: cfg.world.base_stations.clone(),
        dsrc_range: cfg.protocol.dsrc_range,
    };
    for v in cfg.all_vehicles() {
        let seed = v
            .key_seed_bytes()
            .map_err(|e| ConfigError::new(format!("vehicle {}", v.id), e))?;
        let kp = keygen(&seed);
        registry
            .register(
                v.id,
                RegistryEntry {
                    plate: v.plate(),
                    vin: v.vin(),
                    public_key: kp.public(),
                    reputation: v.reputation,
                },
            )
            .map_err(|e| ConfigError::new(format!("vehicle {}", v.id), e.to_string()))?;
        keys.insert(v.id, kp);
        world.vehicles.insert(
            v.id,
            VehicleState {
                position: v.position,
                velocity: v.velocity,
            },
        );
    }
    Ok((registry, keys, world))
}

/// Pre-accident EDR history, back-extrapolated at constant velocity. The
/// sample at the accident instant carries the vehicle's speed estimates of
/// colliding vehicles it could see.
fn edr_for(v: &VehicleSpec, cfg: &ScenarioConfig, colliding: &[(VehicleId, Position, f64)]) -> EdrLog {
    let p = &cfg.protocol;
    let t0 = cfg.accident.time_ms;
    let keep = (p.edr_half_width_ms / p.edr_period_ms + 1).min(p.edr_capacity as u64);
    let speed = v.sensor_speed.unwrap_or_else(|| v.velocity.speed());
    let heading = v.velocity.heading_deg();
    let observations: Vec<Observation> = if v.observations.is_empty() {
        colliding
            .iter()
            .filter(|(id, pos, _)| *id != v.id && pos.distance(&v.position) <= p.dsrc_range)
            .map(|(id, _, s)| Observation {
                subject: *id,
                estimated_speed: *s,
            })
            .collect()
    } else {
        v.observations.clone()
    };
    let mut log = EdrLog::new(p.edr_capacity).expect("validated: capacity > 0");
    for k in (0..keep).rev() {
        let dt = k * p.edr_period_ms;
        if dt > t0 {
            continue;
        }
        let secs = dt as f64 / 1000.0;
        let sample = EdrSample {
            t: t0 - dt,
            position: Position::new(v.position.x - v.velocity.vx * secs, v.position.y - v.velocity.vy * secs),
            speed,
            heading,
            observations: if k == 0 { observations.clone() } else { Vec::new() },
        };
        log.record(sample).expect("samples are generated in time order");
    }
    log
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    time: u64,
    sender: u64,
    seq: u64,
}

#[derive(Debug, Clone)]
enum Pending {
    Crash {
        vehicle: VehicleId,
        colliding: BTreeSet<VehicleId>,
    },
    Timer {
        vehicle: VehicleId,
        timer: Timer,
    },
    Deliver {
        to: Address,
        channel: Channel,
        message: usize,
    },
}

struct Harness {
    dir: Arc<Directory>,
    actors: BTreeMap<VehicleId, Actor>,
    queue: BTreeMap<Key, Pending>,
    seq: u64,
    networks: BTreeMap<AccidentId, BTreeSet<VehicleId>>,
    loss_rng: ChaCha8Rng,
    transcript: Transcript,
    ledger: Ledger,
    accepted_at: Option<u64>,
}

impl Harness {
    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn schedule(&mut self, time: u64, sender: u64, item: Pending) {
        let seq = self.next_seq();
        self.queue.insert(Key { time, sender, seq }, item);
    }

    fn note(&mut self, time: u64, actor: Address, note: LogNote) {
        self.transcript
            .entries
            .push(Entry::Note(NoteEntry { time, actor, note }));
    }

    fn latency(&self, channel: Channel) -> u64 {
        match channel {
            Channel::Dsrc => self.dir.latency.dsrc_ms,
            Channel::Cellular => self.dir.latency.cellular_ms,
            Channel::Loopback => 0,
        }
    }

    fn transmit(&mut self, from: VehicleId, now: u64, o: Outbound) {
        let send_time = now + o.extra_delay;
        let deliver_time = send_time + self.latency(o.channel);
        let receivers: Vec<Address> = match o.to {
            Destination::Vehicle(v) => vec![Address::Vehicle(v)],
            Destination::Dmv => vec![Address::Dmv],
            Destination::AccidentNetwork(aid) => self
                .networks
                .get(&aid)
                .map(|n| n.iter().filter(|v| **v != from).map(|v| Address::Vehicle(*v)).collect())
                .unwrap_or_default(),
        };
        let message_digest = digest_of(&o.envelope);
        let kind = o.envelope.message.kind();
        let accident_id = o.envelope.message.accident_id();
        let sender = o.envelope.sender;
        let message = self.transcript.messages.len();
        self.transcript.messages.push(Arc::new(o.envelope));
        for to in receivers {
            let status = self.route_status(from, to, o.channel);
            let seq = self.next_seq();
            self.transcript.entries.push(Entry::Send(Delivery {
                seq,
                send_time,
                deliver_time,
                from,
                sender,
                to,
                channel: o.channel,
                kind,
                accident_id,
                message,
                message_digest,
                status,
            }));
            if status == Status::Delivered {
                self.queue.insert(
                    Key {
                        time: deliver_time,
                        sender: from.0 as u64,
                        seq,
                    },
                    Pending::Deliver {
                        to,
                        channel: o.channel,
                        message,
                    },
                );
            }
        }
    }

    fn route_status(&mut self, from: VehicleId, to: Address, channel: Channel) -> Status {
        if let Address::Vehicle(v) = to {
            let Some(dest) = self.dir.world.vehicles.get(&v) else {
                return Status::Dropped(DropReason::UnknownRecipient);
            };
            if channel == Channel::Dsrc {
                let src = self.dir.world.vehicles[&from].position;
                if src.distance(&dest.position) > self.dir.params.dsrc_range {
                    return Status::Dropped(DropReason::OutOfRange);
                }
            }
        }
        let loss = self.dir.latency.loss_rate;
        if channel != Channel::Loopback && loss > 0.0 && self.loss_rng.gen::<f64>() < loss {
            return Status::Dropped(DropReason::Lost);
        }
        Status::Delivered
    }

    fn step_vehicle(&mut self, vehicle: VehicleId, input: Input, now: u64) {
        let Some(actor) = self.actors.get_mut(&vehicle) else {
            return;
        };
        let fx = actor.step(input, now);
        for n in fx.notes {
            self.note(now, Address::Vehicle(vehicle), LogNote::Vehicle(n));
        }
        for t in fx.timers {
            self.schedule(t.at.max(now), vehicle.0 as u64, Pending::Timer { vehicle, timer: t });
        }
        for o in fx.outbound {
            self.transmit(vehicle, now, o);
        }
    }

    fn dmv_receive(&mut self, env: &SignedMessage, now: u64) {
        let note = if !env.verify(&self.dir.registry) {
            DmvNote::InvalidEnvelope {
                claimed_sender: env.sender,
                kind: env.message.kind(),
            }
        } else {
            match &env.message {
                Message::NewBlockAnnouncement { block } => {
                    match self.ledger.accept_block(block.clone(), &self.dir.registry) {
                        Ok(height) => {
                            self.accepted_at.get_or_insert(now);
                            DmvNote::BlockAccepted {
                                accident_id: block.accident_id,
                                height,
                                block_hash: self.ledger.tip_hash(),
                            }
                        }
                        Err(e) => DmvNote::BlockRejected {
                            accident_id: block.accident_id,
                            error: e.to_string(),
                        },
                    }
                }
                Message::UnconfirmedRecord { record } if record.submitted_by == env.sender => {
                    self.ledger.unconfirmed.push(record.clone());
                    DmvNote::UnconfirmedStored {
                        accident_id: record.accident_id,
                        submitted_by: record.submitted_by,
                        reason: record.reason,
                    }
                }
                other => DmvNote::Ignored { kind: other.kind() },
            }
        };
        self.note(now, Address::Dmv, LogNote::Dmv(note));
    }

    fn run(&mut self) {
        let mut steps = 0;
        while let Some((key, item)) = self.queue.pop_first() {
            steps += 1;
            assert!(steps <= MAX_STEPS, "simulation did not quiesce");
            let now = key.time;
            match item {
                Pending::Crash { vehicle, colliding } => self.step_vehicle(vehicle, Input::Crash { colliding }, now),
                Pending::Timer { vehicle, timer } => self.step_vehicle(vehicle, Input::Timer(timer), now),
                Pending::Deliver { to, channel, message } => {
                    let env = Arc::clone(&self.transcript.messages[message]);
                    match to {
                        Address::Dmv => self.dmv_receive(&env, now),
                        Address::Vehicle(v) => self.step_vehicle(
                            v,
                            Input::Deliver {
                                channel,
                                envelope: (*env).clone(),
                            },
                            now,
                        ),
                    }
                }
            }
        }
    }
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimOutcome, ConfigError> {
    run_scenario_on(cfg, Ledger::new())
}

/// Runs `cfg` against an existing DMV ledger, appending to it.
pub fn run_scenario_on(cfg: &ScenarioConfig, ledger: Ledger) -> Result<SimOutcome, ConfigError> {
    cfg.validate()?;
    let (registry, keys, world) = build_world(cfg)?;
    let dir = Directory::new(registry, world, cfg.protocol.clone(), cfg.latency, cfg.seed)
        .map_err(|e| ConfigError::new("world", e.to_string()))?;
    let dir = Arc::new(dir);

    let t0 = cfg.accident.time_ms;
    let colliding: BTreeSet<VehicleId> = cfg.accident.colliding.iter().copied().collect();
    let det = detect_accident(&dir.world, &colliding, t0).map_err(|e| ConfigError::new("accident", e.to_string()))?;
    let network =
        vehicular_network_in(&colliding, &dir.cells).map_err(|e| ConfigError::new("accident", e.to_string()))?;
    let ctx = AccidentContext {
        accident_id: det.accident_id,
        accident_vehicles: colliding.clone(),
        scene: det.scene,
        accident_time: t0,
        dsrc_range: cfg.protocol.dsrc_range,
        reply_window: cfg.protocol.reply_window_ms,
    };

    let specs = cfg.all_vehicles();
    let colliding_info: Vec<(VehicleId, Position, f64)> = specs
        .iter()
        .filter(|v| colliding.contains(&v.id))
        .map(|v| (v.id, v.position, v.velocity.speed()))
        .collect();
    let mut roles = behaviours(&cfg.attacks);
    let mut actors = BTreeMap::new();
    for v in &specs {
        let node = NodeState::new(
            v.id,
            keys[&v.id].clone(),
            Arc::clone(&dir),
            edr_for(v, cfg, &colliding_info),
        );
        actors.insert(v.id, Actor::new(node, roles.remove(&v.id).unwrap_or_default()));
    }

    let mut h = Harness {
        dir: Arc::clone(&dir),
        actors,
        queue: BTreeMap::new(),
        seq: 0,
        networks: BTreeMap::from([(det.accident_id, network)]),
        loss_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        transcript: Transcript::default(),
        ledger,
        accepted_at: None,
    };
    for v in &colliding {
        h.schedule(
            t0,
            v.0 as u64,
            Pending::Crash {
                vehicle: *v,
                colliding: colliding.clone(),
            },
        );
    }
    h.run();

    let inputs = Inputs {
        cfg,
        ctx: &ctx,
        transcript: &h.transcript,
        ledger: &h.ledger,
        registry: &dir.registry,
        accepted_at: h.accepted_at,
    };
    let registry_after = apply_incentives(&dir.registry, &participations(&inputs), &cfg.protocol.incentives)
        .expect("participants are registered vehicles");
    let metrics = metrics(&inputs, &registry_after);
    let classification = classify_outcome(&h.transcript, cfg);
    Ok(SimOutcome {
        scenario: cfg.name.clone(),
        seed: cfg.seed,
        accident_id: det.accident_id,
        classification,
        ledger: h.ledger,
        transcript: h.transcript,
        metrics,
        registry: dir.registry.clone(),
        registry_after,
    })
}

/// Files written by [`SimOutcome::write_outputs`].
pub const LEDGER_FILE: &str = "ledger.poel";
pub const UNCONFIRMED_FILE: &str = "unconfirmed.poeu";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const REGISTRY_FILE: &str = "registry.json";
pub const LEDGER_JSON_FILE: &str = "ledger.json";

impl SimOutcome {
    /// Writes the ledger, unconfirmed records, transcript, metrics and the
    /// post-run registry into `dir`, creating it if needed. The transcript
    /// is skipped at [`LogLevel::Off`].
    pub fn write_outputs(&self, dir: &Path, level: LogLevel) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(LEDGER_FILE), self.ledger.to_file_bytes())?;
        fs::write(dir.join(UNCONFIRMED_FILE), self.ledger.unconfirmed_file_bytes())?;
        if level != LogLevel::Off {
            fs::write(dir.join(TRANSCRIPT_FILE), self.transcript.to_jsonl(level))?;
        }
        let json = |v: serde_json::Value| format!("{v:#}\n");
        fs::write(
            dir.join(METRICS_FILE),
            json(serde_json::json!({
                "scenario": self.scenario,
                "seed": self.seed,
                "accident_id": self.accident_id,
                "classification": self.classification,
                "metrics": self.metrics,
            })),
        )?;
        fs::write(
            dir.join(REGISTRY_FILE),
            json(serde_json::to_value(&self.registry_after)?),
        )?;
        fs::write(
            dir.join(LEDGER_JSON_FILE),
            json(serde_json::json!({
                "blocks": self.ledger.blocks(),
                "unconfirmed": self.ledger.unconfirmed,
            })),
        )?;
        Ok(())
    }
}
