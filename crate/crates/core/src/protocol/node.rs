//! Per-vehicle protocol state machine.
//!
//! A vehicle takes one role per accident. Accident vehicles detect the
//! crash, the origin (smallest colliding id) solicits witnesses over DSRC
//! and asks the vehicular network to form a federation. Every community
//! vehicle derives the same federation from the shared registry, geography
//! and scenario seed. Verifiers validate the event data they received at a
//! fixed point after the reply window closes and send the leader a signed
//! endorsement; the leader builds the block and hands it to the DMV.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;

use crate::crypto::{Digest256, KeyPair};
use crate::event::{make_event_data, AccidentId, EdrLog, EventData, EventRole, Reporter, WindowParams};
use crate::ledger::{endorsement_digest, BlockHeader, UnconfirmedEventRecord, UnconfirmedReason};
use crate::net::{centroid, dsrc_reachable, vehicular_network_in, CellId, NetError, Position, WorldState};
use crate::registry::{DmvRegistry, VehicleId};

use super::message::{Message, SignedMessage, VerifierValidation};
use super::{
    assemble_block, candidate_events, select_verifiers, selection_seed, validate_event, AccidentContext, Federation,
    FederationConfig, LatencyModel, ProtocolError, ProtocolParams, RejectReason, Role,
};

/// Shared, read-only knowledge every node may consult: the DMV registry,
/// map geography, protocol parameters and the scenario seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Directory {
    pub registry: DmvRegistry,
    pub world: WorldState,
    pub cells: BTreeMap<VehicleId, CellId>,
    pub params: ProtocolParams,
    pub latency: LatencyModel,
    pub seed: u64,
}

impl Directory {
    pub fn new(
        registry: DmvRegistry,
        mut world: WorldState,
        params: ProtocolParams,
        latency: LatencyModel,
        seed: u64,
    ) -> Result<Self, NetError> {
        world.dsrc_range = params.dsrc_range;
        world.validate()?;
        let cells = world.cells()?;
        Ok(Self {
            registry,
            world,
            cells,
            params,
            latency,
            seed,
        })
    }

    /// Vehicular network minus accident vehicles and anything within DSRC
    /// range of the scene (potential witnesses).
    pub fn community(&self, ctx: &AccidentContext) -> Result<BTreeSet<VehicleId>, ProtocolError> {
        let network = vehicular_network_in(&ctx.accident_vehicles, &self.cells)?;
        let near = dsrc_reachable(&ctx.scene, &self.world);
        Ok(network
            .into_iter()
            .filter(|v| !ctx.accident_vehicles.contains(v) && !near.contains(v))
            .collect())
    }

    pub fn federation_for(&self, ctx: &AccidentContext) -> Result<Federation, ProtocolError> {
        let community = self.community(ctx)?;
        select_verifiers(
            &community,
            &self.registry,
            &FederationConfig::from(&self.params),
            selection_seed(self.seed, &ctx.accident_id),
            ctx.accident_id,
        )
    }

    /// When the origin stops waiting for witness confirmations.
    pub fn collection_close(&self, t0: u64) -> u64 {
        t0 + self.params.reply_window_ms + 2 * self.latency.dsrc_ms
    }

    /// When verifiers judge what they hold: the last in-window witness
    /// broadcast has had one cellular hop to arrive.
    pub fn validation_point(&self, t0: u64) -> u64 {
        t0 + self.params.reply_window_ms + self.latency.dsrc_ms + self.latency.cellular_ms
    }

    pub fn leader_deadline(&self, t0: u64) -> u64 {
        t0 + self.params.validation_deadline_ms
    }

    fn context(
        &self,
        accident_id: AccidentId,
        vehicles: BTreeSet<VehicleId>,
        scene: Position,
        t0: u64,
    ) -> AccidentContext {
        AccidentContext {
            accident_id,
            accident_vehicles: vehicles,
            scene,
            accident_time: t0,
            dsrc_range: self.params.dsrc_range,
            reply_window: self.params.reply_window_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Dsrc,
    Cellular,
    Loopback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Address {
    Vehicle(VehicleId),
    Dmv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Vehicle(VehicleId),
    /// Cellular broadcast to every vehicle in the accident's vehicular
    /// network; resolved by the network, not the sender.
    AccidentNetwork(AccidentId),
    Dmv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: Destination,
    pub channel: Channel,
    pub envelope: SignedMessage,
    /// Held back this long before transmission.
    pub extra_delay: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerKind {
    CollectionClose,
    ValidationPoint,
    LeaderDeadline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Timer {
    pub at: u64,
    pub accident_id: AccidentId,
    pub kind: TimerKind,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Input {
    Crash { colliding: BTreeSet<VehicleId> },
    Deliver { channel: Channel, envelope: SignedMessage },
    Timer(Timer),
}

/// Observable facts a node reports about its own transitions.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "note", rename_all = "snake_case")]
pub enum Note {
    AccidentDetected {
        accident_id: AccidentId,
        origin: VehicleId,
        colliding: Vec<VehicleId>,
    },
    FederationFormed {
        accident_id: AccidentId,
        federation: Federation,
    },
    FederationEmpty {
        accident_id: AccidentId,
    },
    LateRequest {
        accident_id: AccidentId,
        sent_at: u64,
    },
    RoleConflict {
        accident_id: AccidentId,
        held: Role,
        offered: Role,
    },
    EventVerdict {
        accident_id: AccidentId,
        reporter: VehicleId,
        ok: bool,
        reasons: Vec<RejectReason>,
        late: bool,
    },
    BlockAssembled {
        accident_id: AccidentId,
        events: Vec<VehicleId>,
        signers: Vec<VehicleId>,
    },
    Unconfirmed {
        accident_id: AccidentId,
        reason: UnconfirmedReason,
    },
    InvalidEnvelope {
        claimed_sender: VehicleId,
        kind: &'static str,
    },
    Unexpected {
        kind: &'static str,
        detail: &'static str,
    },
    HeaderStored {
        height: u64,
        accident_id: AccidentId,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Effects {
    pub outbound: Vec<Outbound>,
    pub timers: Vec<Timer>,
    pub notes: Vec<Note>,
}

#[derive(Debug, Clone, PartialEq)]
struct AccidentRole {
    ctx: AccidentContext,
    origin: VehicleId,
    own_event: EventData,
    confirms: BTreeSet<VehicleId>,
    witness_events: BTreeMap<VehicleId, EventData>,
    federation: Option<Federation>,
}

#[derive(Debug, Clone, PartialEq)]
struct LeaderRole {
    validations: BTreeMap<VehicleId, VerifierValidation>,
    done: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct VerifierRole {
    ctx: AccidentContext,
    federation: Federation,
    events: BTreeMap<VehicleId, EventData>,
    validated: bool,
    leader: Option<LeaderRole>,
}

#[derive(Debug, Clone, PartialEq)]
enum Engagement {
    Accident(Box<AccidentRole>),
    Witness,
    Community,
    Verifier(Box<VerifierRole>),
}

impl Engagement {
    fn role(&self) -> Role {
        match self {
            Engagement::Accident(_) => Role::Accident,
            Engagement::Witness => Role::Witness,
            Engagement::Community => Role::Community,
            Engagement::Verifier(v) if v.leader.is_some() => Role::LeadVerifier,
            Engagement::Verifier(_) => Role::Verifier,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub id: VehicleId,
    keys: KeyPair,
    pub directory: Arc<Directory>,
    pub edr: EdrLog,
    /// Honest vehicles ignore requests older than the reply window.
    pub enforce_reply_window: bool,
    engagements: BTreeMap<AccidentId, Engagement>,
    /// Event data that arrived before the federation request.
    early_events: BTreeMap<AccidentId, Vec<EventData>>,
    headers: Vec<BlockHeader>,
}

impl NodeState {
    pub fn new(id: VehicleId, keys: KeyPair, directory: Arc<Directory>, edr: EdrLog) -> Self {
        Self {
            id,
            keys,
            directory,
            edr,
            enforce_reply_window: true,
            engagements: BTreeMap::new(),
            early_events: BTreeMap::new(),
            headers: Vec::new(),
        }
    }

    pub fn keys(&self) -> &KeyPair {
        &self.keys
    }

    pub fn role(&self, accident_id: &AccidentId) -> Option<Role> {
        self.engagements.get(accident_id).map(Engagement::role)
    }

    /// The federation this node derived for an accident, if it knows one.
    pub fn federation(&self, accident_id: &AccidentId) -> Option<&Federation> {
        match self.engagements.get(accident_id)? {
            Engagement::Accident(a) => a.federation.as_ref(),
            Engagement::Verifier(v) => Some(&v.federation),
            Engagement::Witness | Engagement::Community => None,
        }
    }

    pub fn headers(&self) -> &[BlockHeader] {
        &self.headers
    }

    pub fn seal(&self, message: Message) -> SignedMessage {
        SignedMessage::seal(self.id, message, &self.keys)
    }

    fn position(&self) -> Position {
        self.directory
            .world
            .vehicles
            .get(&self.id)
            .map(|v| v.position)
            .unwrap_or_default()
    }

    fn make_event(&self, role: EventRole, accident_id: AccidentId, now: u64, t_center: u64) -> Option<EventData> {
        make_event_data(
            Reporter {
                id: self.id,
                keys: &self.keys,
                position: self.position(),
                edr: &self.edr,
            },
            role,
            accident_id,
            now,
            WindowParams {
                t_center,
                half_width: self.directory.params.edr_half_width_ms,
            },
            &self.directory.registry,
        )
        .ok()
    }
}

/// What the origin of an accident sends out.
#[derive(Debug, Clone, PartialEq)]
pub struct AccidentDetection {
    pub accident_id: AccidentId,
    pub origin: VehicleId,
    pub scene: Position,
    pub accident_vehicles: BTreeSet<VehicleId>,
    /// One request per vehicle in DSRC range of the scene, over DSRC.
    pub requests: Vec<(VehicleId, Message)>,
    /// Cellular broadcast to the vehicular network.
    pub formation: Message,
}

pub fn detect_accident(
    world: &WorldState,
    colliding: &BTreeSet<VehicleId>,
    now: u64,
) -> Result<AccidentDetection, ProtocolError> {
    let origin = *colliding.first().ok_or(ProtocolError::NoCollision)?;
    let positions = colliding
        .iter()
        .map(|id| world.position(*id))
        .collect::<Result<Vec<_>, _>>()?;
    let scene = centroid(positions).expect("colliding set is non-empty");
    let accident_id = AccidentId::derive(world.cell_of(origin)?, now, colliding);
    let requests = dsrc_reachable(&scene, world)
        .into_iter()
        .filter(|v| !colliding.contains(v))
        .map(|v| {
            (
                v,
                Message::EventGenerationRequest {
                    accident_id,
                    origin,
                    sent_at: now,
                },
            )
        })
        .collect();
    Ok(AccidentDetection {
        accident_id,
        origin,
        scene,
        accident_vehicles: colliding.clone(),
        requests,
        formation: Message::FederationFormationRequest {
            accident_id,
            accident_vehicles: colliding.iter().copied().collect(),
            scene,
            accident_time: now,
        },
    })
}

/// Advances `node` by one input. Out-of-role or malformed inputs leave the
/// state unchanged and produce a note.
pub fn protocol_step(mut node: NodeState, input: Input, now: u64) -> (NodeState, Effects) {
    let mut fx = Effects::default();
    match input {
        Input::Crash { colliding } => on_crash(&mut node, &colliding, now, &mut fx),
        Input::Deliver { envelope, .. } => {
            if !envelope.verify(&node.directory.registry) {
                fx.notes.push(Note::InvalidEnvelope {
                    claimed_sender: envelope.sender,
                    kind: envelope.message.kind(),
                });
            } else {
                on_message(&mut node, envelope, now, &mut fx);
            }
        }
        Input::Timer(t) => on_timer(&mut node, t, now, &mut fx),
    }
    (node, fx)
}

fn unexpected(fx: &mut Effects, kind: &'static str, detail: &'static str) {
    fx.notes.push(Note::Unexpected { kind, detail });
}

fn send(node: &NodeState, fx: &mut Effects, to: Destination, channel: Channel, message: Message) {
    fx.outbound.push(Outbound {
        to,
        channel,
        envelope: node.seal(message),
        extra_delay: 0,
    });
}

fn on_crash(node: &mut NodeState, colliding: &BTreeSet<VehicleId>, now: u64, fx: &mut Effects) {
    if !colliding.contains(&node.id) {
        return unexpected(fx, "crash", "vehicle is not among the colliding set");
    }
    let det = match detect_accident(&node.directory.world, colliding, now) {
        Ok(d) => d,
        Err(_) => return unexpected(fx, "crash", "colliding vehicle missing from the world"),
    };
    if node.engagements.contains_key(&det.accident_id) {
        return unexpected(fx, "crash", "accident already detected");
    }
    let Some(own_event) = node.make_event(EventRole::Accident, det.accident_id, now, now) else {
        return unexpected(fx, "crash", "vehicle is not registered");
    };
    let dir = Arc::clone(&node.directory);
    let ctx = dir.context(det.accident_id, det.accident_vehicles.clone(), det.scene, now);
    let federation = dir.federation_for(&ctx).ok();
    let is_origin = det.origin == node.id;

    send(
        node,
        fx,
        Destination::AccidentNetwork(det.accident_id),
        Channel::Cellular,
        Message::EventDataBroadcast {
            event: own_event.clone(),
        },
    );
    if is_origin {
        fx.notes.push(Note::AccidentDetected {
            accident_id: det.accident_id,
            origin: det.origin,
            colliding: colliding.iter().copied().collect(),
        });
        fx.notes.push(match &federation {
            Some(f) => Note::FederationFormed {
                accident_id: det.accident_id,
                federation: f.clone(),
            },
            None => Note::FederationEmpty {
                accident_id: det.accident_id,
            },
        });
        for (to, req) in det.requests {
            send(node, fx, Destination::Vehicle(to), Channel::Dsrc, req);
        }
        send(
            node,
            fx,
            Destination::AccidentNetwork(det.accident_id),
            Channel::Cellular,
            det.formation,
        );
    }
    fx.timers.push(Timer {
        at: dir.collection_close(now),
        accident_id: det.accident_id,
        kind: TimerKind::CollectionClose,
    });
    node.engagements.insert(
        det.accident_id,
        Engagement::Accident(Box::new(AccidentRole {
            ctx,
            origin: det.origin,
            own_event,
            confirms: BTreeSet::new(),
            witness_events: BTreeMap::new(),
            federation,
        })),
    );
}

fn on_message(node: &mut NodeState, env: SignedMessage, now: u64, fx: &mut Effects) {
    let sender = env.sender;
    let kind = env.message.kind();
    match env.message {
        Message::EventGenerationRequest {
            accident_id,
            origin,
            sent_at,
        } => {
            if sender != origin {
                return unexpected(fx, kind, "relayed by someone other than the origin");
            }
            on_request(node, accident_id, origin, sent_at, now, fx)
        }
        Message::WitnessConfirm { accident_id, witness } => {
            if sender != witness {
                return unexpected(fx, kind, "sender is not the witness");
            }
            match node.engagements.get_mut(&accident_id) {
                Some(Engagement::Accident(a)) if a.origin == node.id => {
                    a.confirms.insert(witness);
                }
                _ => unexpected(fx, kind, "not the origin of this accident"),
            }
        }
        Message::EventDataBroadcast { event } => {
            if sender != event.reporter {
                return unexpected(fx, kind, "sender is not the reporter");
            }
            on_event(node, event, now, fx)
        }
        Message::FederationFormationRequest {
            accident_id,
            accident_vehicles,
            scene,
            accident_time,
        } => {
            let vehicles: BTreeSet<VehicleId> = accident_vehicles.into_iter().collect();
            if !vehicles.contains(&sender) {
                return unexpected(fx, kind, "sender is not an accident vehicle");
            }
            on_formation(node, accident_id, vehicles, scene, accident_time, fx)
        }
        Message::VerifierValidation(v) => {
            if sender != v.verifier {
                return unexpected(fx, kind, "sender is not the verifier");
            }
            on_validation(node, v, now, fx)
        }
        Message::NewBlockAnnouncement { block } => {
            if !block.hash_matches() {
                return unexpected(fx, kind, "block hash does not match contents");
            }
            let header = block.header();
            node.headers.push(header);
            fx.notes.push(Note::HeaderStored {
                height: header.height,
                accident_id: header.accident_id,
            });
        }
        Message::UnconfirmedRecord { .. } => unexpected(fx, kind, "only the DMV stores unconfirmed records"),
    }
}

fn on_request(
    node: &mut NodeState,
    accident_id: AccidentId,
    origin: VehicleId,
    sent_at: u64,
    now: u64,
    fx: &mut Effects,
) {
    if let Some(e) = node.engagements.get(&accident_id) {
        return match e.role() {
            Role::Accident => unexpected(fx, "event_generation_request", "accident vehicles do not witness"),
            Role::Witness => unexpected(fx, "event_generation_request", "duplicate request"),
            held => fx.notes.push(Note::RoleConflict {
                accident_id,
                held,
                offered: Role::Witness,
            }),
        };
    }
    if node.enforce_reply_window && now > sent_at + node.directory.params.reply_window_ms {
        fx.notes.push(Note::LateRequest { accident_id, sent_at });
        return;
    }
    let Some(event) = node.make_event(EventRole::Witness, accident_id, now, sent_at) else {
        return unexpected(fx, "event_generation_request", "vehicle is not registered");
    };
    send(
        node,
        fx,
        Destination::Vehicle(origin),
        Channel::Dsrc,
        Message::WitnessConfirm {
            accident_id,
            witness: node.id,
        },
    );
    send(
        node,
        fx,
        Destination::AccidentNetwork(accident_id),
        Channel::Cellular,
        Message::EventDataBroadcast { event },
    );
    node.engagements.insert(accident_id, Engagement::Witness);
}

fn on_event(node: &mut NodeState, event: EventData, _now: u64, fx: &mut Effects) {
    let registry = &node.directory.registry;
    match node.engagements.get_mut(&event.accident_id) {
        None => node.early_events.entry(event.accident_id).or_default().push(event),
        Some(Engagement::Accident(a)) => {
            if a.origin == node.id && event.role == EventRole::Witness {
                a.witness_events.entry(event.reporter).or_insert(event);
            }
        }
        Some(Engagement::Verifier(v)) => {
            if v.validated {
                let verdict = validate_event(&event, registry, &v.ctx);
                fx.notes.push(Note::EventVerdict {
                    accident_id: event.accident_id,
                    reporter: event.reporter,
                    ok: verdict.ok,
                    reasons: verdict.reasons,
                    late: true,
                });
            } else {
                v.events.entry(event.reporter).or_insert(event);
            }
        }
        Some(Engagement::Witness | Engagement::Community) => {}
    }
}

fn on_formation(
    node: &mut NodeState,
    accident_id: AccidentId,
    vehicles: BTreeSet<VehicleId>,
    scene: Position,
    accident_time: u64,
    fx: &mut Effects,
) {
    const KIND: &str = "federation_formation_request";
    if node.engagements.contains_key(&accident_id) {
        // Accident vehicles, witnesses and repeated requests.
        return;
    }
    let dir = Arc::clone(&node.directory);
    let origin = *vehicles.first().expect("sender is a member");
    match dir.cells.get(&origin) {
        Some(cell) if AccidentId::derive(*cell, accident_time, &vehicles) == accident_id => {}
        _ => return unexpected(fx, KIND, "accident id does not match its claimed origin"),
    }
    let ctx = dir.context(accident_id, vehicles, scene, accident_time);
    let Ok(community) = dir.community(&ctx) else {
        return unexpected(fx, KIND, "accident vehicle missing from the world");
    };
    if !community.contains(&node.id) {
        return;
    }
    let early = node.early_events.remove(&accident_id).unwrap_or_default();
    let federation = match dir.federation_for(&ctx) {
        Ok(f) if f.contains(node.id) => f,
        _ => {
            node.engagements.insert(accident_id, Engagement::Community);
            return;
        }
    };
    let is_leader = federation.leader == node.id;
    fx.timers.push(Timer {
        at: dir.validation_point(accident_time),
        accident_id,
        kind: TimerKind::ValidationPoint,
    });
    if is_leader {
        fx.timers.push(Timer {
            at: dir.leader_deadline(accident_time),
            accident_id,
            kind: TimerKind::LeaderDeadline,
        });
    }
    let mut events = BTreeMap::new();
    for e in early {
        events.entry(e.reporter).or_insert(e);
    }
    node.engagements.insert(
        accident_id,
        Engagement::Verifier(Box::new(VerifierRole {
            ctx,
            federation,
            events,
            validated: false,
            leader: is_leader.then(|| LeaderRole {
                validations: BTreeMap::new(),
                done: false,
            }),
        })),
    );
}

fn on_validation(node: &mut NodeState, v: VerifierValidation, now: u64, fx: &mut Effects) {
    const KIND: &str = "verifier_validation";
    let accident_id = v.accident_id;
    let Some(Engagement::Verifier(role)) = node.engagements.get_mut(&accident_id) else {
        return unexpected(fx, KIND, "not a verifier for this accident");
    };
    let Some(leader) = role.leader.as_mut() else {
        return unexpected(fx, KIND, "not the lead verifier");
    };
    if !role.federation.contains(v.verifier) {
        return unexpected(fx, KIND, "validation from a non-member");
    }
    if leader.done {
        return;
    }
    leader.validations.entry(v.verifier).or_insert(v);
    try_finalize(node, accident_id, now, false, fx);
}

fn on_timer(node: &mut NodeState, t: Timer, now: u64, fx: &mut Effects) {
    match t.kind {
        TimerKind::CollectionClose => close_collection(node, t.accident_id, now, fx),
        TimerKind::ValidationPoint => validate_held_events(node, t.accident_id, fx),
        TimerKind::LeaderDeadline => try_finalize(node, t.accident_id, now, true, fx),
    }
}

/// Accident vehicles with no federation file their evidence with the DMV
/// directly. The origin includes the witness records it collected.
fn close_collection(node: &mut NodeState, accident_id: AccidentId, now: u64, fx: &mut Effects) {
    let Some(Engagement::Accident(a)) = node.engagements.get(&accident_id) else {
        return unexpected(fx, "timer", "collection close without an accident role");
    };
    if a.federation.is_some() {
        return;
    }
    let mut events = vec![a.own_event.clone()];
    if a.origin == node.id {
        let registry = &node.directory.registry;
        events.extend(
            a.witness_events
                .values()
                .filter(|e| validate_event(e, registry, &a.ctx).ok)
                .cloned(),
        );
    }
    let record = UnconfirmedEventRecord {
        accident_id,
        reason: UnconfirmedReason::NoVerifier,
        submitted_by: node.id,
        recorded_at: now,
        events: candidate_events(&events),
    };
    fx.notes.push(Note::Unconfirmed {
        accident_id,
        reason: UnconfirmedReason::NoVerifier,
    });
    send(
        node,
        fx,
        Destination::Dmv,
        Channel::Cellular,
        Message::UnconfirmedRecord { record },
    );
}

fn validate_held_events(node: &mut NodeState, accident_id: AccidentId, fx: &mut Effects) {
    let Some(Engagement::Verifier(role)) = node.engagements.get_mut(&accident_id) else {
        return unexpected(fx, "timer", "validation point without a verifier role");
    };
    if role.validated {
        return;
    }
    role.validated = true;
    let registry = &node.directory.registry;
    let mut verdicts = BTreeMap::new();
    let mut approved = Vec::new();
    for (reporter, e) in &role.events {
        let verdict = validate_event(e, registry, &role.ctx);
        verdicts.insert(*reporter, verdict.ok);
        if verdict.ok {
            approved.push(e);
        }
        fx.notes.push(Note::EventVerdict {
            accident_id,
            reporter: *reporter,
            ok: verdict.ok,
            reasons: verdict.reasons,
            late: false,
        });
    }
    let fed = &role.federation;
    let endorsed = endorsement_digest(
        &accident_id,
        &candidate_events(approved),
        &fed.members,
        fed.threshold_n,
        fed.leader,
    );
    let validation = VerifierValidation {
        accident_id,
        verifier: node.id,
        verdicts,
        signature: node.keys.sign(&endorsed),
    };
    let (to, channel) = if fed.leader == node.id {
        (Destination::Vehicle(node.id), Channel::Loopback)
    } else {
        (Destination::Vehicle(fed.leader), Channel::Cellular)
    };
    send(node, fx, to, channel, Message::VerifierValidation(validation));
}

/// The leader tries to build the block once it holds `threshold_n`
/// validations, again on every later one, and a last time at its deadline.
/// Failure with all validations in, or at the deadline, is final.
fn try_finalize(node: &mut NodeState, accident_id: AccidentId, now: u64, deadline: bool, fx: &mut Effects) {
    let (prev_hash, height) = match node.headers.last() {
        Some(h) => (h.block_hash, h.height + 1),
        None => (Digest256::ZERO, 0),
    };
    let Some(Engagement::Verifier(role)) = node.engagements.get_mut(&accident_id) else {
        return unexpected(fx, "timer", "leader deadline without a verifier role");
    };
    let Some(leader) = role.leader.as_mut() else {
        return unexpected(fx, "timer", "leader deadline for a non-leader");
    };
    if leader.done {
        return;
    }
    let got = leader.validations.len();
    if !deadline && got < role.federation.threshold_n as usize {
        return;
    }
    let events: Vec<EventData> = role.events.values().cloned().collect();
    let validations: Vec<VerifierValidation> = leader.validations.values().cloned().collect();
    let result = assemble_block(
        accident_id,
        &events,
        &validations,
        &role.federation,
        prev_hash,
        height,
        now,
        &node.directory.registry,
    );
    let final_attempt = deadline || got == role.federation.size();
    let outcome = match result {
        Ok(block) => Ok(block),
        Err(ProtocolError::ThresholdNotMet { .. }) if final_attempt => Err(UnconfirmedReason::ThresholdNotMet),
        Err(ProtocolError::EmptyEventSet) if final_attempt => Err(UnconfirmedReason::EmptyEventSet),
        Err(ProtocolError::ThresholdNotMet { .. } | ProtocolError::EmptyEventSet) => return,
        Err(_) => {
            leader.done = true;
            return unexpected(fx, "verifier_validation", "block assembly failed");
        }
    };
    leader.done = true;
    let registry = &node.directory.registry;
    match outcome {
        Ok(block) => {
            fx.notes.push(Note::BlockAssembled {
                accident_id,
                events: block.events.iter().map(|e| e.reporter).collect(),
                signers: block.multisig.signatures.keys().copied().collect(),
            });
            let announce = Message::NewBlockAnnouncement { block };
            send(node, fx, Destination::Dmv, Channel::Cellular, announce.clone());
            send(
                node,
                fx,
                Destination::AccidentNetwork(accident_id),
                Channel::Cellular,
                announce,
            );
        }
        Err(reason) => {
            let kept: Vec<&EventData> = events
                .iter()
                .filter(|e| validate_event(e, registry, &role.ctx).ok)
                .collect();
            let record = UnconfirmedEventRecord {
                accident_id,
                reason,
                submitted_by: node.id,
                recorded_at: now,
                events: candidate_events(kept),
            };
            fx.notes.push(Note::Unconfirmed { accident_id, reason });
            send(
                node,
                fx,
                Destination::Dmv,
                Channel::Cellular,
                Message::UnconfirmedRecord { record },
            );
        }
    }
}
