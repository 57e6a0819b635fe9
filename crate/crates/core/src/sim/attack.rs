//! Adversarial behaviour, layered around honest nodes.
//!
//! Every attack is a wrapper that rewrites what an honest [`NodeState`]
//! sends or receives, so defenses are exercised at the same
//! [`protocol_step`] boundary as honest traffic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::sign;
use crate::event::{AccidentId, EventData};
use crate::ledger::endorsement_digest;
use crate::protocol::{
    candidate_events, protocol_step, Channel, Destination, Effects, Input, Message, NodeState, Outbound, SignedMessage,
};
use crate::registry::VehicleId;

use super::config::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperField {
    Speed,
    LocationX,
    LocationY,
    Timestamp,
    Heading,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollusionBehavior {
    /// Endorse every event received, tampered or not.
    #[default]
    ApproveTampered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    /// The attacker alters its own event record after signing it.
    TamperEvent {
        attacker: VehicleId,
        field: TamperField,
        delta: f64,
    },
    /// The attacker sends everything under someone else's id.
    Impersonate { attacker: VehicleId, claimed_id: VehicleId },
    /// A genuine witness forwards the event-generation request over
    /// cellular to vehicles outside DSRC range, which answer it.
    FakeWitnessRelay {
        relayer: VehicleId,
        fake_witnesses: Vec<VehicleId>,
        relay_delay_ms: u64,
    },
    /// Federation members that endorse everything they receive.
    ColludingVerifiers {
        members: Vec<VehicleId>,
        #[serde(default)]
        behavior: CollusionBehavior,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InvalidAttack {
    #[error("{role} {id} is not in the scenario")]
    UnknownVehicle { role: &'static str, id: VehicleId },
    #[error("attacker {0} cannot impersonate itself")]
    SelfImpersonation(VehicleId),
    #[error("{0} lists no vehicles")]
    Empty(&'static str),
    #[error("vehicle {0} listed twice")]
    Duplicate(VehicleId),
    #[error("fake witness {0} is an accident vehicle or the relayer")]
    BadFakeWitness(VehicleId),
    #[error("delta must be finite and non-zero")]
    BadDelta,
    #[error("{0}")]
    Config(String),
}

impl AttackSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            AttackSpec::TamperEvent { .. } => "tamper_event",
            AttackSpec::Impersonate { .. } => "impersonate",
            AttackSpec::FakeWitnessRelay { .. } => "fake_witness_relay",
            AttackSpec::ColludingVerifiers { .. } => "colluding_verifiers",
        }
    }

    /// Vehicles whose behaviour the attack alters.
    pub fn actors(&self) -> Vec<VehicleId> {
        match self {
            AttackSpec::TamperEvent { attacker, .. } | AttackSpec::Impersonate { attacker, .. } => vec![*attacker],
            AttackSpec::FakeWitnessRelay {
                relayer,
                fake_witnesses,
                ..
            } => std::iter::once(*relayer)
                .chain(fake_witnesses.iter().copied())
                .collect(),
            AttackSpec::ColludingVerifiers { members, .. } => members.clone(),
        }
    }

    pub(crate) fn check(&self, known: &BTreeSet<VehicleId>, colliding: &[VehicleId]) -> Result<(), InvalidAttack> {
        let exists = |role, id: &VehicleId| {
            if known.contains(id) {
                Ok(())
            } else {
                Err(InvalidAttack::UnknownVehicle { role, id: *id })
            }
        };
        let unique = |ids: &[VehicleId]| {
            let mut seen = BTreeSet::new();
            ids.iter().try_for_each(|id| {
                if seen.insert(*id) {
                    Ok(())
                } else {
                    Err(InvalidAttack::Duplicate(*id))
                }
            })
        };
        match self {
            AttackSpec::TamperEvent { attacker, delta, .. } => {
                exists("attacker", attacker)?;
                if !delta.is_finite() || *delta == 0.0 {
                    return Err(InvalidAttack::BadDelta);
                }
            }
            AttackSpec::Impersonate { attacker, claimed_id } => {
                exists("attacker", attacker)?;
                if attacker == claimed_id {
                    return Err(InvalidAttack::SelfImpersonation(*attacker));
                }
            }
            AttackSpec::FakeWitnessRelay {
                relayer,
                fake_witnesses,
                ..
            } => {
                exists("relayer", relayer)?;
                if fake_witnesses.is_empty() {
                    return Err(InvalidAttack::Empty("fake_witnesses"));
                }
                unique(fake_witnesses)?;
                for f in fake_witnesses {
                    exists("fake witness", f)?;
                    if f == relayer || colliding.contains(f) {
                        return Err(InvalidAttack::BadFakeWitness(*f));
                    }
                }
            }
            AttackSpec::ColludingVerifiers { members, .. } => {
                if members.is_empty() {
                    return Err(InvalidAttack::Empty("members"));
                }
                unique(members)?;
                for m in members {
                    exists("colluder", m)?;
                }
            }
        }
        Ok(())
    }
}

/// Returns `cfg` with `spec` attached. Nothing else about the scenario
/// changes.
pub fn inject_attack(cfg: &ScenarioConfig, spec: AttackSpec) -> Result<ScenarioConfig, InvalidAttack> {
    let known: BTreeSet<VehicleId> = cfg.all_vehicles().iter().map(|v| v.id).collect();
    spec.check(&known, &cfg.accident.colliding)?;
    let mut out = cfg.clone();
    out.attacks.push(spec);
    out.validate().map_err(|e| InvalidAttack::Config(e.to_string()))?;
    Ok(out)
}

/// The union of attack behaviours assigned to one vehicle.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Behaviour {
    tamper: Vec<(TamperField, f64)>,
    impersonate: Option<VehicleId>,
    relay_to: Vec<(VehicleId, u64)>,
    answers_late: bool,
    collude: bool,
}

pub(crate) fn behaviours(attacks: &[AttackSpec]) -> BTreeMap<VehicleId, Behaviour> {
    let mut out: BTreeMap<VehicleId, Behaviour> = BTreeMap::new();
    for a in attacks {
        match a {
            AttackSpec::TamperEvent { attacker, field, delta } => {
                out.entry(*attacker).or_default().tamper.push((*field, *delta));
            }
            AttackSpec::Impersonate { attacker, claimed_id } => {
                out.entry(*attacker).or_default().impersonate = Some(*claimed_id);
            }
            AttackSpec::FakeWitnessRelay {
                relayer,
                fake_witnesses,
                relay_delay_ms,
            } => {
                let r = out.entry(*relayer).or_default();
                r.relay_to.extend(fake_witnesses.iter().map(|f| (*f, *relay_delay_ms)));
                for f in fake_witnesses {
                    out.entry(*f).or_default().answers_late = true;
                }
            }
            AttackSpec::ColludingVerifiers { members, .. } => {
                for m in members {
                    out.entry(*m).or_default().collude = true;
                }
            }
        }
    }
    out
}

pub(crate) fn tamper(event: &mut EventData, field: TamperField, delta: f64) {
    match field {
        TamperField::Speed => {
            for s in &mut event.edr_window {
                s.speed = (s.speed + delta).max(0.0);
            }
        }
        TamperField::Heading => {
            for s in &mut event.edr_window {
                s.heading = (s.heading + delta).rem_euclid(360.0);
            }
        }
        TamperField::LocationX => event.location.x += delta,
        TamperField::LocationY => event.location.y += delta,
        TamperField::Timestamp => event.timestamp = (event.timestamp as f64 + delta).max(0.0) as u64,
    }
}

/// A vehicle in the simulation: an honest state machine plus whatever
/// attack behaviour the scenario assigns it.
#[derive(Debug, Clone)]
pub(crate) struct Actor {
    node: Option<NodeState>,
    behaviour: Behaviour,
    /// Event data seen by a colluder, per accident.
    seen: BTreeMap<AccidentId, BTreeMap<VehicleId, EventData>>,
}

impl Actor {
    pub(crate) fn new(mut node: NodeState, behaviour: Behaviour) -> Self {
        if behaviour.answers_late {
            node.enforce_reply_window = false;
        }
        Self {
            node: Some(node),
            behaviour,
            seen: BTreeMap::new(),
        }
    }

    pub(crate) fn node(&self) -> &NodeState {
        self.node.as_ref().expect("node present between steps")
    }

    pub(crate) fn step(&mut self, input: Input, now: u64) -> Effects {
        let relay = self.relay_for(&input);
        if self.behaviour.collude {
            self.observe(&input);
        }
        let node = self.node.take().expect("node present between steps");
        let (node, mut fx) = protocol_step(node, input, now);
        self.node = Some(node);
        fx.outbound = fx.outbound.into_iter().map(|o| self.rewrite(o)).chain(relay).collect();
        fx
    }

    fn relay_for(&self, input: &Input) -> Vec<Outbound> {
        let Input::Deliver { envelope, .. } = input else {
            return Vec::new();
        };
        if !matches!(envelope.message, Message::EventGenerationRequest { .. })
            || !envelope.verify(&self.node().directory.registry)
        {
            return Vec::new();
        }
        self.behaviour
            .relay_to
            .iter()
            .map(|(to, delay)| Outbound {
                to: Destination::Vehicle(*to),
                channel: Channel::Cellular,
                envelope: envelope.clone(),
                extra_delay: *delay,
            })
            .collect()
    }

    fn observe(&mut self, input: &Input) {
        if let Input::Deliver { envelope, .. } = input {
            if let Message::EventDataBroadcast { event } = &envelope.message {
                if envelope.sender == event.reporter && envelope.verify(&self.node().directory.registry) {
                    self.seen
                        .entry(event.accident_id)
                        .or_default()
                        .entry(event.reporter)
                        .or_insert_with(|| event.clone());
                }
            }
        }
    }

    fn rewrite(&self, mut o: Outbound) -> Outbound {
        let node = self.node();
        let me = node.id;
        if o.envelope.sender != me {
            // Forwarded traffic keeps its original envelope.
            return o;
        }
        let mut msg = o.envelope.message.clone();
        let mut changed = false;
        if let Message::EventDataBroadcast { event } = &mut msg {
            for (field, delta) in &self.behaviour.tamper {
                tamper(event, *field, *delta);
                changed = true;
            }
        }
        if self.behaviour.collude {
            if let Message::VerifierValidation(v) = &mut msg {
                if let Some(fed) = node.federation(&v.accident_id) {
                    let seen = self.seen.get(&v.accident_id);
                    let events: Vec<&EventData> = seen.map(|m| m.values().collect()).unwrap_or_default();
                    for e in &events {
                        v.verdicts.insert(e.reporter, true);
                    }
                    let d = endorsement_digest(
                        &v.accident_id,
                        &candidate_events(events),
                        &fed.members,
                        fed.threshold_n,
                        fed.leader,
                    );
                    v.signature = sign(node.keys(), &d);
                    changed = true;
                }
            }
        }
        let mut sender = me;
        if let Some(claimed) = self.behaviour.impersonate {
            sender = claimed;
            changed = true;
            match &mut msg {
                Message::EventDataBroadcast { event } => {
                    event.reporter = claimed;
                    event.digest = event.recompute_digest();
                    event.signature = sign(node.keys(), &event.digest);
                }
                Message::WitnessConfirm { witness, .. } => *witness = claimed,
                Message::VerifierValidation(v) => v.verifier = claimed,
                Message::EventGenerationRequest { origin, .. } => *origin = claimed,
                _ => {}
            }
        }
        if changed {
            o.envelope = SignedMessage::seal(sender, msg, node.keys());
        }
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Digest256, Signature};
    use crate::event::{EdrSample, EventRole};
    use crate::net::Position;

    fn event() -> EventData {
        let mut e = EventData {
            accident_id: AccidentId([1; 16]),
            reporter: VehicleId(3),
            role: EventRole::Witness,
            location: Position::new(10.0, 0.0),
            timestamp: 60_010,
            edr_window: vec![EdrSample {
                t: 60_000,
                position: Position::new(10.0, 0.0),
                speed: 12.0,
                heading: 350.0,
                observations: vec![],
            }],
            digest: Digest256::ZERO,
            signature: Signature([0; 64]),
        };
        e.digest = e.recompute_digest();
        e
    }

    #[test]
    fn every_tamper_field_breaks_the_digest() {
        for field in [
            TamperField::Speed,
            TamperField::LocationX,
            TamperField::LocationY,
            TamperField::Timestamp,
            TamperField::Heading,
        ] {
            let mut e = event();
            tamper(&mut e, field, 15.0);
            assert!(!e.digest_matches(), "{field:?}");
        }
        let mut e = event();
        tamper(&mut e, TamperField::Heading, 15.0);
        assert_eq!(e.edr_window[0].heading, 5.0);
    }

    #[test]
    fn attack_specs_parse_from_json() {
        let a: AttackSpec = serde_json::from_str(
            r#"{"kind": "fake_witness_relay", "relayer": 3, "fake_witnesses": [20, 21], "relay_delay_ms": 800}"#,
        )
        .unwrap();
        assert_eq!(a.actors(), vec![VehicleId(3), VehicleId(20), VehicleId(21)]);
        let c: AttackSpec = serde_json::from_str(r#"{"kind": "colluding_verifiers", "members": [1]}"#).unwrap();
        assert_eq!(
            c,
            AttackSpec::ColludingVerifiers {
                members: vec![VehicleId(1)],
                behavior: CollusionBehavior::ApproveTampered
            }
        );
        assert!(serde_json::from_str::<AttackSpec>(r#"{"kind": "ddos", "attacker": 1}"#).is_err());
    }

    #[test]
    fn specs_checked_against_the_world() {
        let known: BTreeSet<VehicleId> = (1..=5).map(VehicleId).collect();
        let colliding = [VehicleId(1), VehicleId(2)];
        let check = |a: AttackSpec| a.check(&known, &colliding);
        assert!(check(AttackSpec::Impersonate {
            attacker: VehicleId(3),
            claimed_id: VehicleId(99)
        })
        .is_ok());
        assert_eq!(
            check(AttackSpec::Impersonate {
                attacker: VehicleId(3),
                claimed_id: VehicleId(3)
            }),
            Err(InvalidAttack::SelfImpersonation(VehicleId(3)))
        );
        assert_eq!(
            check(AttackSpec::TamperEvent {
                attacker: VehicleId(9),
                field: TamperField::Speed,
                delta: 1.0
            }),
            Err(InvalidAttack::UnknownVehicle {
                role: "attacker",
                id: VehicleId(9)
            })
        );
        assert_eq!(
            check(AttackSpec::FakeWitnessRelay {
                relayer: VehicleId(3),
                fake_witnesses: vec![VehicleId(1)],
                relay_delay_ms: 10
            }),
            Err(InvalidAttack::BadFakeWitness(VehicleId(1)))
        );
        assert_eq!(
            check(AttackSpec::ColludingVerifiers {
                members: vec![VehicleId(4), VehicleId(4)],
                behavior: CollusionBehavior::ApproveTampered
            }),
            Err(InvalidAttack::Duplicate(VehicleId(4)))
        );
    }
}
