//! Classification, metrics and attack assessment of a finished run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::event::{AccidentId, EventData};
use crate::ledger::{Block, Ledger};
use crate::protocol::{validate_event, AccidentContext, Address, Federation, Note, Participation, RejectReason, Role};
use crate::registry::{DmvRegistry, ReputationScore, VehicleId};

use super::attack::AttackSpec;
use super::config::ScenarioConfig;
use super::transcript::{DmvNote, LogNote, Status, Transcript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Classification {
    Normal,
    NoWitness,
    NoVerifier,
    NoWitnessNoVerifier,
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classification::Normal => "Normal",
            Classification::NoWitness => "NoWitness",
            Classification::NoVerifier => "NoVerifier",
            Classification::NoWitnessNoVerifier => "NoWitnessNoVerifier",
        })
    }
}

/// Accident origin: the smallest colliding id.
pub fn origin_of(cfg: &ScenarioConfig) -> VehicleId {
    *cfg.accident
        .colliding
        .iter()
        .min()
        .expect("validated: colliding is non-empty")
}

/// Vehicles whose confirmation reached the origin under their own name.
pub fn witnesses(transcript: &Transcript, origin: VehicleId) -> BTreeSet<VehicleId> {
    transcript
        .deliveries()
        .filter(|d| {
            d.kind == "witness_confirm"
                && d.status == Status::Delivered
                && d.to == Address::Vehicle(origin)
                && d.from == d.sender
        })
        .map(|d| d.sender)
        .collect()
}

/// The federation as the origin derived it; `None` if it found none.
pub fn federation(transcript: &Transcript, origin: VehicleId) -> Option<Federation> {
    transcript.vehicle_notes(origin).find_map(|n| match n {
        Note::FederationFormed { federation, .. } => Some(federation.clone()),
        _ => None,
    })
}

pub fn classify_outcome(transcript: &Transcript, cfg: &ScenarioConfig) -> Classification {
    let origin = origin_of(cfg);
    let has_witness = !witnesses(transcript, origin).is_empty();
    let has_federation = federation(transcript, origin).is_some();
    match (has_witness, has_federation) {
        (true, true) => Classification::Normal,
        (false, true) => Classification::NoWitness,
        (true, false) => Classification::NoVerifier,
        (false, false) => Classification::NoWitnessNoVerifier,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub reporter: VehicleId,
    pub reasons: Vec<RejectReason>,
    /// Arrived after the verifier had already judged.
    pub late: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReputationChange {
    pub vehicle: VehicleId,
    pub before: ReputationScore,
    pub after: ReputationScore,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackOutcome {
    pub kind: &'static str,
    pub actors: Vec<VehicleId>,
    pub succeeded: bool,
    /// The defense that stopped it, when it was stopped.
    pub mitigation: Option<String>,
}

impl fmt::Display for AttackOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.mitigation, self.succeeded) {
            (_, true) => write!(f, "{}: succeeded", self.kind),
            (Some(m), false) => write!(f, "{}: mitigated: {m}", self.kind),
            (None, false) => write!(f, "{}: mitigated", self.kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub blocks: usize,
    pub unconfirmed_records: usize,
    pub federation: Option<Federation>,
    pub witnesses: Vec<VehicleId>,
    pub events_accepted: Vec<VehicleId>,
    /// Per the lead verifier's verdicts.
    pub events_rejected: Vec<Rejection>,
    pub messages_sent: usize,
    pub messages_delivered: usize,
    pub messages_dropped: usize,
    pub invalid_envelopes: usize,
    /// DMV acceptance time relative to the accident.
    pub block_latency_ms: Option<u64>,
    pub reputation_changes: Vec<ReputationChange>,
    pub attacks: Vec<AttackOutcome>,
}

/// Blocks of the ledger that record `accident_id`.
pub(crate) fn blocks_for<'a>(ledger: &'a Ledger, accident_id: &'a AccidentId) -> impl Iterator<Item = &'a Block> {
    ledger.blocks().iter().filter(move |b| b.accident_id == *accident_id)
}

/// Verdicts the lead verifier noted, by reporter (the first one wins).
fn leader_verdicts(transcript: &Transcript, fed: Option<&Federation>) -> BTreeMap<VehicleId, Rejection> {
    let mut out = BTreeMap::new();
    let Some(fed) = fed else {
        return out;
    };
    for n in transcript.vehicle_notes(fed.leader) {
        if let Note::EventVerdict {
            reporter,
            ok: false,
            reasons,
            late,
            ..
        } = n
        {
            out.entry(*reporter).or_insert_with(|| Rejection {
                reporter: *reporter,
                reasons: reasons.clone(),
                late: *late,
            });
        }
    }
    out
}

pub(crate) struct Inputs<'a> {
    pub cfg: &'a ScenarioConfig,
    pub ctx: &'a AccidentContext,
    pub transcript: &'a Transcript,
    pub ledger: &'a Ledger,
    pub registry: &'a DmvRegistry,
    pub accepted_at: Option<u64>,
}

/// Who earns or loses reputation for this accident.
pub(crate) fn participations(inp: &Inputs<'_>) -> Vec<Participation> {
    let origin = origin_of(inp.cfg);
    let fed = federation(inp.transcript, origin);
    let rejected = leader_verdicts(inp.transcript, fed.as_ref());
    let in_block: BTreeSet<VehicleId> = blocks_for(inp.ledger, &inp.ctx.accident_id)
        .flat_map(|b| b.events.iter().map(|e| e.reporter))
        .collect();
    let integrity_failed = |v: &VehicleId| {
        rejected
            .get(v)
            .is_some_and(|r| r.reasons.iter().any(RejectReason::is_integrity_failure))
    };

    let mut out = Vec::new();
    for v in &inp.ctx.accident_vehicles {
        if integrity_failed(v) {
            out.push(Participation {
                vehicle: *v,
                role: Role::Accident,
                honest: false,
            });
        }
    }
    for w in witnesses(inp.transcript, origin) {
        if integrity_failed(&w) {
            out.push(Participation {
                vehicle: w,
                role: Role::Witness,
                honest: false,
            });
        } else if in_block.contains(&w) {
            out.push(Participation {
                vehicle: w,
                role: Role::Witness,
                honest: true,
            });
        }
    }
    let mut signers = BTreeSet::new();
    for b in blocks_for(inp.ledger, &inp.ctx.accident_id) {
        signers.extend(b.multisig.signatures.keys().copied());
    }
    for s in signers {
        let role = match &fed {
            Some(f) if f.leader == s => Role::LeadVerifier,
            _ => Role::Verifier,
        };
        out.push(Participation {
            vehicle: s,
            role,
            honest: true,
        });
    }
    out
}

fn assess(spec: &AttackSpec, inp: &Inputs<'_>, rejected: &BTreeMap<VehicleId, Rejection>) -> AttackOutcome {
    let blocks: Vec<&Block> = blocks_for(inp.ledger, &inp.ctx.accident_id).collect();
    let block_events = || blocks.iter().flat_map(|b| b.events.iter());
    let verdict_label = |who: &[VehicleId]| -> String {
        let reasons: Vec<RejectReason> = who
            .iter()
            .filter_map(|v| rejected.get(v))
            .flat_map(|r| r.reasons.iter().copied())
            .collect();
        reasons
            .iter()
            .min()
            .map(|r| r.label().to_string())
            .unwrap_or_else(|| "not delivered".to_string())
    };
    let (succeeded, mitigation) = match spec {
        AttackSpec::TamperEvent { attacker, .. } => {
            let hit = block_events().any(|e| e.reporter == *attacker && !e.digest_matches());
            (hit, verdict_label(&[*attacker]))
        }
        AttackSpec::Impersonate { attacker, claimed_id } => {
            let attacker_key = inp.registry.public_key(*attacker).ok();
            let hit = block_events().any(|e: &EventData| {
                e.reporter == *claimed_id
                    && attacker_key.is_some_and(|pk| crate::crypto::verify(&pk, &e.digest, &e.signature))
            });
            let dropped = inp.transcript.notes().any(|n| match &n.note {
                LogNote::Vehicle(Note::InvalidEnvelope { claimed_sender, .. })
                | LogNote::Dmv(DmvNote::InvalidEnvelope { claimed_sender, .. }) => claimed_sender == claimed_id,
                _ => false,
            });
            (hit, if dropped { "signature check" } else { "no traffic" }.to_string())
        }
        AttackSpec::FakeWitnessRelay { fake_witnesses, .. } => {
            let hit = block_events().any(|e| fake_witnesses.contains(&e.reporter));
            (hit, verdict_label(fake_witnesses))
        }
        AttackSpec::ColludingVerifiers { .. } => {
            let hit = block_events().any(|e| !validate_event(e, inp.registry, inp.ctx).ok);
            let why = if blocks.is_empty() {
                "threshold not met"
            } else {
                "majority verdict"
            };
            (hit, why.to_string())
        }
    };
    AttackOutcome {
        kind: spec.kind(),
        actors: spec.actors(),
        succeeded,
        mitigation: (!succeeded).then_some(mitigation),
    }
}

pub(crate) fn metrics(inp: &Inputs<'_>, registry_after: &DmvRegistry) -> Metrics {
    let origin = origin_of(inp.cfg);
    let fed = federation(inp.transcript, origin);
    let rejected = leader_verdicts(inp.transcript, fed.as_ref());
    let blocks: Vec<&Block> = blocks_for(inp.ledger, &inp.ctx.accident_id).collect();
    let sends: Vec<_> = inp.transcript.deliveries().collect();
    let delivered = sends.iter().filter(|d| d.status == Status::Delivered).count();
    let invalid_envelopes = inp
        .transcript
        .notes()
        .filter(|n| {
            matches!(
                n.note,
                LogNote::Vehicle(Note::InvalidEnvelope { .. }) | LogNote::Dmv(DmvNote::InvalidEnvelope { .. })
            )
        })
        .count();
    let reputation_changes = inp
        .registry
        .iter()
        .filter_map(|(id, before)| {
            let after = registry_after.reputation(id).ok()?;
            (after != before.reputation).then_some(ReputationChange {
                vehicle: id,
                before: before.reputation,
                after,
            })
        })
        .collect();
    Metrics {
        blocks: blocks.len(),
        unconfirmed_records: inp
            .ledger
            .unconfirmed
            .iter()
            .filter(|r| r.accident_id == inp.ctx.accident_id)
            .count(),
        witnesses: witnesses(inp.transcript, origin).into_iter().collect(),
        events_accepted: blocks
            .iter()
            .flat_map(|b| b.events.iter().map(|e| e.reporter))
            .collect(),
        events_rejected: rejected.values().cloned().collect(),
        messages_sent: sends.len(),
        messages_delivered: delivered,
        messages_dropped: sends.len() - delivered,
        invalid_envelopes,
        block_latency_ms: inp.accepted_at.map(|t| t - inp.ctx.accident_time),
        reputation_changes,
        attacks: inp.cfg.attacks.iter().map(|a| assess(a, inp, &rejected)).collect(),
        federation: fed,
    }
}
