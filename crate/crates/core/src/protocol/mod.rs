//! Proof-of-Event consensus: federation formation, event validation, block
//! assembly, incentives, and the per-vehicle state machine in [`node`].

pub mod message;
pub mod node;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Encoder;
use crate::crypto::{check_multisig, digest, verify, Digest256, MultiSigSet};
use crate::event::{AccidentId, EventData, EventRole};
use crate::ledger::{endorsement_digest, Block};
use crate::net::{NetError, Position, DEFAULT_DSRC_RANGE_M};
use crate::registry::{DmvRegistry, RegistryError, ReputationScore, VehicleId};

pub use message::{Message, SignedMessage, VerifierValidation};
pub use node::{
    detect_accident, protocol_step, AccidentDetection, Address, Channel, Destination, Directory, Effects, Input,
    NodeState, Note, Outbound, Timer, TimerKind,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("unknown vehicle {0}")]
    UnknownVehicle(VehicleId),
    #[error("no eligible verifier vehicles")]
    EmptyFederation,
    #[error("only {got} of the required {need} federation signatures")]
    ThresholdNotMet { got: usize, need: u32 },
    #[error("no event data survived validation")]
    EmptyEventSet,
    #[error("no colliding vehicles given")]
    NoCollision,
    #[error(transparent)]
    Net(#[from] NetError),
}

impl From<RegistryError> for ProtocolError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::UnknownVehicle(id) => ProtocolError::UnknownVehicle(id),
            // Registration errors cannot arise from read-only lookups.
            other => unreachable!("registry lookup returned {other}"),
        }
    }
}

/// Roles a vehicle can hold with respect to one accident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Accident,
    Witness,
    Community,
    Verifier,
    LeadVerifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `floor(2m/3) + 1`
    #[default]
    Supermajority,
    /// A fixed `n`, capped at the federation size.
    Fixed(u32),
}

impl ThresholdRule {
    pub fn threshold_for(&self, members: usize) -> u32 {
        let m = members as u32;
        match *self {
            ThresholdRule::Supermajority => 2 * m / 3 + 1,
            ThresholdRule::Fixed(n) => n.clamp(1, m.max(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncentiveParams {
    pub reward_witness: f64,
    pub reward_verifier: f64,
    pub penalty: f64,
}

impl Default for IncentiveParams {
    fn default() -> Self {
        Self {
            reward_witness: 1.0,
            reward_verifier: 1.0,
            penalty: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolParams {
    pub dsrc_range: f64,
    /// Federation size.
    pub m: usize,
    pub threshold: ThresholdRule,
    pub min_reputation: ReputationScore,
    pub reply_window_ms: u64,
    pub validation_deadline_ms: u64,
    pub edr_capacity: usize,
    pub edr_period_ms: u64,
    pub edr_half_width_ms: u64,
    pub incentives: IncentiveParams,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            dsrc_range: DEFAULT_DSRC_RANGE_M,
            m: 5,
            threshold: ThresholdRule::Supermajority,
            min_reputation: ReputationScore::from_milli(30_000),
            reply_window_ms: 500,
            validation_deadline_ms: 2000,
            edr_capacity: crate::event::DEFAULT_EDR_CAPACITY,
            edr_period_ms: crate::event::DEFAULT_EDR_PERIOD_MS,
            edr_half_width_ms: crate::event::DEFAULT_WINDOW_HALF_WIDTH_MS,
            incentives: IncentiveParams::default(),
        }
    }
}

/// Per-hop latencies in simulated milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModel {
    pub dsrc_ms: u64,
    pub cellular_ms: u64,
    /// Independent per-delivery loss probability.
    pub loss_rate: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            dsrc_ms: 10,
            cellular_ms: 50,
            loss_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Federation {
    pub accident_id: AccidentId,
    /// Ascending by id.
    pub members: Vec<VehicleId>,
    pub leader: VehicleId,
    pub threshold_n: u32,
}

impl Federation {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, id: VehicleId) -> bool {
        self.members.binary_search(&id).is_ok()
    }

    pub fn role_of(&self, id: VehicleId) -> Option<Role> {
        if id == self.leader {
            Some(Role::LeadVerifier)
        } else if self.contains(id) {
            Some(Role::Verifier)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub m: usize,
    pub min_reputation: ReputationScore,
    pub threshold: ThresholdRule,
}

impl From<&ProtocolParams> for FederationConfig {
    fn from(p: &ProtocolParams) -> Self {
        Self {
            m: p.m,
            min_reputation: p.min_reputation,
            threshold: p.threshold,
        }
    }
}

/// Seed for one accident's federation draw, derived from the scenario seed.
pub fn selection_seed(scenario_seed: u64, accident_id: &AccidentId) -> [u8; 32] {
    let mut enc = Encoder::new();
    enc.raw(b"POE/federation/v1").u64(scenario_seed).value(accident_id);
    digest(&enc.finish()).0
}

/// Successive weighted sampling without replacement: each draw picks among
/// the remaining items with probability proportional to weight. If every
/// remaining weight is zero the draw is uniform.
pub fn sample_weighted<R: Rng + ?Sized>(rng: &mut R, items: &[(VehicleId, u64)], k: usize) -> Vec<VehicleId> {
    let mut pool: Vec<(VehicleId, u64)> = items.to_vec();
    let mut out = Vec::with_capacity(k.min(pool.len()));
    while out.len() < k && !pool.is_empty() {
        let total: u64 = pool.iter().map(|(_, w)| *w).sum();
        let idx = if total == 0 {
            rng.gen_range(0..pool.len())
        } else {
            let mut ticket = rng.gen_range(0..total);
            pool.iter()
                .position(|(_, w)| {
                    if ticket < *w {
                        true
                    } else {
                        ticket -= *w;
                        false
                    }
                })
                .expect("ticket below total weight")
        };
        out.push(pool.remove(idx).0);
    }
    out
}

/// Reputation-weighted random federation drawn from `community`.
pub fn select_verifiers(
    community: &BTreeSet<VehicleId>,
    registry: &DmvRegistry,
    cfg: &FederationConfig,
    rng_seed: [u8; 32],
    accident_id: AccidentId,
) -> Result<Federation, ProtocolError> {
    let mut eligible = Vec::new();
    for id in community {
        let rep = registry.reputation(*id)?;
        if rep >= cfg.min_reputation {
            eligible.push((*id, rep.milli() as u64));
        }
    }
    if eligible.is_empty() || cfg.m == 0 {
        return Err(ProtocolError::EmptyFederation);
    }
    let mut rng = ChaCha8Rng::from_seed(rng_seed);
    let mut members = sample_weighted(&mut rng, &eligible, cfg.m);
    members.sort();
    let leader = elect_leader(&members, registry)?;
    Ok(Federation {
        accident_id,
        threshold_n: cfg.threshold.threshold_for(members.len()),
        members,
        leader,
    })
}

/// Highest reputation wins; ties go to the smallest id.
pub fn elect_leader(members: &[VehicleId], registry: &DmvRegistry) -> Result<VehicleId, ProtocolError> {
    let mut best: Option<(ReputationScore, VehicleId)> = None;
    for id in members {
        let rep = registry.reputation(*id)?;
        best = match best {
            Some((r, b)) if r > rep || (r == rep && b < *id) => Some((r, b)),
            _ => Some((rep, *id)),
        };
    }
    best.map(|(_, id)| id).ok_or(ProtocolError::EmptyFederation)
}

/// What a validator knows about the accident an event claims to describe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccidentContext {
    pub accident_id: AccidentId,
    pub accident_vehicles: BTreeSet<VehicleId>,
    pub scene: Position,
    pub accident_time: u64,
    pub dsrc_range: f64,
    pub reply_window: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    DigestMismatch,
    BadSignature,
    UnregisteredReporter,
    OutsideReplyWindow,
    OutOfDsrcRange,
    WrongAccident,
    NotAnAccidentVehicle,
}

impl RejectReason {
    pub fn label(&self) -> &'static str {
        match self {
            RejectReason::DigestMismatch => "digest mismatch",
            RejectReason::BadSignature => "signature check",
            RejectReason::UnregisteredReporter => "unregistered reporter",
            RejectReason::OutsideReplyWindow => "reply window",
            RejectReason::OutOfDsrcRange => "dsrc range",
            RejectReason::WrongAccident => "wrong accident",
            RejectReason::NotAnAccidentVehicle => "not an accident vehicle",
        }
    }

    /// Failures that indicate the reporter's data was altered or forged.
    pub fn is_integrity_failure(&self) -> bool {
        matches!(self, RejectReason::DigestMismatch | RejectReason::BadSignature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub ok: bool,
    pub reasons: Vec<RejectReason>,
}

/// Runs every check and reports all failures, not just the first.
pub fn validate_event(e: &EventData, registry: &DmvRegistry, ctx: &AccidentContext) -> Verdict {
    let mut reasons = Vec::new();
    if e.accident_id != ctx.accident_id {
        reasons.push(RejectReason::WrongAccident);
    }
    if !e.digest_matches() {
        reasons.push(RejectReason::DigestMismatch);
    }
    match registry.public_key(e.reporter) {
        Ok(pk) => {
            if !verify(&pk, &e.digest, &e.signature) {
                reasons.push(RejectReason::BadSignature);
            }
        }
        Err(_) => reasons.push(RejectReason::UnregisteredReporter),
    }
    let window_end = ctx.accident_time.saturating_add(ctx.reply_window);
    if e.timestamp < ctx.accident_time || e.timestamp > window_end {
        reasons.push(RejectReason::OutsideReplyWindow);
    }
    match e.role {
        EventRole::Witness => {
            if e.location.distance(&ctx.scene) > ctx.dsrc_range {
                reasons.push(RejectReason::OutOfDsrcRange);
            }
        }
        EventRole::Accident => {
            if !ctx.accident_vehicles.contains(&e.reporter) {
                reasons.push(RejectReason::NotAnAccidentVehicle);
            }
        }
    }
    Verdict {
        ok: reasons.is_empty(),
        reasons,
    }
}

/// Events a verifier endorses, in block order (ascending reporter).
pub fn candidate_events<'a>(events: impl IntoIterator<Item = &'a EventData>) -> Vec<EventData> {
    let mut out: Vec<EventData> = events.into_iter().cloned().collect();
    out.sort_by_key(|e| e.reporter);
    out
}

/// Builds the block from the leader's copy of the event data and the
/// federation's validations.
///
/// An event is included iff more than half the federation marked it ok.
/// Only member signatures that verify over the resulting endorsement digest
/// are kept; at least `threshold_n` of them are required.
#[allow(clippy::too_many_arguments)]
pub fn assemble_block(
    accident_id: AccidentId,
    events: &[EventData],
    validations: &[VerifierValidation],
    federation: &Federation,
    prev_hash: Digest256,
    height: u64,
    now: u64,
    registry: &DmvRegistry,
) -> Result<Block, ProtocolError> {
    let m = federation.size();
    let mut approvals: BTreeMap<VehicleId, usize> = BTreeMap::new();
    let mut counted = BTreeSet::new();
    for v in validations {
        if v.accident_id != accident_id || !federation.contains(v.verifier) || !counted.insert(v.verifier) {
            continue;
        }
        for (reporter, ok) in &v.verdicts {
            if *ok {
                *approvals.entry(*reporter).or_default() += 1;
            }
        }
    }
    let accepted = candidate_events(
        events
            .iter()
            .filter(|e| approvals.get(&e.reporter).is_some_and(|n| 2 * n > m)),
    );
    if accepted.is_empty() {
        return Err(ProtocolError::EmptyEventSet);
    }

    let endorsement = endorsement_digest(
        &accident_id,
        &accepted,
        &federation.members,
        federation.threshold_n,
        federation.leader,
    );
    let mut multisig = MultiSigSet::new(federation.members.clone(), federation.threshold_n)
        .map_err(|_| ProtocolError::EmptyFederation)?;
    for v in validations {
        if !federation.contains(v.verifier) {
            continue;
        }
        let pk = registry.public_key(v.verifier)?;
        if verify(&pk, &endorsement, &v.signature) {
            multisig.signatures.insert(v.verifier, v.signature);
        }
    }
    if !check_multisig(&endorsement, &multisig, registry)? {
        return Err(ProtocolError::ThresholdNotMet {
            got: multisig.signatures.len(),
            need: federation.threshold_n,
        });
    }
    let mut block = Block {
        height,
        prev_hash,
        accident_id,
        events: accepted,
        multisig,
        leader: federation.leader,
        created_at: now,
        block_hash: Digest256::ZERO,
    };
    block.seal();
    Ok(block)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participation {
    pub vehicle: VehicleId,
    pub role: Role,
    pub honest: bool,
}

/// Reputation update after an accident is settled.
///
/// Honest witnesses and signing verifiers are rewarded; any participant whose
/// event data failed integrity checks is penalised. Accident vehicles that
/// behaved are left unchanged. Scores clamp to `[0, 100]`.
pub fn apply_incentives(
    registry: &DmvRegistry,
    participants: &[Participation],
    params: &IncentiveParams,
) -> Result<DmvRegistry, ProtocolError> {
    let mut out = registry.clone();
    for p in participants {
        let current = out.reputation(p.vehicle)?;
        let delta = match (p.role, p.honest) {
            (_, false) => -params.penalty,
            (Role::Witness, true) => params.reward_witness,
            (Role::Verifier | Role::LeadVerifier, true) => params.reward_verifier,
            (Role::Accident | Role::Community, true) => 0.0,
        };
        out.set_reputation(p.vehicle, current.adjusted(delta))?;
    }
    Ok(out)
}
