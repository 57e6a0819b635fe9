//! Protocol messages and their signed envelope.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{digest, sign, verify, Digest256, KeyPair, Signature};
use crate::event::{AccidentId, EventData};
use crate::ledger::{Block, UnconfirmedEventRecord};
use crate::net::Position;
use crate::registry::{DmvRegistry, VehicleId};

/// A verifier's per-event verdicts plus its signature over the endorsement
/// digest of the events it approved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierValidation {
    pub accident_id: AccidentId,
    pub verifier: VehicleId,
    pub verdicts: BTreeMap<VehicleId, bool>,
    pub signature: Signature,
}

impl Canonical for VerifierValidation {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.accident_id).value(&self.verifier);
        enc.u32(self.verdicts.len() as u32);
        for (reporter, ok) in &self.verdicts {
            enc.value(reporter).bool(*ok);
        }
        enc.value(&self.signature);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let accident_id = dec.value()?;
        let verifier = dec.value()?;
        let count = dec.u32()? as usize;
        let mut verdicts = BTreeMap::new();
        let mut last: Option<VehicleId> = None;
        for _ in 0..count {
            let reporter: VehicleId = dec.value()?;
            if last.is_some_and(|prev| prev >= reporter) {
                return Err(DecodeError::Invalid("verdict entries out of order"));
            }
            last = Some(reporter);
            verdicts.insert(reporter, dec.bool()?);
        }
        Ok(Self {
            accident_id,
            verifier,
            verdicts,
            signature: dec.value()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    EventGenerationRequest {
        accident_id: AccidentId,
        origin: VehicleId,
        sent_at: u64,
    },
    WitnessConfirm {
        accident_id: AccidentId,
        witness: VehicleId,
    },
    EventDataBroadcast {
        event: EventData,
    },
    /// Carries what every community vehicle needs to derive the same
    /// federation and validate against the same accident context.
    FederationFormationRequest {
        accident_id: AccidentId,
        accident_vehicles: Vec<VehicleId>,
        scene: Position,
        accident_time: u64,
    },
    VerifierValidation(VerifierValidation),
    NewBlockAnnouncement {
        block: Block,
    },
    /// Evidence submitted to the DMV when no block could be built.
    UnconfirmedRecord {
        record: UnconfirmedEventRecord,
    },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::EventGenerationRequest { .. } => 1,
            Message::WitnessConfirm { .. } => 2,
            Message::EventDataBroadcast { .. } => 3,
            Message::FederationFormationRequest { .. } => 4,
            Message::VerifierValidation(_) => 5,
            Message::NewBlockAnnouncement { .. } => 6,
            Message::UnconfirmedRecord { .. } => 7,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::EventGenerationRequest { .. } => "event_generation_request",
            Message::WitnessConfirm { .. } => "witness_confirm",
            Message::EventDataBroadcast { .. } => "event_data_broadcast",
            Message::FederationFormationRequest { .. } => "federation_formation_request",
            Message::VerifierValidation(_) => "verifier_validation",
            Message::NewBlockAnnouncement { .. } => "new_block_announcement",
            Message::UnconfirmedRecord { .. } => "unconfirmed_record",
        }
    }

    pub fn accident_id(&self) -> AccidentId {
        match self {
            Message::EventGenerationRequest { accident_id, .. }
            | Message::WitnessConfirm { accident_id, .. }
            | Message::FederationFormationRequest { accident_id, .. } => *accident_id,
            Message::EventDataBroadcast { event } => event.accident_id,
            Message::VerifierValidation(v) => v.accident_id,
            Message::NewBlockAnnouncement { block } => block.accident_id,
            Message::UnconfirmedRecord { record } => record.accident_id,
        }
    }
}

impl Canonical for Message {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.tag());
        match self {
            Message::EventGenerationRequest {
                accident_id,
                origin,
                sent_at,
            } => {
                enc.value(accident_id).value(origin).u64(*sent_at);
            }
            Message::WitnessConfirm { accident_id, witness } => {
                enc.value(accident_id).value(witness);
            }
            Message::EventDataBroadcast { event } => {
                enc.value(event);
            }
            Message::FederationFormationRequest {
                accident_id,
                accident_vehicles,
                scene,
                accident_time,
            } => {
                enc.value(accident_id)
                    .list(accident_vehicles)
                    .value(scene)
                    .u64(*accident_time);
            }
            Message::VerifierValidation(v) => {
                enc.value(v);
            }
            Message::NewBlockAnnouncement { block } => {
                enc.value(block);
            }
            Message::UnconfirmedRecord { record } => {
                enc.value(record);
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let offset = dec.position();
        Ok(match dec.u8()? {
            1 => Message::EventGenerationRequest {
                accident_id: dec.value()?,
                origin: dec.value()?,
                sent_at: dec.u64()?,
            },
            2 => Message::WitnessConfirm {
                accident_id: dec.value()?,
                witness: dec.value()?,
            },
            3 => Message::EventDataBroadcast { event: dec.value()? },
            4 => Message::FederationFormationRequest {
                accident_id: dec.value()?,
                accident_vehicles: dec.list()?,
                scene: dec.value()?,
                accident_time: dec.u64()?,
            },
            5 => Message::VerifierValidation(dec.value()?),
            6 => Message::NewBlockAnnouncement { block: dec.value()? },
            7 => Message::UnconfirmedRecord { record: dec.value()? },
            tag => {
                return Err(DecodeError::BadTag {
                    what: "message",
                    tag,
                    offset,
                })
            }
        })
    }
}

const ENVELOPE_DOMAIN: &[u8] = b"POE/message/v1";

/// A message plus the sender's signature over `(sender, message)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedMessage {
    pub sender: VehicleId,
    pub message: Message,
    pub signature: Signature,
}

impl SignedMessage {
    pub fn signing_digest(sender: VehicleId, message: &Message) -> Digest256 {
        let mut enc = Encoder::new();
        enc.raw(ENVELOPE_DOMAIN).value(&sender).value(message);
        digest(&enc.finish())
    }

    pub fn seal(sender: VehicleId, message: Message, keys: &KeyPair) -> Self {
        let signature = sign(keys, &Self::signing_digest(sender, &message));
        Self {
            sender,
            message,
            signature,
        }
    }

    /// True iff the sender is registered and the signature is theirs.
    pub fn verify(&self, registry: &DmvRegistry) -> bool {
        registry
            .public_key(self.sender)
            .is_ok_and(|pk| verify(&pk, &Self::signing_digest(self.sender, &self.message), &self.signature))
    }

    /// Digest of the whole envelope, used to identify it in transcripts.
    pub fn id(&self) -> Digest256 {
        crate::crypto::digest_of(self)
    }
}

impl Canonical for SignedMessage {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.sender).value(&self.message).value(&self.signature);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            sender: dec.value()?,
            message: dec.value()?,
            signature: dec.value()?,
        })
    }
}
