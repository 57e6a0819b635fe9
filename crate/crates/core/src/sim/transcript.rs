//! Ordered record of everything that happened during a run.

use std::sync::Arc;

use serde::Serialize;

use crate::crypto::Digest256;
use crate::event::AccidentId;
use crate::ledger::UnconfirmedReason;
use crate::protocol::{Address, Channel, Note, SignedMessage};
use crate::registry::VehicleId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    OutOfRange,
    Lost,
    UnknownRecipient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Delivered,
    Dropped(DropReason),
}

/// One transmission to one receiver.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Delivery {
    pub seq: u64,
    pub send_time: u64,
    pub deliver_time: u64,
    /// The vehicle that physically transmitted.
    pub from: VehicleId,
    /// The sender named in the envelope.
    pub sender: VehicleId,
    pub to: Address,
    pub channel: Channel,
    pub kind: &'static str,
    pub accident_id: AccidentId,
    /// Index into [`Transcript::messages`].
    pub message: usize,
    pub message_digest: Digest256,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "note", rename_all = "snake_case")]
pub enum DmvNote {
    BlockAccepted {
        accident_id: AccidentId,
        height: u64,
        block_hash: Digest256,
    },
    BlockRejected {
        accident_id: AccidentId,
        error: String,
    },
    UnconfirmedStored {
        accident_id: AccidentId,
        submitted_by: VehicleId,
        reason: UnconfirmedReason,
    },
    InvalidEnvelope {
        claimed_sender: VehicleId,
        kind: &'static str,
    },
    Ignored {
        kind: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum LogNote {
    Vehicle(Note),
    Dmv(DmvNote),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoteEntry {
    pub time: u64,
    pub actor: Address,
    pub note: LogNote,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Entry {
    Send(Delivery),
    Note(NoteEntry),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub entries: Vec<Entry>,
    /// Message bodies, shared by every delivery of the same transmission.
    pub messages: Vec<Arc<SignedMessage>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogLevel {
    Off,
    #[default]
    Summary,
    Full,
}

impl LogLevel {
    /// Reads `POE_LOG`; unset or unrecognised values mean `summary`.
    pub fn from_env() -> Self {
        match std::env::var("POE_LOG").ok().as_deref().map(str::trim) {
            Some("off") => LogLevel::Off,
            Some("full") => LogLevel::Full,
            _ => LogLevel::Summary,
        }
    }
}

impl Transcript {
    pub fn deliveries(&self) -> impl Iterator<Item = &Delivery> {
        self.entries.iter().filter_map(|e| match e {
            Entry::Send(d) => Some(d),
            Entry::Note(_) => None,
        })
    }

    pub fn notes(&self) -> impl Iterator<Item = &NoteEntry> {
        self.entries.iter().filter_map(|e| match e {
            Entry::Note(n) => Some(n),
            Entry::Send(_) => None,
        })
    }

    pub fn vehicle_notes(&self, who: VehicleId) -> impl Iterator<Item = &Note> {
        self.notes().filter_map(move |n| match (&n.actor, &n.note) {
            (Address::Vehicle(v), LogNote::Vehicle(note)) if *v == who => Some(note),
            _ => None,
        })
    }

    pub fn message(&self, d: &Delivery) -> &SignedMessage {
        &self.messages[d.message]
    }

    /// Line-delimited JSON, one entry per line, in occurrence order.
    pub fn to_jsonl(&self, level: LogLevel) -> String {
        let mut out = String::new();
        if level == LogLevel::Off {
            return out;
        }
        for e in &self.entries {
            let mut line = serde_json::to_value(e).expect("transcript entry serializes");
            if let (Entry::Send(d), LogLevel::Full) = (e, level) {
                line["body"] = serde_json::to_value(&*self.messages[d.message]).expect("message serializes");
            }
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}
