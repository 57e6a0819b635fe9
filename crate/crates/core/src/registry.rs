//! DMV registration: vehicle identities, public keys and reputation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::PublicKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Canonical for VehicleId {
    fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.0);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self(dec.u32()?))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("unknown vehicle {0}")]
    UnknownVehicle(VehicleId),
    #[error("vehicle {0} is already registered")]
    Duplicate(VehicleId),
    #[error("reputation {0} outside [0, 100]")]
    ReputationOutOfRange(f64),
}

/// Reputation in `[0, 100]`, held as exact thousandths of a point so that
/// ordering, weighting and clamping are platform independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ReputationScore(u32);

impl ReputationScore {
    pub const SCALE: u32 = 1000;
    pub const MAX: ReputationScore = ReputationScore(100 * Self::SCALE);
    pub const ZERO: ReputationScore = ReputationScore(0);

    pub fn from_points(points: f64) -> Result<Self, RegistryError> {
        if !(0.0..=100.0).contains(&points) {
            return Err(RegistryError::ReputationOutOfRange(points));
        }
        Ok(Self((points * Self::SCALE as f64).round() as u32))
    }

    pub fn from_milli(milli: u32) -> Self {
        Self(milli.min(Self::MAX.0))
    }

    pub fn milli(self) -> u32 {
        self.0
    }

    pub fn points(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }

    /// Adds `delta` points and clamps to `[0, 100]`.
    pub fn adjusted(self, delta: f64) -> Self {
        let milli = self.0 as i64 + (delta * Self::SCALE as f64).round() as i64;
        Self(milli.clamp(0, Self::MAX.0 as i64) as u32)
    }
}

impl fmt::Display for ReputationScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.points())
    }
}

impl Serialize for ReputationScore {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.points())
    }
}

impl<'de> Deserialize<'de> for ReputationScore {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Self::from_points(f64::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub plate: String,
    pub vin: String,
    pub public_key: PublicKey,
    pub reputation: ReputationScore,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmvRegistry {
    entries: BTreeMap<VehicleId, RegistryEntry>,
}

impl DmvRegistry {
    pub fn register(&mut self, id: VehicleId, entry: RegistryEntry) -> Result<(), RegistryError> {
        if self.entries.contains_key(&id) {
            return Err(RegistryError::Duplicate(id));
        }
        self.entries.insert(id, entry);
        Ok(())
    }

    pub fn get(&self, id: VehicleId) -> Result<&RegistryEntry, RegistryError> {
        self.entries.get(&id).ok_or(RegistryError::UnknownVehicle(id))
    }

    pub fn contains(&self, id: VehicleId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn public_key(&self, id: VehicleId) -> Result<PublicKey, RegistryError> {
        self.get(id).map(|e| e.public_key)
    }

    pub fn reputation(&self, id: VehicleId) -> Result<ReputationScore, RegistryError> {
        self.get(id).map(|e| e.reputation)
    }

    pub fn set_reputation(&mut self, id: VehicleId, score: ReputationScore) -> Result<(), RegistryError> {
        let entry = self.entries.get_mut(&id).ok_or(RegistryError::UnknownVehicle(id))?;
        entry.reputation = score;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = VehicleId> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (VehicleId, &RegistryEntry)> {
        self.entries.iter().map(|(id, e)| (*id, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
