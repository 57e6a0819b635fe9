//! Digests, Ed25519 keys and n-of-m multi-signature checks.
//!
//! SHA-256 is the project-wide digest. Signatures are always taken over a
//! [`Digest256`], never over raw payloads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ed25519_dalek::Signer;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::registry::{DmvRegistry, RegistryError, VehicleId};

macro_rules! hex_bytes_newtype {
    ($name:ident, $len:expr) => {
        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
                let mut out = [0u8; $len];
                hex::decode_to_slice(s, &mut out)?;
                Ok(Self(out))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }

        impl Canonical for $name {
            fn encode(&self, enc: &mut Encoder) {
                enc.raw(&self.0);
            }

            fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
                Ok(Self(dec.array()?))
            }
        }
    };
}

/// 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest256(pub [u8; 32]);
hex_bytes_newtype!(Digest256, 32);

impl Digest256 {
    pub const ZERO: Digest256 = Digest256([0u8; 32]);
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; 32]);
hex_bytes_newtype!(PublicKey, 32);

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Signature(pub [u8; 64]);
hex_bytes_newtype!(Signature, 64);

/// SHA-256 of a canonical byte sequence.
pub fn digest(payload: &[u8]) -> Digest256 {
    Digest256(Sha256::digest(payload).into())
}

/// Digest of a value's canonical encoding.
pub fn digest_of<T: Canonical>(value: &T) -> Digest256 {
    digest(&value.to_canonical_bytes())
}

#[derive(Clone)]
pub struct KeyPair {
    signing: ed25519_dalek::SigningKey,
    public: PublicKey,
}

impl KeyPair {
    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn sign(&self, message: &Digest256) -> Signature {
        sign(self, message)
    }
}

impl PartialEq for KeyPair {
    fn eq(&self, other: &Self) -> bool {
        self.signing.to_bytes() == other.signing.to_bytes()
    }
}

impl Eq for KeyPair {}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

/// Deterministic key derivation: the seed is the Ed25519 secret scalar seed.
pub fn keygen(seed: &[u8; 32]) -> KeyPair {
    let signing = ed25519_dalek::SigningKey::from_bytes(seed);
    let public = PublicKey(signing.verifying_key().to_bytes());
    KeyPair { signing, public }
}

pub fn sign(keys: &KeyPair, message: &Digest256) -> Signature {
    Signature(keys.signing.sign(&message.0).to_bytes())
}

/// Returns `false` for malformed keys as well as bad signatures.
pub fn verify(public: &PublicKey, message: &Digest256, sig: &Signature) -> bool {
    let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    key.verify_strict(&message.0, &sig).is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MultiSigError {
    #[error("threshold {threshold} outside 1..={members}")]
    BadThreshold { threshold: u32, members: usize },
    #[error("federation lists vehicle {0} more than once")]
    DuplicateMember(VehicleId),
    #[error("vehicle {0} is not a federation member")]
    NotAMember(VehicleId),
}

/// Federation membership, threshold and the collected signatures.
///
/// Fields are public so that malformed sets (e.g. decoded from a corrupt
/// ledger) remain representable; [`check_multisig`] treats those as failing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiSigSet {
    pub federation: Vec<VehicleId>,
    pub threshold_n: u32,
    pub signatures: BTreeMap<VehicleId, Signature>,
}

impl MultiSigSet {
    pub fn new(federation: Vec<VehicleId>, threshold_n: u32) -> Result<Self, MultiSigError> {
        let mut seen = BTreeSet::new();
        for id in &federation {
            if !seen.insert(*id) {
                return Err(MultiSigError::DuplicateMember(*id));
            }
        }
        if threshold_n == 0 || threshold_n as usize > federation.len() {
            return Err(MultiSigError::BadThreshold {
                threshold: threshold_n,
                members: federation.len(),
            });
        }
        Ok(Self {
            federation,
            threshold_n,
            signatures: BTreeMap::new(),
        })
    }

    pub fn add_signature(&mut self, signer: VehicleId, sig: Signature) -> Result<(), MultiSigError> {
        if !self.federation.contains(&signer) {
            return Err(MultiSigError::NotAMember(signer));
        }
        self.signatures.insert(signer, sig);
        Ok(())
    }

    pub fn is_well_formed(&self) -> bool {
        let unique: BTreeSet<_> = self.federation.iter().collect();
        unique.len() == self.federation.len()
            && self.threshold_n >= 1
            && self.threshold_n as usize <= self.federation.len()
    }

    pub fn is_member(&self, id: VehicleId) -> bool {
        self.federation.contains(&id)
    }
}

impl Canonical for MultiSigSet {
    fn encode(&self, enc: &mut Encoder) {
        enc.list(&self.federation).u32(self.threshold_n);
        enc.u32(self.signatures.len() as u32);
        for (id, sig) in &self.signatures {
            enc.value(id).value(sig);
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let federation = dec.list()?;
        let threshold_n = dec.u32()?;
        let count = dec.u32()? as usize;
        let mut signatures = BTreeMap::new();
        let mut last: Option<VehicleId> = None;
        for _ in 0..count {
            let id: VehicleId = dec.value()?;
            // Map entries are written in ascending key order; anything else
            // would not re-encode to the same bytes.
            if last.is_some_and(|prev| prev >= id) {
                return Err(DecodeError::Invalid("signature entries out of order"));
            }
            last = Some(id);
            signatures.insert(id, dec.value()?);
        }
        Ok(Self {
            federation,
            threshold_n,
            signatures,
        })
    }
}

/// True iff at least `threshold_n` federation members hold a signature that
/// verifies over `block_digest`. Signatures from non-members are ignored.
pub fn check_multisig(
    block_digest: &Digest256,
    ms: &MultiSigSet,
    registry: &DmvRegistry,
) -> Result<bool, RegistryError> {
    let mut keys = BTreeMap::new();
    for id in &ms.federation {
        keys.insert(*id, registry.public_key(*id)?);
    }
    if !ms.is_well_formed() {
        return Ok(false);
    }
    let valid = ms
        .signatures
        .iter()
        .filter(|(id, sig)| keys.get(id).is_some_and(|pk| verify(pk, block_digest, sig)))
        .count();
    Ok(valid >= ms.threshold_n as usize)
}
