//! Content encryption shared by all clients.
//!
//! Each record is sealed independently with a hybrid envelope: a fresh
//! X25519 ephemeral key agrees a secret with the clients' shared public key,
//! HKDF-SHA256 derives a ChaCha20-Poly1305 key, and the payload is encrypted
//! under a random 96-bit nonce. The relaying server sees only ciphertext.
//!
//! Wire layout of a [`SealedRecord`] (little-endian):
//!
//! ```text
//! total_len u32 | scheme u8 | nonce material | ciphertext
//! ```
//!
//! `total_len` covers the whole frame including itself, so a concatenation of
//! records can be split without out-of-band lengths. The nonce material
//! length is fixed per scheme.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SealError {
    #[error("authentication failed")]
    Authentication,
    #[error("malformed sealed record: {0}")]
    Format(String),
    #[error("unknown scheme id {0}")]
    UnknownScheme(u8),
    #[error("plaintext must not be empty")]
    EmptyPlaintext,
    #[error("invalid key material")]
    Key,
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub scheme: u8,
    pub public_key: Vec<u8>,
    pub private_key: Vec<u8>,
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair")
            .field("scheme", &self.scheme)
            .field("public_key", &self.public_key)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedRecord {
    pub scheme: u8,
    pub nonce: Vec<u8>,
    pub ciphertext: Vec<u8>,
}

const FRAME_HEADER: usize = 5;

impl SealedRecord {
    pub fn wire_len(&self) -> usize {
        FRAME_HEADER + self.nonce.len() + self.ciphertext.len()
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.wire_len() as u32).to_le_bytes());
        out.push(self.scheme);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        self.write_to(&mut out);
        out
    }

    /// Parses one record from the front of `bytes`; returns it with the
    /// number of bytes consumed.
    pub fn read_from(bytes: &[u8]) -> Result<(Self, usize), SealError> {
        if bytes.len() < FRAME_HEADER {
            return Err(SealError::Format(format!(
                "{} bytes is shorter than a frame header",
                bytes.len()
            )));
        }
        let total = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let scheme = bytes[4];
        let nonce_len = nonce_len(scheme).ok_or(SealError::UnknownScheme(scheme))?;
        if total < FRAME_HEADER + nonce_len + TAG_LEN {
            return Err(SealError::Format(format!("frame length {total} too small")));
        }
        if bytes.len() < total {
            return Err(SealError::Format(format!(
                "truncated: need {total} bytes, have {}",
                bytes.len()
            )));
        }
        let nonce = bytes[FRAME_HEADER..FRAME_HEADER + nonce_len].to_vec();
        let ciphertext = bytes[FRAME_HEADER + nonce_len..total].to_vec();
        Ok((
            Self {
                scheme,
                nonce,
                ciphertext,
            },
            total,
        ))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SealError> {
        let (rec, used) = Self::read_from(bytes)?;
        if used != bytes.len() {
            return Err(SealError::Format("trailing bytes".into()));
        }
        Ok(rec)
    }
}

/// Splits a concatenation of sealed records.
pub fn split_stream(mut bytes: &[u8]) -> Result<Vec<SealedRecord>, SealError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (rec, used) = SealedRecord::read_from(bytes)?;
        out.push(rec);
        bytes = &bytes[used..];
    }
    Ok(out)
}

/// A public-key scheme usable as the content-encryption model.
pub trait SealingScheme: Send + Sync {
    fn scheme_id(&self) -> u8;

    /// Deterministic key pair for `seed`.
    fn keygen(&self, seed: u64) -> KeyPair;

    /// Encrypts `plaintext`; all randomness comes from `rng`.
    fn seal(&self, public_key: &[u8], plaintext: &[u8], rng: &mut ChaCha20Rng) -> Result<SealedRecord, SealError>;

    fn open(&self, private_key: &[u8], record: &SealedRecord) -> Result<Vec<u8>, SealError>;
}

/// X25519 + HKDF-SHA256 + ChaCha20-Poly1305 envelope.
#[derive(Debug, Clone, Copy, Default)]
pub struct X25519Envelope;

pub const X25519_ENVELOPE_ID: u8 = 1;
const EPHEMERAL_LEN: usize = 32;
const AEAD_NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const KDF_INFO: &[u8] = b"fednn content seal v1";

fn nonce_len(scheme: u8) -> Option<usize> {
    match scheme {
        X25519_ENVELOPE_ID => Some(EPHEMERAL_LEN + AEAD_NONCE_LEN),
        _ => None,
    }
}

fn key_array(bytes: &[u8]) -> Result<[u8; 32], SealError> {
    bytes.try_into().map_err(|_| SealError::Key)
}

fn derive_cipher(shared: &[u8; 32], ephemeral: &[u8], recipient: &[u8]) -> ChaCha20Poly1305 {
    let mut salt = Vec::with_capacity(64);
    salt.extend_from_slice(ephemeral);
    salt.extend_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; 32];
    hk.expand(KDF_INFO, &mut okm).expect("32 bytes is a valid HKDF length");
    ChaCha20Poly1305::new(Key::from_slice(&okm))
}

impl SealingScheme for X25519Envelope {
    fn scheme_id(&self) -> u8 {
        X25519_ENVELOPE_ID
    }

    fn keygen(&self, seed: u64) -> KeyPair {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut sk = [0u8; 32];
        rng.fill_bytes(&mut sk);
        let secret = StaticSecret::from(sk);
        KeyPair {
            scheme: X25519_ENVELOPE_ID,
            public_key: PublicKey::from(&secret).as_bytes().to_vec(),
            private_key: secret.to_bytes().to_vec(),
        }
    }

    fn seal(&self, public_key: &[u8], plaintext: &[u8], rng: &mut ChaCha20Rng) -> Result<SealedRecord, SealError> {
        if plaintext.is_empty() {
            return Err(SealError::EmptyPlaintext);
        }
        let recipient = PublicKey::from(key_array(public_key)?);
        let mut eph = [0u8; 32];
        rng.fill_bytes(&mut eph);
        let eph = StaticSecret::from(eph);
        let eph_pub = PublicKey::from(&eph);
        let shared = eph.diffie_hellman(&recipient);
        let cipher = derive_cipher(shared.as_bytes(), eph_pub.as_bytes(), recipient.as_bytes());
        let mut nonce = [0u8; AEAD_NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let ciphertext = cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: plaintext,
                    aad: &[X25519_ENVELOPE_ID],
                },
            )
            .map_err(|_| SealError::Authentication)?;
        let mut material = eph_pub.as_bytes().to_vec();
        material.extend_from_slice(&nonce);
        Ok(SealedRecord {
            scheme: X25519_ENVELOPE_ID,
            nonce: material,
            ciphertext,
        })
    }

    fn open(&self, private_key: &[u8], record: &SealedRecord) -> Result<Vec<u8>, SealError> {
        if record.scheme != X25519_ENVELOPE_ID {
            return Err(SealError::UnknownScheme(record.scheme));
        }
        if record.nonce.len() != EPHEMERAL_LEN + AEAD_NONCE_LEN || record.ciphertext.len() < TAG_LEN {
            return Err(SealError::Format("bad nonce or ciphertext length".into()));
        }
        let secret = StaticSecret::from(key_array(private_key)?);
        let own_pub = PublicKey::from(&secret);
        let eph_pub = PublicKey::from(key_array(&record.nonce[..EPHEMERAL_LEN])?);
        let shared = secret.diffie_hellman(&eph_pub);
        let cipher = derive_cipher(shared.as_bytes(), eph_pub.as_bytes(), own_pub.as_bytes());
        cipher
            .decrypt(
                Nonce::from_slice(&record.nonce[EPHEMERAL_LEN..]),
                Payload {
                    msg: &record.ciphertext,
                    aad: &[record.scheme],
                },
            )
            .map_err(|_| SealError::Authentication)
    }
}

/// Deterministic keygen with the default envelope.
pub fn keygen(seed: u64) -> KeyPair {
    X25519Envelope.keygen(seed)
}

pub fn seal_record(public_key: &[u8], plaintext: &[u8], rng: &mut ChaCha20Rng) -> Result<SealedRecord, SealError> {
    X25519Envelope.seal(public_key, plaintext, rng)
}

pub fn open_record(private_key: &[u8], record: &SealedRecord) -> Result<Vec<u8>, SealError> {
    X25519Envelope.open(private_key, record)
}

/// Per-record randomness derived from a stream seed and a record index, so
/// records can be sealed in parallel without sharing one generator.
pub fn record_rng(seed: u64, stream: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 8);
    rng
}
