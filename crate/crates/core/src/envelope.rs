//! Hybrid-encryption envelopes for data at rest.
//!
//! An ephemeral X25519 key agreement against the recipient's public key
//! feeds HKDF-SHA-256, and the derived key encrypts the payload with
//! ChaCha20-Poly1305. The fixed-size header is bound as associated data.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "SPDR"
//!      4     1  version 0x01
//!      5    32  SHA-256 fingerprint of the recipient public key
//!     37    32  ephemeral public key
//!     69    12  nonce
//!     81   n+16 ciphertext || tag
//! ```

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chacha20poly1305::aead::{Aead, Payload};
use chacha20poly1305::{ChaCha20Poly1305, KeyInit, Nonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

pub const MAGIC: &[u8; 4] = b"SPDR";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 81;
pub const TAG_LEN: usize = 16;
pub const MIN_LEN: usize = HEADER_LEN + TAG_LEN;
pub const FILE_EXTENSION: &str = "spdr";
const KDF_INFO: &[u8] = b"SPIDEr-v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("entropy source failed: {0}")]
    EntropyFailure(String),
    #[error("envelope too short: {0} bytes")]
    Truncated(usize),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported envelope version {0}")]
    BadVersion(u8),
    #[error("envelope is sealed to a different recipient")]
    WrongRecipient,
    #[error("authentication failed")]
    AuthenticationFailure,
    #[error("invalid key: {0}")]
    InvalidKey(String),
}

pub type Fingerprint = [u8; 32];

pub fn fingerprint(public_key: &[u8; 32]) -> Fingerprint {
    Sha256::digest(public_key).into()
}

/// X25519 key-agreement pair.
#[derive(Clone)]
pub struct KeyPair {
    secret: StaticSecret,
    public: PublicKey,
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &hex::encode(self.public.as_bytes()))
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn from_secret_bytes(secret: [u8; 32]) -> Self {
        let secret = StaticSecret::from(secret);
        let public = PublicKey::from(&secret);
        Self { secret, public }
    }

    pub fn public_key(&self) -> [u8; 32] {
        *self.public.as_bytes()
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint(self.public.as_bytes())
    }

    pub fn public_base64(&self) -> String {
        B64.encode(self.public.as_bytes())
    }

    pub fn secret_base64(&self) -> String {
        B64.encode(self.secret.to_bytes())
    }

    pub fn from_secret_base64(text: &str) -> Result<Self, EnvelopeError> {
        Ok(Self::from_secret_bytes(decode_key(text)?))
    }
}

/// Decodes a base64 32-byte key, tolerating surrounding whitespace.
pub fn decode_key(text: &str) -> Result<[u8; 32], EnvelopeError> {
    let bytes = B64
        .decode(text.trim())
        .map_err(|e| EnvelopeError::InvalidKey(e.to_string()))?;
    bytes
        .try_into()
        .map_err(|b: Vec<u8>| EnvelopeError::InvalidKey(format!("expected 32 bytes, got {}", b.len())))
}

pub fn generate_keypair<R: RngCore + CryptoRng>(rng: &mut R) -> Result<KeyPair, EnvelopeError> {
    let mut secret = [0u8; 32];
    rng.try_fill_bytes(&mut secret)
        .map_err(|e| EnvelopeError::EntropyFailure(e.to_string()))?;
    Ok(KeyPair::from_secret_bytes(secret))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub recipient_fingerprint: Fingerprint,
    pub ephemeral_public: [u8; 32],
    pub nonce: [u8; 12],
    pub ciphertext_and_tag: Vec<u8>,
}

impl Envelope {
    fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[..4].copy_from_slice(MAGIC);
        h[4] = VERSION;
        h[5..37].copy_from_slice(&self.recipient_fingerprint);
        h[37..69].copy_from_slice(&self.ephemeral_public);
        h[69..81].copy_from_slice(&self.nonce);
        h
    }

    pub fn len(&self) -> usize {
        HEADER_LEN + self.ciphertext_and_tag.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.ciphertext_and_tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err(if bytes.len() < MIN_LEN {
                EnvelopeError::Truncated(bytes.len())
            } else {
                EnvelopeError::BadMagic
            });
        }
        if bytes[4] != VERSION {
            return Err(EnvelopeError::BadVersion(bytes[4]));
        }
        if bytes.len() < MIN_LEN {
            return Err(EnvelopeError::Truncated(bytes.len()));
        }
        Ok(Self {
            recipient_fingerprint: bytes[5..37].try_into().expect("fixed slice"),
            ephemeral_public: bytes[37..69].try_into().expect("fixed slice"),
            nonce: bytes[69..81].try_into().expect("fixed slice"),
            ciphertext_and_tag: bytes[HEADER_LEN..].to_vec(),
        })
    }

    pub fn to_base64(&self) -> String {
        B64.encode(self.to_bytes())
    }

    pub fn from_base64(text: &str) -> Result<Self, EnvelopeError> {
        let bytes = B64
            .decode(text.trim())
            .map_err(|_| EnvelopeError::BadMagic)?;
        Self::from_bytes(&bytes)
    }
}

fn derive_cipher(shared: &[u8; 32]) -> ChaCha20Poly1305 {
    let hk = Hkdf::<Sha256>::new(None, shared);
    let mut key = [0u8; 32];
    hk.expand(KDF_INFO, &mut key).expect("32 bytes is a valid HKDF length");
    ChaCha20Poly1305::new(&key.into())
}

pub fn seal<R: RngCore + CryptoRng>(
    plaintext: &[u8],
    recipient_public: &[u8; 32],
    rng: &mut R,
) -> Result<Envelope, EnvelopeError> {
    let ephemeral = generate_keypair(rng)?;
    let mut nonce = [0u8; 12];
    rng.try_fill_bytes(&mut nonce)
        .map_err(|e| EnvelopeError::EntropyFailure(e.to_string()))?;
    let shared = ephemeral
        .secret
        .diffie_hellman(&PublicKey::from(*recipient_public));
    if !shared.was_contributory() {
        return Err(EnvelopeError::InvalidKey("low-order recipient key".into()));
    }
    let mut env = Envelope {
        recipient_fingerprint: fingerprint(recipient_public),
        ephemeral_public: ephemeral.public_key(),
        nonce,
        ciphertext_and_tag: Vec::new(),
    };
    let aad = env.header();
    env.ciphertext_and_tag = derive_cipher(shared.as_bytes())
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: &aad,
            },
        )
        .map_err(|_| EnvelopeError::AuthenticationFailure)?;
    Ok(env)
}

pub fn open(envelope: &Envelope, recipient: &KeyPair) -> Result<Vec<u8>, EnvelopeError> {
    if envelope.recipient_fingerprint != recipient.fingerprint() {
        return Err(EnvelopeError::WrongRecipient);
    }
    if envelope.ciphertext_and_tag.len() < TAG_LEN {
        return Err(EnvelopeError::Truncated(envelope.len()));
    }
    let shared = recipient
        .secret
        .diffie_hellman(&PublicKey::from(envelope.ephemeral_public));
    if !shared.was_contributory() {
        return Err(EnvelopeError::AuthenticationFailure);
    }
    derive_cipher(shared.as_bytes())
        .decrypt(
            Nonce::from_slice(&envelope.nonce),
            Payload {
                msg: &envelope.ciphertext_and_tag,
                aad: &envelope.header(),
            },
        )
        .map_err(|_| EnvelopeError::AuthenticationFailure)
}

/// Parses and opens serialized envelope bytes.
pub fn open_bytes(bytes: &[u8], recipient: &KeyPair) -> Result<Vec<u8>, EnvelopeError> {
    open(&Envelope::from_bytes(bytes)?, recipient)
}
