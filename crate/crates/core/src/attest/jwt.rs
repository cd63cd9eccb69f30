//! Compact JWS tokens (`header.payload.signature`) signed with Ed25519.

use base64::engine::general_purpose::URL_SAFE_NO_PAD as B64URL;
use base64::Engine;
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("malformed token: {0}")]
    Malformed(String),
    #[error("unsupported token algorithm `{0}`")]
    UnsupportedAlgorithm(String),
    #[error("token signature does not verify")]
    BadSignature,
}

#[derive(Serialize, Deserialize)]
struct Header {
    alg: String,
    typ: String,
}

pub fn sign<T: Serialize>(claims: &T, key: &SigningKey) -> String {
    let header = Header {
        alg: "EdDSA".into(),
        typ: "JWT".into(),
    };
    let head = B64URL.encode(serde_json::to_vec(&header).expect("header serializes"));
    let body = B64URL.encode(serde_json::to_vec(claims).expect("claims serialize"));
    let signing_input = format!("{head}.{body}");
    let sig = key.sign(signing_input.as_bytes());
    format!("{signing_input}.{}", B64URL.encode(sig.to_bytes()))
}

/// Checks the signature before decoding claims.
pub fn verify<T: DeserializeOwned>(token: &str, key: &VerifyingKey) -> Result<T, TokenError> {
    let mut parts = token.split('.');
    let (Some(head), Some(body), Some(sig), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(TokenError::Malformed("expected three segments".into()));
    };
    let header: Header = decode_json(head)?;
    if header.alg != "EdDSA" {
        return Err(TokenError::UnsupportedAlgorithm(header.alg));
    }
    let sig_bytes: [u8; 64] = B64URL
        .decode(sig)
        .map_err(|e| TokenError::Malformed(e.to_string()))?
        .try_into()
        .map_err(|_| TokenError::Malformed("signature length".into()))?;
    let signing_input = &token[..head.len() + 1 + body.len()];
    key.verify_strict(signing_input.as_bytes(), &Signature::from_bytes(&sig_bytes))
        .map_err(|_| TokenError::BadSignature)?;
    decode_json(body)
}

/// Decodes the claims without checking the signature. For diagnostics and
/// tamper simulation only.
pub fn decode_unverified<T: DeserializeOwned>(token: &str) -> Result<T, TokenError> {
    let body = token
        .split('.')
        .nth(1)
        .ok_or_else(|| TokenError::Malformed("missing payload".into()))?;
    decode_json(body)
}

fn decode_json<T: DeserializeOwned>(segment: &str) -> Result<T, TokenError> {
    let bytes = B64URL
        .decode(segment)
        .map_err(|e| TokenError::Malformed(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| TokenError::Malformed(e.to_string()))
}
