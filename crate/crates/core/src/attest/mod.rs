//! Simulated confidential-computing attestation and data-access flow.
//!
//! A simulated platform key signs hardware reports, a simulated attestation
//! service (MAA) turns verified reports into signed JWTs, the access policy
//! domain (APD) checks them against an allowlist, and the auth server (AS)
//! issues resource access tokens (RATs) that the resource server honours.
//! All signatures are real Ed25519; only the hardware and cloud services are
//! simulated. [`session::run_session`] drives the full eleven-step flow.

pub mod jwt;
pub mod session;
pub mod transport;

use std::collections::HashMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha384};
use thiserror::Error;

use crate::envelope::{Envelope, KeyPair};

pub use session::{run_session, SessionConfig, SessionOutcome, Tamper};
pub use transport::{InProcessBus, LoopbackTransport, Transport, WireMessage};

pub const TOKEN_LIFETIME_SECS: u64 = 300;
pub const MAA_ISSUER: &str = "maa-sim";
pub const AS_ISSUER: &str = "as-sim";
pub const APD_ISSUER: &str = "apd-sim";

/// Error codes for every rejection the flow can produce.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttestError {
    #[error("platform signature on the hardware report does not verify")]
    BadPlatformSignature,
    #[error("report nonce does not match the session challenge")]
    NonceMismatch,
    #[error("token signature does not verify under the expected issuer key")]
    BadSignature,
    #[error("token expired or not yet valid")]
    Expired,
    #[error("measurement is not in the allowlist")]
    MeasurementNotAllowed,
    #[error("PCR values differ from the expected configuration")]
    PcrMismatch,
    #[error("approval is missing, forged or stale")]
    InvalidApproval,
    #[error("token scope does not cover the requested resource")]
    ScopeMismatch,
    #[error("unknown resource")]
    UnknownResource,
    #[error("enclave could not decrypt the input")]
    AuthenticationFailure,
    #[error("workload failed inside the enclave")]
    WorkloadFailed,
    #[error("malformed protocol message")]
    Malformed,
    #[error("transport failure")]
    Transport,
}

mod hex_array {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(b: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom(format!("expected {N} hex bytes")))
    }
}

pub type Measurement = [u8; 48];

/// Launch digest of an application bundle.
pub fn measure(bundle: &[u8]) -> Measurement {
    Sha384::digest(bundle).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pcr(#[serde(with = "hex_array")] pub [u8; 32]);

/// Booted enclave: its launch measurement, PCR bank and key-agreement pair.
#[derive(Debug, Clone)]
pub struct EnclaveState {
    pub measurement: Measurement,
    pub pcrs: Vec<Pcr>,
    pub keypair: KeyPair,
}

impl EnclaveState {
    /// Boots from bundle bytes. PCR i holds SHA-256 of `"pcr" || i || bundle`.
    pub fn boot(bundle: &[u8], pcr_count: usize, keypair: KeyPair) -> Self {
        let pcrs = (0..pcr_count)
            .map(|i| {
                let mut h = Sha256::new();
                h.update(b"pcr");
                h.update((i as u32).to_be_bytes());
                h.update(bundle);
                Pcr(h.finalize().into())
            })
            .collect();
        Self {
            measurement: measure(bundle),
            pcrs,
            keypair,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareReport {
    #[serde(with = "hex_array")]
    pub measurement: Measurement,
    pub pcr_values: Vec<Pcr>,
    #[serde(with = "hex_array")]
    pub vm_public_key_fingerprint: [u8; 32],
    #[serde(with = "hex_array")]
    pub nonce: [u8; 16],
    #[serde(with = "hex_array")]
    pub platform_signature: [u8; 64],
}

impl HardwareReport {
    fn signed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128 + 32 * self.pcr_values.len());
        out.extend_from_slice(b"hw-report-v1");
        out.extend_from_slice(&self.measurement);
        out.extend_from_slice(&(self.pcr_values.len() as u32).to_be_bytes());
        for p in &self.pcr_values {
            out.extend_from_slice(&p.0);
        }
        out.extend_from_slice(&self.vm_public_key_fingerprint);
        out.extend_from_slice(&self.nonce);
        out
    }

    pub fn verify(&self, platform_root: &VerifyingKey) -> bool {
        platform_root
            .verify(
                &self.signed_bytes(),
                &Signature::from_bytes(&self.platform_signature),
            )
            .is_ok()
    }
}

pub fn generate_hardware_report(
    enclave: &EnclaveState,
    nonce: [u8; 16],
    platform_key: &SigningKey,
) -> HardwareReport {
    let mut report = HardwareReport {
        measurement: enclave.measurement,
        pcr_values: enclave.pcrs.clone(),
        vm_public_key_fingerprint: enclave.keypair.fingerprint(),
        nonce,
        platform_signature: [0; 64],
    };
    report.platform_signature = platform_key.sign(&report.signed_bytes()).to_bytes();
    report
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationClaims {
    pub iss: String,
    pub iat: u64,
    pub exp: u64,
    pub nonce: String,
    pub pcrs: Vec<String>,
    pub measurement: String,
    pub vm_pubkey_fpr: String,
}

/// Signed JWT issued by the attestation service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttestationToken(pub String);

pub fn maa_verify_and_issue(
    report: &HardwareReport,
    expected_nonce: &[u8; 16],
    platform_root: &VerifyingKey,
    maa_key: &SigningKey,
    now: u64,
) -> Result<AttestationToken, AttestError> {
    if !report.verify(platform_root) {
        return Err(AttestError::BadPlatformSignature);
    }
    if &report.nonce != expected_nonce {
        return Err(AttestError::NonceMismatch);
    }
    let claims = AttestationClaims {
        iss: MAA_ISSUER.into(),
        iat: now,
        exp: now + TOKEN_LIFETIME_SECS,
        nonce: hex::encode(report.nonce),
        pcrs: report.pcr_values.iter().map(|p| hex::encode(p.0)).collect(),
        measurement: hex::encode(report.measurement),
        vm_pubkey_fpr: hex::encode(report.vm_public_key_fingerprint),
    };
    Ok(AttestationToken(jwt::sign(&claims, maa_key)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyAllowlist {
    allowed_measurements: Vec<Measurement>,
    pub allowed_pcrs: Vec<Pcr>,
    pub max_token_age: u64,
}

impl PolicyAllowlist {
    pub fn new(
        allowed_measurements: Vec<Measurement>,
        allowed_pcrs: Vec<Pcr>,
        max_token_age: u64,
    ) -> Result<Self, &'static str> {
        if allowed_measurements.is_empty() {
            return Err("allowlist needs at least one measurement");
        }
        Ok(Self {
            allowed_measurements,
            allowed_pcrs,
            max_token_age,
        })
    }

    pub fn allowed_measurements(&self) -> &[Measurement] {
        &self.allowed_measurements
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalClaims {
    pub iss: String,
    pub sub: String,
    pub jwt_sha256: String,
    pub vm_pubkey_fpr: String,
    pub iat: u64,
    pub exp: u64,
}

/// APD-signed approval of one session's attestation token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Approval(pub String);

pub fn apd_validate(
    token: &AttestationToken,
    allowlist: &PolicyAllowlist,
    maa_public: &VerifyingKey,
    apd_key: &SigningKey,
    session_id: &str,
    now: u64,
) -> Result<Approval, AttestError> {
    let claims: AttestationClaims =
        jwt::verify(&token.0, maa_public).map_err(|_| AttestError::BadSignature)?;
    if claims.iss != MAA_ISSUER {
        return Err(AttestError::BadSignature);
    }
    if claims.exp <= claims.iat
        || now >= claims.exp
        || now < claims.iat
        || now - claims.iat > allowlist.max_token_age
    {
        return Err(AttestError::Expired);
    }
    let measurement: Measurement = hex::decode(&claims.measurement)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or(AttestError::Malformed)?;
    if !allowlist.allowed_measurements.contains(&measurement) {
        return Err(AttestError::MeasurementNotAllowed);
    }
    let expected: Vec<String> = allowlist.allowed_pcrs.iter().map(|p| hex::encode(p.0)).collect();
    if claims.pcrs != expected {
        return Err(AttestError::PcrMismatch);
    }
    let approval = ApprovalClaims {
        iss: APD_ISSUER.into(),
        sub: session_id.into(),
        jwt_sha256: hex::encode(Sha256::digest(token.0.as_bytes())),
        vm_pubkey_fpr: claims.vm_pubkey_fpr,
        iat: now,
        exp: now + TOKEN_LIFETIME_SECS,
    };
    Ok(Approval(jwt::sign(&approval, apd_key)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatClaims {
    pub iss: String,
    pub sub: String,
    pub scope: String,
    pub iat: u64,
    pub exp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResourceAccessToken(pub String);

pub fn issue_rat(
    approval: &Approval,
    resource_id: &str,
    apd_public: &VerifyingKey,
    as_key: &SigningKey,
    now: u64,
) -> Result<ResourceAccessToken, AttestError> {
    let claims: ApprovalClaims =
        jwt::verify(&approval.0, apd_public).map_err(|_| AttestError::InvalidApproval)?;
    if claims.iss != APD_ISSUER || now >= claims.exp || now < claims.iat {
        return Err(AttestError::InvalidApproval);
    }
    if resource_id.is_empty() {
        return Err(AttestError::UnknownResource);
    }
    let rat = RatClaims {
        iss: AS_ISSUER.into(),
        sub: claims.sub,
        scope: resource_id.into(),
        iat: now,
        exp: now + TOKEN_LIFETIME_SECS,
    };
    Ok(ResourceAccessToken(jwt::sign(&rat, as_key)))
}

/// Encrypted inputs held by the resource server, keyed by resource id.
#[derive(Debug, Clone, Default)]
pub struct ResourceStore {
    entries: HashMap<String, Envelope>,
}

impl ResourceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, envelope: Envelope) {
        self.entries.insert(id.into(), envelope);
    }

    pub fn get(&self, id: &str) -> Option<&Envelope> {
        self.entries.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

pub fn resource_fetch<'a>(
    rat: &ResourceAccessToken,
    resource_id: &str,
    store: &'a ResourceStore,
    as_public: &VerifyingKey,
    now: u64,
) -> Result<&'a Envelope, AttestError> {
    let claims: RatClaims =
        jwt::verify(&rat.0, as_public).map_err(|_| AttestError::BadSignature)?;
    if claims.iss != AS_ISSUER {
        return Err(AttestError::BadSignature);
    }
    if claims.exp <= claims.iat || now >= claims.exp || now < claims.iat {
        return Err(AttestError::Expired);
    }
    if claims.scope != resource_id {
        return Err(AttestError::ScopeMismatch);
    }
    store.get(resource_id).ok_or(AttestError::UnknownResource)
}

/// Public keys every party uses to check the others.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustStore {
    pub platform: VerifyingKey,
    pub maa: VerifyingKey,
    pub auth_server: VerifyingKey,
    pub apd: VerifyingKey,
    pub enclave: [u8; 32],
    pub provider: [u8; 32],
}

#[derive(Serialize, Deserialize)]
struct TrustStoreJson {
    platform: String,
    maa: String,
    auth_server: String,
    apd: String,
    enclave: String,
    provider: String,
}

impl TrustStore {
    pub fn to_json(&self) -> String {
        let j = TrustStoreJson {
            platform: B64.encode(self.platform.as_bytes()),
            maa: B64.encode(self.maa.as_bytes()),
            auth_server: B64.encode(self.auth_server.as_bytes()),
            apd: B64.encode(self.apd.as_bytes()),
            enclave: B64.encode(self.enclave),
            provider: B64.encode(self.provider),
        };
        serde_json::to_string_pretty(&j).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let j: TrustStoreJson = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let key32 = |name: &str, s: &str| -> Result<[u8; 32], String> {
            crate::envelope::decode_key(s).map_err(|e| format!("{name}: {e}"))
        };
        let vk = |name: &str, s: &str| -> Result<VerifyingKey, String> {
            VerifyingKey::from_bytes(&key32(name, s)?).map_err(|e| format!("{name}: {e}"))
        };
        Ok(Self {
            platform: vk("platform", &j.platform)?,
            maa: vk("maa", &j.maa)?,
            auth_server: vk("auth_server", &j.auth_server)?,
            apd: vk("apd", &j.apd)?,
            enclave: key32("enclave", &j.enclave)?,
            provider: key32("provider", &j.provider)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    DataProvider,
    EnclaveManager,
    Vm,
    Maa,
    AuthServer,
    Apd,
    ResourceServer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub step: u8,
    pub from: Party,
    pub to: Party,
    #[serde(rename = "type")]
    pub kind: String,
    pub sha256: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    RejectedAt { step: u8, reason: AttestError },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub session_id: String,
    pub entries: Vec<TranscriptEntry>,
    pub outcome: Outcome,
}

impl SessionTranscript {
    /// Steps strictly increasing; success needs all eleven.
    pub fn is_well_formed(&self) -> bool {
        let increasing = self.entries.windows(2).all(|w| w[0].step < w[1].step);
        let complete = match self.outcome {
            Outcome::Success => {
                self.entries.iter().map(|e| e.step).eq(1..=session::STEP_COUNT)
            }
            Outcome::RejectedAt { step, .. } => self.entries.iter().all(|e| e.step <= step),
        };
        increasing && complete
    }
}
