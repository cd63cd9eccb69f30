//! The eleven-step attestation and execution session.
//!
//! | step | from            | to              | message                   |
//! |------|-----------------|-----------------|---------------------------|
//! | 1    | data provider   | enclave manager | run request + challenge   |
//! | 2    | enclave manager | vm              | report request            |
//! | 3    | vm              | maa             | hardware report           |
//! | 4    | maa             | vm              | attestation JWT           |
//! | 5    | vm              | auth server     | JWT, relayed to the APD   |
//! | 6    | apd             | auth server     | signed approval           |
//! | 7    | auth server     | enclave manager | resource access token     |
//! | 8    | enclave manager | resource server | data request with RAT     |
//! | 9    | resource server | vm              | encrypted input           |
//! | 10   | vm              | enclave manager | execution receipt         |
//! | 11   | vm              | resource server | encrypted output          |
//!
//! A rejection at step n means the receiving party's check for step n
//! failed; the transcript then holds every message sent up to that point.

use std::fmt;
use std::str::FromStr;

use ed25519_dalek::SigningKey;
use rand::{CryptoRng, RngCore};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::transport::{Transport, WireMessage};
use super::{
    apd_validate, generate_hardware_report, issue_rat, jwt, maa_verify_and_issue, measure,
    resource_fetch, Approval, AttestError, AttestationClaims, AttestationToken, EnclaveState,
    HardwareReport, Outcome, Party, Pcr, PolicyAllowlist, ResourceAccessToken, ResourceStore,
    SessionTranscript, TranscriptEntry, TrustStore, TOKEN_LIFETIME_SECS,
};
use crate::envelope::{self, generate_keypair, Envelope, EnvelopeError};

pub const STEP_COUNT: u8 = 11;

/// Deliberate faults injected into a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tamper {
    FlippedMeasurement,
    ForgedMaaSignature,
    ExpiredJwt,
    WrongPcrs,
    ForgedRat,
    WrongRatScope,
    ReplayedNonce,
    UnlistedMeasurement,
    WrongRecipient,
}

impl Tamper {
    pub const ALL: [Tamper; 9] = [
        Tamper::FlippedMeasurement,
        Tamper::ForgedMaaSignature,
        Tamper::ExpiredJwt,
        Tamper::WrongPcrs,
        Tamper::ForgedRat,
        Tamper::WrongRatScope,
        Tamper::ReplayedNonce,
        Tamper::UnlistedMeasurement,
        Tamper::WrongRecipient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tamper::FlippedMeasurement => "flipped-measurement",
            Tamper::ForgedMaaSignature => "forged-maa-signature",
            Tamper::ExpiredJwt => "expired-jwt",
            Tamper::WrongPcrs => "wrong-pcrs",
            Tamper::ForgedRat => "forged-rat",
            Tamper::WrongRatScope => "wrong-rat-scope",
            Tamper::ReplayedNonce => "replayed-nonce",
            Tamper::UnlistedMeasurement => "unlisted-measurement",
            Tamper::WrongRecipient => "wrong-recipient",
        }
    }

    /// Step and error at which the session must stop.
    pub fn expected_rejection(self) -> (u8, AttestError) {
        match self {
            Tamper::FlippedMeasurement => (3, AttestError::BadPlatformSignature),
            Tamper::ReplayedNonce => (3, AttestError::NonceMismatch),
            Tamper::ForgedMaaSignature => (6, AttestError::BadSignature),
            Tamper::ExpiredJwt => (6, AttestError::Expired),
            Tamper::WrongPcrs => (6, AttestError::PcrMismatch),
            Tamper::UnlistedMeasurement => (6, AttestError::MeasurementNotAllowed),
            Tamper::ForgedRat => (8, AttestError::BadSignature),
            Tamper::WrongRatScope => (8, AttestError::ScopeMismatch),
            Tamper::WrongRecipient => (10, AttestError::AuthenticationFailure),
        }
    }
}

impl fmt::Display for Tamper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tamper {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tamper::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Tamper::ALL.iter().map(|t| t.name()).collect();
                format!("unknown tamper case `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// The application run inside the enclave at step 10. Receives decrypted
/// input, returns plaintext output.
pub trait Workload {
    fn execute(&self, input: &[u8]) -> Result<Vec<u8>, String>;
}

impl<F: Fn(&[u8]) -> Result<Vec<u8>, String>> Workload for F {
    fn execute(&self, input: &[u8]) -> Result<Vec<u8>, String> {
        self(input)
    }
}

/// Signing keys of the simulated platform and services.
#[derive(Debug, Clone)]
pub struct Authorities {
    pub platform: SigningKey,
    pub maa: SigningKey,
    pub auth_server: SigningKey,
    pub apd: SigningKey,
}

impl Authorities {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self {
            platform: SigningKey::generate(rng),
            maa: SigningKey::generate(rng),
            auth_server: SigningKey::generate(rng),
            apd: SigningKey::generate(rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub authorities: Authorities,
    pub trust: TrustStore,
    pub enclave: EnclaveState,
    pub allowlist: PolicyAllowlist,
    pub store: ResourceStore,
    pub resource_id: String,
    /// Simulated clock at step 1, in seconds.
    pub start_time: u64,
    pub tamper: Option<Tamper>,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub transcript: SessionTranscript,
    /// Every message as it crossed the transport.
    pub messages: Vec<WireMessage>,
    /// Output envelope delivered to the resource server on success.
    pub output: Option<Envelope>,
}

struct Run<'a, T: Transport + ?Sized> {
    session_id: String,
    transport: &'a mut T,
    now: u64,
    entries: Vec<TranscriptEntry>,
    messages: Vec<WireMessage>,
}

type Reject = (u8, AttestError);

impl<T: Transport + ?Sized> Run<'_, T> {
    fn send(
        &mut self,
        step: u8,
        from: Party,
        to: Party,
        kind: &str,
        body: serde_json::Value,
    ) -> Result<serde_json::Value, Reject> {
        self.now += 1;
        let msg = WireMessage {
            session_id: self.session_id.clone(),
            step,
            kind: kind.into(),
            from,
            to,
            body,
        };
        let delivered = self
            .transport
            .deliver(&msg)
            .map_err(|_| (step, AttestError::Transport))?;
        let bytes = serde_json::to_vec(&delivered).expect("serializable");
        self.entries.push(TranscriptEntry {
            step,
            from,
            to,
            kind: kind.into(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            timestamp: self.now,
        });
        self.messages.push(delivered.clone());
        Ok(delivered.body)
    }
}

fn field<T: DeserializeOwned>(body: &serde_json::Value, name: &str, step: u8) -> Result<T, Reject> {
    body.get(name)
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok())
        .ok_or((step, AttestError::Malformed))
}

fn value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

/// Runs steps 1 through 11. Any failed check stops the session with
/// [`Outcome::RejectedAt`]; plaintext never leaves the enclave.
pub fn run_session<W, T, R>(
    config: &SessionConfig,
    workload: &W,
    transport: &mut T,
    rng: &mut R,
) -> SessionOutcome
where
    W: Workload + ?Sized,
    T: Transport + ?Sized,
    R: RngCore + CryptoRng,
{
    let mut id = [0u8; 16];
    rng.fill_bytes(&mut id);
    let mut run = Run {
        session_id: hex::encode(id),
        transport,
        now: config.start_time,
        entries: Vec::new(),
        messages: Vec::new(),
    };
    let result = drive(config, workload, &mut run, rng);
    let (outcome, output) = match result {
        Ok(env) => (Outcome::Success, Some(env)),
        Err((step, reason)) => (Outcome::RejectedAt { step, reason }, None),
    };
    SessionOutcome {
        transcript: SessionTranscript {
            session_id: run.session_id,
            entries: run.entries,
            outcome,
        },
        messages: run.messages,
        output,
    }
}

fn drive<W, T, R>(
    config: &SessionConfig,
    workload: &W,
    run: &mut Run<'_, T>,
    rng: &mut R,
) -> Result<Envelope, Reject>
where
    W: Workload + ?Sized,
    T: Transport + ?Sized,
    R: RngCore + CryptoRng,
{
    let tamper = config.tamper;
    let auth = &config.authorities;
    let trust = &config.trust;

    // The VM as booted. Some faults change what actually runs.
    let mut enclave = config.enclave.clone();
    match tamper {
        Some(Tamper::WrongPcrs) => enclave.pcrs[0] = Pcr(Sha256::digest(b"debug-config").into()),
        Some(Tamper::UnlistedMeasurement) => enclave.measurement = measure(b"unapproved-build"),
        Some(Tamper::WrongRecipient) => {
            enclave.keypair = generate_keypair(rng).map_err(|_| (10, AttestError::Transport))?
        }
        _ => {}
    }

    // 1. Data provider asks for a run and supplies a fresh challenge.
    let mut nonce = [0u8; 16];
    rng.fill_bytes(&mut nonce);
    let body = run.send(
        1,
        Party::DataProvider,
        Party::EnclaveManager,
        "run_request",
        json!({ "resource_id": config.resource_id, "nonce": hex::encode(nonce) }),
    )?;
    let challenge: String = field(&body, "nonce", 1)?;
    let resource_id: String = field(&body, "resource_id", 1)?;

    // 2. Guest attestation library produces the hardware report.
    let body = run.send(
        2,
        Party::EnclaveManager,
        Party::Vm,
        "report_request",
        json!({ "nonce": challenge }),
    )?;
    let vm_nonce: [u8; 16] = hex::decode(field::<String>(&body, "nonce", 2)?)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or((2, AttestError::Malformed))?;
    let report_nonce = if tamper == Some(Tamper::ReplayedNonce) {
        // a report captured in an earlier session
        let mut stale = [0u8; 16];
        rng.fill_bytes(&mut stale);
        stale
    } else {
        vm_nonce
    };
    let mut report = generate_hardware_report(&enclave, report_nonce, &auth.platform);
    if tamper == Some(Tamper::FlippedMeasurement) {
        report.measurement[0] ^= 0x01;
    }

    // 3. Report goes to the attestation service, which checks it.
    let body = run.send(
        3,
        Party::Vm,
        Party::Maa,
        "attestation_request",
        json!({ "report": value(&report) }),
    )?;
    let received: HardwareReport = field(&body, "report", 3)?;
    let token = maa_verify_and_issue(&received, &nonce, &trust.platform, &auth.maa, run.now)
        .map_err(|e| (3, e))?;

    // 4. Attestation JWT back to the VM.
    let token = if tamper == Some(Tamper::ForgedMaaSignature) {
        let claims: AttestationClaims = jwt::decode_unverified(&token.0).expect("own token");
        AttestationToken(jwt::sign(&claims, &SigningKey::generate(rng)))
    } else {
        token
    };
    let body = run.send(4, Party::Maa, Party::Vm, "attestation_token", json!({ "jwt": token }))?;
    let token: AttestationToken = field(&body, "jwt", 4)?;

    // 5. VM hands the JWT to the auth server, which relays it to the APD.
    let body = run.send(
        5,
        Party::Vm,
        Party::AuthServer,
        "attestation_token_relay",
        json!({ "jwt": token }),
    )?;
    let relayed: AttestationToken = field(&body, "jwt", 5)?;

    // 6. APD validates against policy and signs an approval.
    if tamper == Some(Tamper::ExpiredJwt) {
        run.now += TOKEN_LIFETIME_SECS;
    }
    let approval = apd_validate(
        &relayed,
        &config.allowlist,
        &trust.maa,
        &auth.apd,
        &run.session_id,
        run.now + 1,
    )
    .map_err(|e| (6, e))?;
    let body = run.send(6, Party::Apd, Party::AuthServer, "approval", json!({ "approval": approval }))?;
    let approval: Approval = field(&body, "approval", 6)?;

    // 7. Auth server issues the resource access token.
    let rat = issue_rat(&approval, &resource_id, &trust.apd, &auth.auth_server, run.now + 1)
        .map_err(|e| (7, e))?;
    let rat = if tamper == Some(Tamper::ForgedRat) {
        let claims: super::RatClaims = jwt::decode_unverified(&rat.0).expect("own token");
        ResourceAccessToken(jwt::sign(&claims, &SigningKey::generate(rng)))
    } else {
        rat
    };
    let body = run.send(
        7,
        Party::AuthServer,
        Party::EnclaveManager,
        "resource_access_token",
        json!({ "rat": rat }),
    )?;
    let rat: ResourceAccessToken = field(&body, "rat", 7)?;

    // 8. Enclave manager requests the data; the resource server checks the RAT.
    let requested = if tamper == Some(Tamper::WrongRatScope) {
        format!("{resource_id}-other")
    } else {
        resource_id.clone()
    };
    let body = run.send(
        8,
        Party::EnclaveManager,
        Party::ResourceServer,
        "data_request",
        json!({ "resource_id": requested, "rat": rat }),
    )?;
    let requested: String = field(&body, "resource_id", 8)?;
    let rat: ResourceAccessToken = field(&body, "rat", 8)?;
    let input = resource_fetch(&rat, &requested, &config.store, &trust.auth_server, run.now)
        .map_err(|e| (8, e))?;

    // 9. Encrypted input to the VM.
    let body = run.send(
        9,
        Party::ResourceServer,
        Party::Vm,
        "encrypted_data",
        json!({ "envelope": input.to_base64() }),
    )?;
    let input_b64: String = field(&body, "envelope", 9)?;
    let input = Envelope::from_base64(&input_b64).map_err(|_| (9, AttestError::Malformed))?;

    // 10. Decrypt, execute, re-encrypt to the data provider. Plaintext
    // exists only inside this block.
    let output = {
        let plaintext = envelope::open(&input, &enclave.keypair).map_err(|e| match e {
            EnvelopeError::WrongRecipient | EnvelopeError::AuthenticationFailure => {
                (10, AttestError::AuthenticationFailure)
            }
            _ => (10, AttestError::Malformed),
        })?;
        let result = workload
            .execute(&plaintext)
            .map_err(|_| (10, AttestError::WorkloadFailed))?;
        envelope::seal(&result, &trust.provider, rng).map_err(|_| (10, AttestError::WorkloadFailed))?
    };
    let output_bytes = output.to_bytes();
    run.send(
        10,
        Party::Vm,
        Party::EnclaveManager,
        "execution_receipt",
        json!({
            "input_sha256": hex::encode(Sha256::digest(input.to_bytes())),
            "output_sha256": hex::encode(Sha256::digest(&output_bytes)),
        }),
    )?;

    // 11. Encrypted output to the resource server.
    let body = run.send(
        11,
        Party::Vm,
        Party::ResourceServer,
        "encrypted_output",
        json!({ "envelope": output.to_base64() }),
    )?;
    let delivered: String = field(&body, "envelope", 11)?;
    Envelope::from_base64(&delivered).map_err(|_| (11, AttestError::Malformed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attest::InProcessBus;
    use crate::envelope::{open, seal, KeyPair};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup(rng: &mut ChaCha20Rng) -> (SessionConfig, KeyPair) {
        let authorities = Authorities::generate(rng);
        let provider = generate_keypair(rng).unwrap();
        let enclave = EnclaveState::boot(b"bundle", 3, generate_keypair(rng).unwrap());
        let mut store = ResourceStore::new();
        store.insert(
            "ds-1",
            seal(b"hello SECRET", &enclave.keypair.public_key(), rng).unwrap(),
        );
        let trust = TrustStore {
            platform: authorities.platform.verifying_key(),
            maa: authorities.maa.verifying_key(),
            auth_server: authorities.auth_server.verifying_key(),
            apd: authorities.apd.verifying_key(),
            enclave: enclave.keypair.public_key(),
            provider: provider.public_key(),
        };
        let allowlist =
            PolicyAllowlist::new(vec![enclave.measurement], enclave.pcrs.clone(), 300).unwrap();
        let config = SessionConfig {
            authorities,
            trust,
            enclave,
            allowlist,
            store,
            resource_id: "ds-1".into(),
            start_time: 1_700_000_000,
            tamper: None,
        };
        (config, provider)
    }

    fn upper(input: &[u8]) -> Result<Vec<u8>, String> {
        Ok(input.to_ascii_uppercase())
    }

    #[test]
    fn honest_session() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (config, provider) = setup(&mut rng);
        let out = run_session(&config, &upper, &mut InProcessBus, &mut rng);
        assert_eq!(out.transcript.outcome, Outcome::Success);
        assert_eq!(out.transcript.entries.len(), 11);
        assert!(out.transcript.is_well_formed());
        let plain = open(&out.output.unwrap(), &provider).unwrap();
        assert_eq!(plain, b"HELLO SECRET");
    }

    #[test]
    fn every_tamper_rejects_where_expected() {
        for t in Tamper::ALL {
            let mut rng = ChaCha20Rng::seed_from_u64(6);
            let (mut config, _) = setup(&mut rng);
            config.tamper = Some(t);
            let out = run_session(&config, &upper, &mut InProcessBus, &mut rng);
            let (step, reason) = t.expected_rejection();
            assert_eq!(
                out.transcript.outcome,
                Outcome::RejectedAt { step, reason },
                "{t}"
            );
            assert!(out.output.is_none());
            assert!(out.transcript.is_well_formed());
        }
    }

    #[test]
    fn workload_failure_is_reported() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let (config, _) = setup(&mut rng);
        let fail = |_: &[u8]| -> Result<Vec<u8>, String> { Err("boom".into()) };
        let out = run_session(&config, &fail, &mut InProcessBus, &mut rng);
        assert_eq!(
            out.transcript.outcome,
            Outcome::RejectedAt {
                step: 10,
                reason: AttestError::WorkloadFailed
            }
        );
    }

    #[test]
    fn tamper_names_round_trip() {
        for t in Tamper::ALL {
            assert_eq!(t.name().parse::<Tamper>().unwrap(), t);
        }
        assert!("nope".parse::<Tamper>().is_err());
    }

    #[test]
    fn outcome_json() {
        let o = Outcome::RejectedAt {
            step: 6,
            reason: AttestError::Expired,
        };
        assert_eq!(
            serde_json::to_value(&o).unwrap(),
            json!({"rejected_at": {"step": 6, "reason": "Expired"}})
        );
        assert_eq!(serde_json::to_value(Outcome::Success).unwrap(), json!("success"));
    }
}
