//! Self-contained attested run used by `spider attest-demo` and the
//! `/attest/session` endpoint: a small clinical table is sealed to a
//! simulated enclave, which k-anonymises it inside the session.

use rand::{CryptoRng, RngCore};
use serde::Serialize;

use crate::attest::session::{run_session, Authorities, SessionConfig, Tamper};
use crate::attest::transport::Transport;
use crate::attest::{EnclaveState, PolicyAllowlist, ResourceStore, SessionTranscript, TrustStore};
use crate::envelope::{self, generate_keypair, KeyPair};
use crate::pipeline::{PipelineConfig, Plan};

pub const RESOURCE_ID: &str = "clinical-visits";
pub const PCR_COUNT: usize = 4;
pub const START_TIME: u64 = 1_700_000_000;

/// Values planted in the input that must never appear on the wire.
pub const MARKERS: [&str; 3] = ["ZQX-PLAINTEXT-7731", "MARKER-ALICE-0xBEEF", "CANARY-DX-5521"];

const NAMES: [&str; 8] = ["ada", "bert", "cleo", "dmitri", "eve", "femi", "gus", "hana"];
const DIAGNOSES: [&str; 4] = ["flu", "asthma", "migraine", "fracture"];
const ZIPS: [&str; 4] = ["13053", "13068", "14850", "14853"];

const AGE_HIERARCHY: &str = "\
20,20-29,<40,*
25,20-29,<40,*
28,20-29,<40,*
31,30-39,<40,*
36,30-39,<40,*
43,40-49,>=40,*
47,40-49,>=40,*
55,50-59,>=40,*
";

const ZIP_HIERARCHY: &str = "\
13053,1305*,130**,*
13068,1306*,130**,*
14850,1485*,148**,*
14853,1485*,148**,*
";

/// Input table with the markers planted in a direct identifier and a
/// sensitive value.
pub fn input_csv() -> String {
    const AGES: [u32; 8] = [20, 25, 28, 31, 36, 43, 47, 55];
    let mut out = String::from("name,age,zip,diagnosis\n");
    for i in 0..24 {
        let name = match i {
            0 => MARKERS[0],
            1 => MARKERS[1],
            _ => NAMES[i % NAMES.len()],
        };
        let dx = if i == 2 { MARKERS[2] } else { DIAGNOSES[(i * 7) % DIAGNOSES.len()] };
        let age = AGES[(i * 5) % AGES.len()];
        let zip = ZIPS[(i * 3 + i / 4) % ZIPS.len()];
        out.push_str(&format!("{name},{age},{zip},{dx}\n"));
    }
    out
}

pub fn pipeline_config(provider_public_b64: &str) -> PipelineConfig {
    let json = serde_json::json!({
        "schema": {"columns": [
            {"name": "name", "role": "direct", "kind": "categorical"},
            {"name": "age", "role": "quasi", "kind": "categorical"},
            {"name": "zip", "role": "quasi", "kind": "categorical"},
            {"name": "diagnosis", "role": "sensitive", "kind": "categorical"}
        ]},
        "hierarchies": {
            "age": {"csv": AGE_HIERARCHY},
            "zip": {"csv": ZIP_HIERARCHY}
        },
        "classical": {"suppress": ["name"]},
        "release": {"k_anon": {"k": 3, "suppression_limit": 0.0}},
        "encryption": {"provider_public_key": provider_public_b64}
    });
    serde_json::from_value(json).expect("demo config is valid")
}

/// Everything a demo session needs, including the provider's secret key so
/// the caller can read the output.
pub struct Scenario {
    pub session: SessionConfig,
    pub provider: KeyPair,
    pub plan: Plan,
}

impl Scenario {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R, tamper: Option<Tamper>) -> Self {
        let authorities = Authorities::generate(rng);
        let provider = generate_keypair(rng).expect("rng");
        let config = pipeline_config(&provider.public_base64());
        // The measured bundle is the workload identity plus its config.
        let mut bundle = b"spider-pipeline/".to_vec();
        bundle.extend(serde_json::to_vec(&config).expect("serializable"));
        let enclave = EnclaveState::boot(&bundle, PCR_COUNT, generate_keypair(rng).expect("rng"));

        let mut store = ResourceStore::new();
        let sealed = envelope::seal(input_csv().as_bytes(), &enclave.keypair.public_key(), rng)
            .expect("rng");
        store.insert(RESOURCE_ID, sealed);

        let trust = TrustStore {
            platform: authorities.platform.verifying_key(),
            maa: authorities.maa.verifying_key(),
            auth_server: authorities.auth_server.verifying_key(),
            apd: authorities.apd.verifying_key(),
            enclave: enclave.keypair.public_key(),
            provider: provider.public_key(),
        };
        let allowlist = PolicyAllowlist::new(vec![enclave.measurement], enclave.pcrs.clone(), 300)
            .expect("one measurement");
        let plan = config.resolve(None).expect("demo config resolves");
        Self {
            session: SessionConfig {
                authorities,
                trust,
                enclave,
                allowlist,
                store,
                resource_id: RESOURCE_ID.into(),
                start_time: START_TIME,
                tamper,
            },
            provider,
            plan,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoReport {
    pub transcript: SessionTranscript,
    /// Decrypted k-anonymised table, present on success.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_csv: Option<String>,
    /// True if any planted marker was seen in a message on the wire.
    pub plaintext_leaked: bool,
}

pub fn run_demo<T, R>(tamper: Option<Tamper>, transport: &mut T, rng: &mut R) -> DemoReport
where
    T: Transport + ?Sized,
    R: RngCore + CryptoRng,
{
    let scenario = Scenario::new(rng, tamper);
    let plan = &scenario.plan;
    let workload =
        |input: &[u8]| -> Result<Vec<u8>, String> { plan.execute(input).map(|(out, _)| out).map_err(|e| e.to_string()) };
    let outcome = run_session(&scenario.session, &workload, transport, rng);
    let plaintext_leaked = outcome.messages.iter().any(|m| {
        let text = serde_json::to_string(m).expect("serializable");
        MARKERS.iter().any(|marker| text.contains(marker))
    });
    let output_csv = outcome.output.as_ref().map(|env| {
        let bytes = envelope::open(env, &scenario.provider).expect("sealed to provider");
        String::from_utf8(bytes).expect("csv is utf-8")
    });
    DemoReport {
        transcript: outcome.transcript,
        output_csv,
        plaintext_leaked,
    }
}
