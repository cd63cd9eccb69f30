//! End-to-end pipeline: open the input envelope, apply classical operations
//! in a fixed order (suppress, pseudonymize, generalize), take exactly one
//! release path (k-anonymised table or DP query answers) and seal the result
//! to the data provider.

use std::collections::{BTreeMap, HashMap};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::classical::{self, ClassicalError, GeneralizationHierarchy};
use crate::dp::{self, DpError, DpResult, QueryConfig, TradeoffPoint};
use crate::envelope::{self, Envelope, EnvelopeError, KeyPair};
use crate::kanon::{self, KAnonConfig, KAnonError, KAnonymityReport};
use crate::tabular::{load_dataset, AttributeSchema, TabularError};

pub const DEFAULT_BATCH_SIZE: usize = 1024;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error(transparent)]
    Classical(#[from] ClassicalError),
    #[error(transparent)]
    KAnon(#[from] KAnonError),
    #[error(transparent)]
    Dp(#[from] DpError),
}

impl PipelineError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::ConfigInvalid(_) => "config_invalid",
            PipelineError::Envelope(_) => "envelope",
            PipelineError::Tabular(_) => "tabular",
            PipelineError::Classical(_) => "classical",
            PipelineError::KAnon(KAnonError::Unsatisfiable { .. }) => "unsatisfiable",
            PipelineError::KAnon(_) => "k_anonymity",
            PipelineError::Dp(_) => "differential_privacy",
        }
    }
}

/// Hierarchy CSV, inline or from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchySource {
    /// Column the hierarchy applies to; defaults to the map key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudonymizeStep {
    pub columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizeStep {
    pub column: String,
    /// Hierarchy reference; defaults to the column name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchy: Option<String>,
    pub level: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassicalOps {
    #[serde(default)]
    pub suppress: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudonymize: Option<PseudonymizeStep>,
    #[serde(default)]
    pub generalize: Vec<GeneralizeStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KAnonRelease {
    pub k: NonZeroUsize,
    #[serde(default)]
    pub suppression_limit: f64,
    /// Hierarchy reference per quasi-identifier column; a column without an
    /// entry uses the hierarchy named after it.
    #[serde(default)]
    pub hierarchies: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRequest {
    pub epsilons: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Index of the query the curve is computed for.
    #[serde(default)]
    pub query: usize,
}

fn default_trials() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpRelease {
    pub queries: Vec<QueryConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tradeoff: Option<TradeoffRequest>,
}

/// Exactly one of the two fields must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Release {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_anon: Option<KAnonRelease>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpRelease>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EncryptionConfig {
    /// Base64 X25519 public key the output is sealed to.
    pub provider_public_key: String,
    /// Path of the enclave's secret key file, for the CLI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enclave_key: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub schema: AttributeSchema,
    #[serde(default)]
    pub hierarchies: BTreeMap<String, HierarchySource>,
    #[serde(default)]
    pub classical: ClassicalOps,
    pub release: Release,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<NonZeroUsize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub encryption: EncryptionConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleasePath {
    KAnon,
    Dp,
}

/// Validated configuration with hierarchies loaded.
#[derive(Debug, Clone)]
pub struct Plan {
    pub config: PipelineConfig,
    hierarchies: HashMap<String, GeneralizationHierarchy>,
    provider_public: [u8; 32],
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))
    }

    pub fn release_path(&self) -> Result<ReleasePath, PipelineError> {
        match (&self.release.k_anon, &self.release.dp) {
            (Some(_), None) => Ok(ReleasePath::KAnon),
            (None, Some(_)) => Ok(ReleasePath::Dp),
            (Some(_), Some(_)) => Err(PipelineError::ConfigInvalid(
                "choose either the k_anon or the dp release path, not both".into(),
            )),
            (None, None) => Err(PipelineError::ConfigInvalid(
                "no release path selected".into(),
            )),
        }
    }

    /// Checks invariants and loads hierarchy files relative to `base_dir`.
    pub fn resolve(self, base_dir: Option<&Path>) -> Result<Plan, PipelineError> {
        self.release_path()?;
        let provider_public = envelope::decode_key(&self.encryption.provider_public_key)
            .map_err(|e| PipelineError::ConfigInvalid(format!("provider_public_key: {e}")))?;

        let mut hierarchies = HashMap::new();
        for (name, src) in &self.hierarchies {
            let column = src.column.clone().unwrap_or_else(|| name.clone());
            let h = match (&src.csv, &src.path) {
                (Some(text), None) => GeneralizationHierarchy::from_csv(column, text.as_bytes())?,
                (None, Some(path)) => {
                    let path = match base_dir {
                        Some(dir) if path.is_relative() => dir.join(path),
                        _ => path.clone(),
                    };
                    let file = std::fs::File::open(&path).map_err(|e| {
                        PipelineError::ConfigInvalid(format!("hierarchy {}: {e}", path.display()))
                    })?;
                    GeneralizationHierarchy::from_csv(column, file)?
                }
                _ => {
                    return Err(PipelineError::ConfigInvalid(format!(
                        "hierarchy `{name}` needs exactly one of csv or path"
                    )))
                }
            };
            hierarchies.insert(name.clone(), h);
        }

        for g in &self.classical.generalize {
            let r = g.hierarchy.as_deref().unwrap_or(&g.column);
            let h = hierarchies.get(r).ok_or_else(|| {
                PipelineError::ConfigInvalid(format!("unknown hierarchy `{r}`"))
            })?;
            if h.column() != g.column {
                return Err(PipelineError::ConfigInvalid(format!(
                    "hierarchy `{r}` is for `{}`, not `{}`",
                    h.column(),
                    g.column
                )));
            }
        }
        if let Some(dp) = &self.release.dp {
            if dp.queries.is_empty() {
                return Err(PipelineError::ConfigInvalid("dp release has no queries".into()));
            }
            for q in &dp.queries {
                q.query.validate()?;
            }
            if let Some(t) = &dp.tradeoff {
                if t.query >= dp.queries.len() || t.epsilons.is_empty() {
                    return Err(PipelineError::ConfigInvalid("bad tradeoff request".into()));
                }
            }
        }
        Ok(Plan {
            config: self,
            hierarchies,
            provider_public,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: Uuid,
    pub path: ReleasePath,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_report: Option<KAnonymityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp_results: Option<Vec<DpResult>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tradeoff: Option<Vec<TradeoffPoint>>,
    /// Milliseconds per stage.
    pub timings: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpOutput {
    pub results: Vec<DpResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tradeoff: Option<Vec<TradeoffPoint>>,
}

struct Timer(BTreeMap<String, u64>, Instant);

impl Timer {
    fn new() -> Self {
        Self(BTreeMap::new(), Instant::now())
    }

    fn lap(&mut self, stage: &str) {
        self.0
            .insert(stage.to_string(), self.1.elapsed().as_millis() as u64);
        self.1 = Instant::now();
    }
}

impl Plan {
    pub fn provider_public_key(&self) -> [u8; 32] {
        self.provider_public
    }

    fn hierarchy(&self, name: &str) -> Result<&GeneralizationHierarchy, PipelineError> {
        self.hierarchies
            .get(name)
            .ok_or_else(|| PipelineError::ConfigInvalid(format!("unknown hierarchy `{name}`")))
    }

    /// Runs the de-identification on plaintext CSV and returns the plaintext
    /// output (CSV for k-anonymity, JSON for DP) with its report.
    pub fn execute(&self, input_csv: &[u8]) -> Result<(Vec<u8>, RunReport), PipelineError> {
        let cfg = &self.config;
        let mut timer = Timer::new();
        let mut data = load_dataset(input_csv, cfg.schema.clone())?;
        timer.lap("load");

        let ops = &cfg.classical;
        data = classical::suppress(&data, &ops.suppress)?;
        if let Some(p) = &ops.pseudonymize {
            data = classical::pseudonymize(&data, &p.columns, p.salt.as_deref().map(str::as_bytes))?;
        }
        for g in &ops.generalize {
            let h = self.hierarchy(g.hierarchy.as_deref().unwrap_or(&g.column))?;
            data = classical::generalize(&data, &g.column, h, g.level)?;
        }
        timer.lap("classical");

        let batch_size = cfg
            .batch_size
            .unwrap_or(NonZeroUsize::new(DEFAULT_BATCH_SIZE).expect("non-zero"));
        let mut report = RunReport {
            run_id: Uuid::new_v4(),
            path: cfg.release_path()?,
            k_report: None,
            dp_results: None,
            tradeoff: None,
            timings: BTreeMap::new(),
        };

        let output = match (&cfg.release.k_anon, &cfg.release.dp) {
            (Some(k), None) => {
                let hierarchies = kanon::quasi_identifier_names(&data)
                    .iter()
                    .map(|qi| {
                        let r = k.hierarchies.get(qi).map(String::as_str).unwrap_or(qi);
                        let h = self.hierarchy(r)?;
                        if h.column() != qi {
                            return Err(PipelineError::ConfigInvalid(format!(
                                "hierarchy `{r}` is for `{}`, not `{qi}`",
                                h.column()
                            )));
                        }
                        Ok(h.clone())
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let kcfg = KAnonConfig::new(k.k, k.suppression_limit, hierarchies)?;
                let (released, _, k_report) = kanon::anonymize_k(&data, &kcfg)?;
                report.k_report = Some(k_report);
                timer.lap("k_anon");
                released.to_csv()
            }
            (None, Some(d)) => {
                let base_seed = cfg.seed.unwrap_or_else(dp::entropy_seed);
                let mut results = Vec::with_capacity(d.queries.len());
                for (i, q) in d.queries.iter().enumerate() {
                    let seed = q.seed.unwrap_or(base_seed.wrapping_add(i as u64));
                    let bs = q.batch_size.unwrap_or(batch_size);
                    results.push(dp::run_dp_query(&data, &q.query, seed, bs)?);
                }
                timer.lap("dp");
                let tradeoff = match &d.tradeoff {
                    Some(t) => {
                        let q = &d.queries[t.query];
                        let seed = base_seed.wrapping_add(0x5eed_0000);
                        let bs = q.batch_size.unwrap_or(batch_size);
                        let pts = dp::tradeoff_curve(&data, &q.query, &t.epsilons, t.trials, seed, bs)?;
                        timer.lap("tradeoff");
                        Some(pts)
                    }
                    None => None,
                };
                report.dp_results = Some(results.clone());
                report.tradeoff = tradeoff.clone();
                serde_json::to_vec_pretty(&DpOutput { results, tradeoff }).expect("serializable")
            }
            _ => unreachable!("release path validated"),
        };
        report.timings = timer.0;
        Ok((output, report))
    }
}

/// Opens `input` with the enclave key, runs the plan and seals the output to
/// the provider key from the config.
pub fn run_pipeline<R: RngCore + CryptoRng>(
    plan: &Plan,
    input: &Envelope,
    enclave: &KeyPair,
    rng: &mut R,
) -> Result<(Envelope, RunReport), PipelineError> {
    let plaintext = envelope::open(input, enclave)?;
    let (output, report) = plan.execute(&plaintext)?;
    let sealed = envelope::seal(&output, &plan.provider_public, rng)?;
    Ok((sealed, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::generate_keypair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const CSV: &str = "name,zip,dx\nann,a,flu\nbo,b,flu\ncy,b,cold\ndi,b,flu\ned,b,flu\nfay,b,cold\n";

    fn config(provider: &KeyPair, release: &str) -> PipelineConfig {
        let text = format!(
            r#"{{
              "schema": {{"columns": [
                {{"name":"name","role":"direct","kind":"categorical"}},
                {{"name":"zip","role":"quasi","kind":"categorical"}},
                {{"name":"dx","role":"sensitive","kind":"categorical"}}]}},
              "hierarchies": {{"zip": {{"csv": "a,*\nb,*\n"}}}},
              "classical": {{"suppress": ["name"]}},
              "release": {release},
              "seed": 9,
              "encryption": {{"provider_public_key": "{}"}}
            }}"#,
            provider.public_base64()
        );
        PipelineConfig::from_json(&text).unwrap()
    }

    #[test]
    fn k_anon_path() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let provider = generate_keypair(&mut rng).unwrap();
        let enclave = generate_keypair(&mut rng).unwrap();
        let plan = config(&provider, r#"{"k_anon": {"k": 2}}"#).resolve(None).unwrap();
        let input = envelope::seal(CSV.as_bytes(), &enclave.public_key(), &mut rng).unwrap();
        let (out, report) = run_pipeline(&plan, &input, &enclave, &mut rng).unwrap();
        let csv = String::from_utf8(envelope::open(&out, &provider).unwrap()).unwrap();
        assert_eq!(
            csv,
            "name,zip,dx\n*,*,flu\n*,*,flu\n*,*,cold\n*,*,flu\n*,*,flu\n*,*,cold\n"
        );
        let k = report.k_report.unwrap();
        assert_eq!(k.histogram, BTreeMap::from([(6, 1)]));
        assert_eq!(report.path, ReleasePath::KAnon);
    }

    #[test]
    fn dp_path_is_reproducible() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let provider = generate_keypair(&mut rng).unwrap();
        let release = r#"{"dp": {"queries": [
            {"kind":"count","predicate":{"column":"dx","equals":"flu"},"epsilon":0.5},
            {"kind":"histogram","group_by":"dx","bins":["cold","flu"],"epsilon":1.0}],
            "tradeoff": {"epsilons":[0.5,1.0],"trials":10}}}"#;
        let plan = config(&provider, release).resolve(None).unwrap();
        let (a, ra) = plan.execute(CSV.as_bytes()).unwrap();
        let (b, _) = plan.execute(CSV.as_bytes()).unwrap();
        assert_eq!(a, b);
        let out: DpOutput = serde_json::from_slice(&a).unwrap();
        assert_eq!(out.results.len(), 2);
        assert_eq!(out.results[0].scale_b, [2.0]);
        assert_eq!(out.results[0].seed, 9);
        assert_eq!(out.results[1].labels, ["cold", "flu"]);
        assert_eq!(out.tradeoff.unwrap().len(), 2);
        let text = serde_json::to_string(&ra).unwrap();
        assert!(!text.contains("raw"));
    }

    #[test]
    fn both_paths_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let provider = generate_keypair(&mut rng).unwrap();
        let release = r#"{"k_anon": {"k": 2},
            "dp": {"queries": [{"kind":"count","epsilon":1.0}]}}"#;
        let err = config(&provider, release).resolve(None).unwrap_err();
        assert!(matches!(err, PipelineError::ConfigInvalid(_)));
        let err = config(&provider, "{}").resolve(None).unwrap_err();
        assert!(matches!(err, PipelineError::ConfigInvalid(_)));
    }

    #[test]
    fn classical_order_is_fixed() {
        // pseudonymize runs after suppress, so a suppressed column hashes "*"
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let provider = generate_keypair(&mut rng).unwrap();
        let mut cfg = config(&provider, r#"{"k_anon": {"k": 1}}"#);
        cfg.classical.pseudonymize = Some(PseudonymizeStep {
            columns: vec!["name".into()],
            salt: None,
        });
        let (out, _) = cfg.resolve(None).unwrap().execute(CSV.as_bytes()).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains(&classical::pseudonym("*", b"")));
    }

    #[test]
    fn bad_generalize_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let provider = generate_keypair(&mut rng).unwrap();
        let mut cfg = config(&provider, r#"{"k_anon": {"k": 1}}"#);
        cfg.classical.generalize.push(GeneralizeStep {
            column: "dx".into(),
            hierarchy: Some("zip".into()),
            level: 1,
        });
        assert!(matches!(
            cfg.resolve(None),
            Err(PipelineError::ConfigInvalid(_))
        ));
    }

    #[test]
    fn wrong_enclave_key() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let provider = generate_keypair(&mut rng).unwrap();
        let enclave = generate_keypair(&mut rng).unwrap();
        let plan = config(&provider, r#"{"k_anon": {"k": 2}}"#).resolve(None).unwrap();
        let input = envelope::seal(CSV.as_bytes(), &provider.public_key(), &mut rng).unwrap();
        assert!(matches!(
            run_pipeline(&plan, &input, &enclave, &mut rng),
            Err(PipelineError::Envelope(EnvelopeError::WrongRecipient))
        ));
    }
}
