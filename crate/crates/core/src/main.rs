use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::rngs::OsRng;
use serde_json::json;

use spider_core::attest::{LoopbackTransport, Outcome, Tamper};
use spider_core::dp::{self, QueryConfig};
use spider_core::envelope::{self, Envelope, KeyPair};
use spider_core::pipeline::PipelineConfig;
use spider_core::service::{self, AppState};
use spider_core::demo;

#[derive(Parser)]
#[command(name = "spider", version, about = "De-identification pipeline with sealed inputs and outputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an X25519 key pair as `<name>.key` and `<name>.pub`.
    Keygen {
        #[arg(short, long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "spider")]
        name: String,
    },
    /// Seal a file to a recipient public key.
    Seal {
        /// Public key file or base64 key.
        #[arg(long)]
        recipient: String,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Open an envelope with a secret key; `-` writes to stdout.
    Open {
        #[arg(long)]
        key: PathBuf,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the pipeline on a sealed input and write a sealed output.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Enclave secret key; defaults to `encryption.enclave_key` in the config.
        #[arg(long)]
        key: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Expected and simulated error of a DP query over an epsilon grid.
    Tradeoff {
        /// Query JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the simulated attestation session, optionally with a fault.
    AttestDemo {
        #[arg(long)]
        tamper: Option<Tamper>,
        #[arg(long)]
        seed: Option<u64>,
        /// Carry messages over a local TCP relay instead of in memory.
        #[arg(long)]
        loopback: bool,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, env = service::LISTEN_ENV, default_value = service::DEFAULT_LISTEN)]
        listen: SocketAddr,
        #[arg(long, env = "SPIDER_TOKEN")]
        token: String,
        /// Enclave secret key; a fresh one is generated if absent.
        #[arg(long)]
        key: Option<PathBuf>,
        /// Directory of sealed `.spdr` inputs, addressable by file stem.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        reports_dir: Option<PathBuf>,
    },
}

struct Failure {
    code: &'static str,
    message: String,
}

impl Failure {
    fn new(code: &'static str, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::new("io", format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(io_err(path))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn load_keypair(path: &Path) -> Result<KeyPair, Failure> {
    KeyPair::from_secret_base64(read_text(path)?.trim()).map_err(|e| Failure::new("key", e))
}

fn load_envelope(path: &Path) -> Result<Envelope, Failure> {
    Envelope::from_bytes(&read(path)?).map_err(|e| Failure::new("envelope", e))
}

fn keygen(out_dir: &Path, name: &str) -> CliResult {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let kp = envelope::generate_keypair(&mut OsRng).map_err(|e| Failure::new("entropy", e))?;
    write(&out_dir.join(format!("{name}.key")), format!("{}\n", kp.secret_base64()).as_bytes())?;
    write(&out_dir.join(format!("{name}.pub")), format!("{}\n", kp.public_base64()).as_bytes())?;
    println!("{}", hex::encode(kp.fingerprint()));
    Ok(())
}

fn seal(recipient: &str, input: &Path, output: &Path) -> CliResult {
    let text = match fs::read_to_string(recipient) {
        Ok(t) => t,
        Err(_) => recipient.to_string(),
    };
    let key = envelope::decode_key(text.trim()).map_err(|e| Failure::new("key", e))?;
    let env = envelope::seal(&read(input)?, &key, &mut OsRng).map_err(|e| Failure::new("envelope", e))?;
    write(output, &env.to_bytes())
}

fn open(key: &Path, input: &Path, output: &Path) -> CliResult {
    let kp = load_keypair(key)?;
    let plain = envelope::open(&load_envelope(input)?, &kp).map_err(|e| Failure::new("envelope", e))?;
    if output == Path::new("-") {
        use std::io::Write;
        std::io::stdout()
            .write_all(&plain)
            .map_err(|e| Failure::new("io", e))
    } else {
        write(output, &plain)
    }
}

fn run(
    config_path: &Path,
    input: &Path,
    output: &Path,
    report_path: Option<&Path>,
    key: Option<&Path>,
    seed: Option<u64>,
) -> CliResult {
    let mut config = PipelineConfig::from_json(&read_text(config_path)?)
        .map_err(|e| Failure::new(e.code(), e))?;
    if seed.is_some() {
        config.seed = seed;
    }
    let base = config_path.parent();
    let key_path = match (key, &config.encryption.enclave_key) {
        (Some(k), _) => k.to_path_buf(),
        (None, Some(k)) => base.map(|b| b.join(k)).unwrap_or_else(|| k.clone()),
        (None, None) => return Err(Failure::new("usage", "no enclave key given")),
    };
    let enclave = load_keypair(&key_path)?;
    let plan = config.resolve(base).map_err(|e| Failure::new(e.code(), e))?;
    let env = load_envelope(input)?;
    let (out, report) = spider_core::pipeline::run_pipeline(&plan, &env, &enclave, &mut OsRng)
        .map_err(|e| Failure::new(e.code(), e))?;
    write(output, &out.to_bytes())?;
    let report = serde_json::to_string_pretty(&report).expect("serializable");
    match report_path {
        Some(p) => write(p, report.as_bytes()),
        None => {
            println!("{report}");
            Ok(())
        }
    }
}

fn tradeoff(config: &Path, eps: &[f64], trials: usize, seed: Option<u64>) -> CliResult {
    let q: QueryConfig =
        serde_json::from_str(&read_text(config)?).map_err(|e| Failure::new("config_invalid", e))?;
    let seed = seed.or(q.seed).unwrap_or_else(dp::entropy_seed);
    let points = dp::noise_tradeoff_curve(&q.query, eps, trials, seed)
        .map_err(|e| Failure::new("differential_privacy", e))?;
    println!("{}", serde_json::to_string_pretty(&points).expect("serializable"));
    Ok(())
}

fn attest_demo(tamper: Option<Tamper>, seed: Option<u64>, loopback: bool) -> CliResult {
    use rand::SeedableRng;
    let mut rng = match seed {
        Some(s) => rand_chacha::ChaCha20Rng::seed_from_u64(s),
        None => rand_chacha::ChaCha20Rng::from_rng(OsRng).map_err(|e| Failure::new("entropy", e))?,
    };
    let report = if loopback {
        let mut t = LoopbackTransport::start().map_err(|e| Failure::new("io", e))?;
        demo::run_demo(tamper, &mut t, &mut rng)
    } else {
        demo::run_demo(tamper, &mut spider_core::attest::InProcessBus, &mut rng)
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "transcript": report.transcript,
            "output_released": report.output_csv.is_some(),
            "plaintext_leaked": report.plaintext_leaked,
        }))
        .expect("serializable")
    );
    match report.transcript.outcome {
        Outcome::Success => Ok(()),
        Outcome::RejectedAt { step, reason } => Err(Failure::new(
            "attestation_rejected",
            format!("rejected at step {step}: {reason:?} ({reason})"),
        )),
    }
}

fn serve(
    listen: SocketAddr,
    token: String,
    key: Option<&Path>,
    store: Option<&Path>,
    reports_dir: Option<PathBuf>,
) -> CliResult {
    let enclave = match key {
        Some(k) => load_keypair(k)?,
        None => envelope::generate_keypair(&mut OsRng).map_err(|e| Failure::new("entropy", e))?,
    };
    let public = enclave.public_base64();
    let mut state = AppState::new(token, enclave);
    if let Some(dir) = store {
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(|e| Failure::new("io", e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(envelope::FILE_EXTENSION) {
                continue;
            }
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            state = state.with_resource(id, load_envelope(&path)?);
        }
    }
    if let Some(dir) = reports_dir {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        state = state.with_reports_dir(dir);
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::new("io", e))?;
    rt.block_on(async move {
        println!("{}", json!({"listen": listen.to_string(), "enclave_public_key": public}));
        service::serve(listen, Arc::new(state)).await
    })
    .map_err(|e| Failure::new("io", e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim()}));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Keygen { out_dir, name } => keygen(&out_dir, &name),
        Command::Seal { recipient, input, output } => seal(&recipient, &input, &output),
        Command::Open { key, input, output } => open(&key, &input, &output),
        Command::Run { config, input, output, report, key, seed } => {
            run(&config, &input, &output, report.as_deref(), key.as_deref(), seed)
        }
        Command::Tradeoff { config, eps, trials, seed } => tradeoff(&config, &eps, trials, seed),
        Command::AttestDemo { tamper, seed, loopback } => attest_demo(tamper, seed, loopback),
        Command::Serve { listen, token, key, store, reports_dir } => {
            serve(listen, token, key.as_deref(), store.as_deref(), reports_dir)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({"error": f.code, "message": f.message}));
            if f.code == "usage" {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
