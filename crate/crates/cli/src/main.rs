mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use keytrust_core::crypto::{PrivateKeyDoc, PublicKeyDoc};
use keytrust_core::harness::{self, BenchConfig, SimulateConfig};
use keytrust_core::keystroke::{dwell_time, read_events, Exclusion};
use keytrust_core::protocol::{enroll, LogSink};
use keytrust_core::{
    keygen, keygen_os, AuthClient, Decision, FileStore, FixedPointParams, LocalServer,
    PrivateKey, ProtocolError, PublicKey, RemoteServer, Server, ServerConfig, ServerHandle,
    TrustParams,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const EXIT_REJECTED: u8 = 2;
const EXIT_NOT_ENROLLED: u8 = 3;

const PUBLIC_KEY_FILE: &str = "public.json";
const PRIVATE_KEY_FILE: &str = "private.json";

#[derive(Parser)]
#[command(name = "keytrust", version, about = "Continuous keystroke authentication over an encrypted template")]
struct Cli {
    /// File of `key = value` lines; flags and KEYTRUST_* variables override it.
    #[arg(long, global = true, env = "KEYTRUST_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a Paillier key pair.
    Keygen(KeygenArgs),
    /// Build a template from an event log and store it encrypted.
    Enroll(EnrollArgs),
    /// Replay an event log against the stored template.
    Auth(AuthArgs),
    /// Serve enrollment and authentication over TCP.
    Serve(ServeArgs),
    /// Run a seeded genuine and imposter scenario through every pipeline.
    Simulate(SimulateArgs),
    /// Per-keystroke latency over a grid of key sizes and bit lengths.
    Bench(BenchArgs),
    /// Communication complexity next to published baselines.
    Table1(Table1Args),
}

#[derive(Args, Clone)]
struct KeyDir {
    /// Directory holding public.json and private.json.
    #[arg(long, env = "KEYTRUST_KEYS", default_value = "keys")]
    keys: PathBuf,
}

#[derive(Args, Clone)]
struct Target {
    /// Server address; without it a local store is used in-process.
    #[arg(long, env = "KEYTRUST_ADDR")]
    addr: Option<String>,
    /// Template store directory.
    #[arg(long, env = "KEYTRUST_STORE", default_value = "store")]
    store: PathBuf,
}

#[derive(Args, Clone)]
struct Params {
    #[arg(long, env = "KEYTRUST_FRAC_BITS", default_value_t = 16)]
    frac_bits: u32,
    #[arg(long, env = "KEYTRUST_VALUE_BITS", default_value_t = 40)]
    value_bits: u32,
    #[arg(long, env = "KEYTRUST_STAT_SEC", default_value_t = 40)]
    stat_sec: u32,
    #[arg(long, env = "KEYTRUST_MAX", default_value_t = 100.0)]
    max: f64,
    #[arg(long, env = "KEYTRUST_REWARD", default_value_t = 1.0)]
    reward: f64,
    #[arg(long, env = "KEYTRUST_T_DIST", default_value_t = 1.5)]
    t_dist: f64,
    #[arg(long, env = "KEYTRUST_T_REJECT", default_value_t = 90.0)]
    t_reject: f64,
}

impl Params {
    fn fixed(&self) -> Result<FixedPointParams> {
        Ok(FixedPointParams::new(self.frac_bits, self.value_bits, self.stat_sec)?)
    }

    fn trust(&self) -> Result<TrustParams> {
        let t = TrustParams {
            max: self.max,
            reward: self.reward,
            dist_threshold: self.t_dist,
            reject_threshold: self.t_reject,
        };
        t.validate()?;
        Ok(t)
    }

    fn server_config(&self, seed: Option<u64>) -> Result<ServerConfig> {
        let mut config = ServerConfig::new(self.fixed()?, &self.trust()?)?;
        config.seed = seed;
        Ok(config)
    }
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long, env = "KEYTRUST_BITS", default_value_t = 2048)]
    bits: u64,
    #[command(flatten)]
    keys: KeyDir,
    /// Overwrite existing key files.
    #[arg(long, env = "KEYTRUST_FORCE")]
    force: bool,
    /// Derive the key from a seed (reproducible, for tests only).
    #[arg(long, env = "KEYTRUST_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct EnrollArgs {
    #[arg(long, env = "KEYTRUST_USER")]
    user: String,
    /// CSV event log with header key,down_ms,up_ms.
    #[arg(long, env = "KEYTRUST_EVENTS")]
    events: PathBuf,
    #[command(flatten)]
    keys: KeyDir,
    #[command(flatten)]
    target: Target,
    #[command(flatten)]
    params: Params,
    #[arg(long, env = "KEYTRUST_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct AuthArgs {
    #[arg(long, env = "KEYTRUST_USER")]
    user: String,
    #[arg(long, env = "KEYTRUST_EVENTS")]
    events: PathBuf,
    #[command(flatten)]
    keys: KeyDir,
    #[command(flatten)]
    target: Target,
    #[command(flatten)]
    params: Params,
    /// Decision trace CSV; written to stdout when absent.
    #[arg(long, env = "KEYTRUST_TRACE")]
    trace: Option<PathBuf>,
    #[arg(long, env = "KEYTRUST_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "KEYTRUST_ADDR", default_value = "127.0.0.1:7878")]
    addr: String,
    #[arg(long, env = "KEYTRUST_STORE", default_value = "store")]
    store: PathBuf,
    #[command(flatten)]
    params: Params,
    /// Seconds a session may stay silent before it is dropped.
    #[arg(long, env = "KEYTRUST_IDLE_TIMEOUT", default_value_t = 60)]
    idle_timeout: u64,
    #[arg(long, env = "KEYTRUST_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, env = "KEYTRUST_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long, env = "KEYTRUST_N_KEYS", default_value_t = 10)]
    n_keys: usize,
    #[arg(long, env = "KEYTRUST_ENROLL_EVENTS", default_value_t = 400)]
    enroll_events: usize,
    #[arg(long, env = "KEYTRUST_AUTH_EVENTS", default_value_t = 200)]
    auth_events: usize,
    /// Key size of the encrypted replay.
    #[arg(long, env = "KEYTRUST_KEY_BITS", default_value_t = 512)]
    key_bits: u64,
    /// Skip the encrypted replay.
    #[arg(long, env = "KEYTRUST_PLAINTEXT_ONLY")]
    plaintext_only: bool,
    /// Print every n-th trajectory step.
    #[arg(long, env = "KEYTRUST_EVERY", default_value_t = 20)]
    every: usize,
    /// Full trajectories as CSV.
    #[arg(long, env = "KEYTRUST_TRAJECTORY")]
    trajectory: Option<PathBuf>,
    #[command(flatten)]
    params: Params,
}

#[derive(Args)]
struct BenchArgs {
    /// Key sizes, comma separated.
    #[arg(long = "k", env = "KEYTRUST_BENCH_K", value_delimiter = ',', default_values_t = [512u64, 768, 1024, 1536])]
    key_bits: Vec<u64>,
    /// Compared bit lengths, comma separated.
    #[arg(long = "l", env = "KEYTRUST_BENCH_L", value_delimiter = ',', default_values_t = [4u32, 7, 10, 40])]
    value_bits: Vec<u32>,
    #[arg(long, env = "KEYTRUST_REPS", default_value_t = 10)]
    reps: usize,
    /// Keystrokes per timed repetition.
    #[arg(long, env = "KEYTRUST_BATCH", default_value_t = 1)]
    batch: usize,
    #[arg(long, env = "KEYTRUST_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long, env = "KEYTRUST_CSV")]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct Table1Args {
    /// Template size N.
    #[arg(long, env = "KEYTRUST_N", default_value_t = 10)]
    n: u32,
    #[arg(long, env = "KEYTRUST_KEY_BITS", default_value_t = 512)]
    key_bits: u64,
    #[arg(long, env = "KEYTRUST_SEED", default_value_t = 1)]
    seed: u64,
}

fn main() -> ExitCode {
    let args = match config::apply(&Cli::command(), std::env::args_os().collect()) {
        Ok(args) => args,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let cli = Cli::parse_from(args);
    let default_level = if matches!(cli.command, Cmd::Serve(_)) {
        "info"
    } else {
        "warn"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Keygen(a) => cmd_keygen(a),
        Cmd::Enroll(a) => cmd_enroll(a),
        Cmd::Auth(a) => cmd_auth(a),
        Cmd::Serve(a) => cmd_serve(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Table1(a) => cmd_table1(a),
    }
}

fn rng_for(seed: Option<u64>) -> Result<ChaCha20Rng> {
    match seed {
        Some(s) => Ok(ChaCha20Rng::seed_from_u64(s)),
        None => ChaCha20Rng::try_from_os_rng().context("reading OS entropy"),
    }
}

fn write_new(path: &Path, contents: &str, force: bool) -> Result<()> {
    let mut opts = OpenOptions::new();
    opts.write(true);
    if force {
        opts.create(true).truncate(true);
    } else {
        opts.create_new(true);
    }
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path).map_err(|e| {
        if e.kind() == io::ErrorKind::AlreadyExists {
            anyhow::anyhow!("{} exists; pass --force to overwrite", path.display())
        } else {
            anyhow::Error::new(e).context(format!("writing {}", path.display()))
        }
    })?;
    f.write_all(contents.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

fn cmd_keygen(a: KeygenArgs) -> Result<ExitCode> {
    fs::create_dir_all(&a.keys.keys)?;
    let public = a.keys.keys.join(PUBLIC_KEY_FILE);
    let private = a.keys.keys.join(PRIVATE_KEY_FILE);
    if !a.force {
        for p in [&public, &private] {
            if p.exists() {
                bail!("{} exists; pass --force to overwrite", p.display());
            }
        }
    }
    let (pk, sk) = match a.seed {
        Some(s) => keygen(a.bits, &mut ChaCha20Rng::seed_from_u64(s))?,
        None => keygen_os(a.bits)?,
    };
    write_new(&private, &serde_json::to_string_pretty(&sk.to_doc())?, a.force)?;
    write_new(&public, &serde_json::to_string_pretty(&pk.to_doc())?, a.force)?;
    println!("{}-bit key {} written to {}", pk.bits(), pk.key_id(), a.keys.keys.display());
    Ok(ExitCode::SUCCESS)
}

fn load_public(dir: &KeyDir) -> Result<PublicKey> {
    let path = dir.keys.join(PUBLIC_KEY_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let doc: PublicKeyDoc = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(PublicKey::from_doc(&doc)?)
}

fn load_private(dir: &KeyDir) -> Result<PrivateKey> {
    let path = dir.keys.join(PRIVATE_KEY_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let doc: PrivateKeyDoc = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(PrivateKey::from_doc(&doc)?)
}

fn open_target(target: &Target, params: &Params, seed: Option<u64>) -> Result<Box<dyn ServerHandle>> {
    Ok(match &target.addr {
        Some(addr) => Box::new(RemoteServer::new(addr.clone())),
        None => {
            let store = FileStore::open(&target.store)
                .with_context(|| format!("opening store {}", target.store.display()))?;
            let server = Server::new(params.server_config(seed)?, Arc::new(store), Arc::new(LogSink));
            Box::new(LocalServer::new(Arc::new(server)))
        }
    })
}

fn describe(e: ProtocolError, target: &Target) -> anyhow::Error {
    match (&e, &target.addr) {
        (ProtocolError::Transport(_), Some(addr)) => anyhow::Error::new(e).context(format!("server at {addr}")),
        _ => e.into(),
    }
}

fn read_log(path: &Path) -> Result<Vec<keytrust_core::KeyEvent>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_events(f).with_context(|| format!("reading {}", path.display()))
}

fn cmd_enroll(a: EnrollArgs) -> Result<ExitCode> {
    let events = read_log(&a.events)?;
    let pk = load_public(&a.keys)?;
    let handle = open_target(&a.target, &a.params, a.seed)?;
    let mut rng = rng_for(a.seed)?;
    let report = match enroll(handle.as_ref(), &a.user, &events, &pk, &a.params.fixed()?, &mut rng) {
        Ok(r) => r,
        Err(ProtocolError::DuplicateUser(_)) => bail!("user {:?} is already enrolled", a.user),
        Err(e) => return Err(describe(e, &a.target)),
    };
    for (key, why) in &report.excluded {
        let reason = match why {
            Exclusion::InsufficientSamples { samples } => format!("only {samples} sample(s)"),
            Exclusion::ZeroSigma => "no variation in dwell time".to_string(),
        };
        eprintln!("warning: key {key} excluded from the template: {reason}");
    }
    println!(
        "enrolled {}: {} keys, {} ciphertexts stored",
        a.user,
        report.keys.len(),
        report.stored_ciphertexts
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_auth(a: AuthArgs) -> Result<ExitCode> {
    let events = read_log(&a.events)?;
    let sk = load_private(&a.keys)?;
    let handle = open_target(&a.target, &a.params, a.seed)?;
    let mut client = match AuthClient::begin(handle.as_ref(), &a.user, sk, a.params.fixed()?, rng_for(a.seed)?) {
        Ok(c) => c,
        Err(ProtocolError::UnknownUser(_)) => {
            eprintln!("error: user {:?} is not enrolled", a.user);
            return Ok(ExitCode::from(EXIT_NOT_ENROLLED));
        }
        Err(e) => return Err(describe(e, &a.target)),
    };
    let sink: Box<dyn Write> = match &a.trace {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut trace = csv::Writer::from_writer(sink);
    trace.write_record(["event_idx", "key", "dwell_ms", "decision"])?;
    let (mut steps, mut skipped) = (0usize, 0usize);
    for (idx, e) in events.iter().enumerate() {
        if !client.is_enrolled(e.key) {
            skipped += 1;
            continue;
        }
        let decision = client.keystroke(e)?;
        steps += 1;
        trace.write_record([
            idx.to_string(),
            e.key.to_string(),
            dwell_time(e)?.to_string(),
            decision.as_str().to_string(),
        ])?;
        if decision == Decision::Rejected {
            trace.flush()?;
            eprintln!("rejected at event {idx} after {steps} scored keystrokes");
            return Ok(ExitCode::from(EXIT_REJECTED));
        }
    }
    trace.flush()?;
    eprintln!("accepted throughout: {steps} scored keystrokes, {skipped} skipped (key not enrolled)");
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(a: ServeArgs) -> Result<ExitCode> {
    let mut config = a.params.server_config(a.seed)?;
    config.idle_timeout = Some(Duration::from_secs(a.idle_timeout));
    let store = FileStore::open(&a.store).with_context(|| format!("opening store {}", a.store.display()))?;
    let listener = TcpListener::bind(&a.addr).with_context(|| format!("binding {}", a.addr))?;
    log::info!("listening on {} with store {}", listener.local_addr()?, a.store.display());
    let server = Arc::new(Server::new(config, Arc::new(store), Arc::new(LogSink)));
    server.serve_tcp(listener)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(a: SimulateArgs) -> Result<ExitCode> {
    let config = SimulateConfig {
        seed: a.seed,
        n_keys: a.n_keys,
        enroll_events: a.enroll_events,
        auth_events: a.auth_events,
        trust: a.params.trust()?,
        fixed: a.params.fixed()?,
        key_bits: (!a.plaintext_only).then_some(a.key_bits),
        trajectory_every: a.every,
    };
    let report = harness::simulate(&config)?;
    print!("{report}");
    if let Some(path) = &a.trajectory {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(["scenario", "event_idx", "key", "d_i", "C", "C_quantized", "C_encrypted", "decision"])?;
        for s in &report.scenarios {
            for (i, (r, q)) in s.real.steps.iter().zip(&s.quantized.steps).enumerate() {
                let enc = s
                    .encrypted
                    .as_ref()
                    .and_then(|e| e.get(i))
                    .map(|e| (e.c as f64 / config.fixed.scale()).to_string())
                    .unwrap_or_default();
                w.write_record([
                    s.kind.as_str().to_string(),
                    r.event_idx.to_string(),
                    r.key.to_string(),
                    r.d.to_string(),
                    r.c.to_string(),
                    (q.c.raw() as f64 / config.fixed.scale()).to_string(),
                    enc,
                    r.decision.as_str().to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    Ok(match report.traces_identical() {
        Some(false) => ExitCode::FAILURE,
        _ => ExitCode::SUCCESS,
    })
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    let config = BenchConfig {
        key_bits: a.key_bits,
        value_bits: a.value_bits,
        repetitions: a.reps,
        batch: a.batch,
        seed: a.seed,
    };
    if let Err(e) = config.validate() {
        bail!("{e}");
    }
    let report = harness::bench(&config)?;
    print!("{report}");
    if let Some(path) = &a.csv {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        report.write_csv(f)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_table1(a: Table1Args) -> Result<ExitCode> {
    let m = harness::measure_table1(a.n, a.key_bits, a.seed)?;
    print!("{m}");
    Ok(ExitCode::SUCCESS)
}
