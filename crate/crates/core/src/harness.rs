//! Seeded genuine/imposter simulation, the complexity table and the latency
//! grid.

use std::fmt;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::compare::LocalPeer;
use crate::crypto::{keygen, Ciphertext, PrivateKey, PublicKey};
use crate::keystroke::{build_template, synthesize_stream, GeneratorProfile, KeyEvent};
use crate::numerics::{decode, FixedPointParams};
#[cfg(test)]
use crate::numerics::FixedValue;
use crate::protocol::{
    encrypted_step, enroll, enroll_entries, AuthClient, LocalServer, MemorySink, ProtocolError,
    Server, ServerConfig, ServerEvent, ServerHandle, SessionTranscript,
};
use crate::store::{EncryptedEntry, MemoryStore};
use crate::transport::Connection;
use crate::trust::{
    run, run_quantized, Decision, QuantizedTemplate, QuantizedTrace, QuantizedTrustParams,
    RejectRule, RunTrace, TrustParams,
};

/// Offsets the imposter's generator seed from the genuine user's.
const IMPOSTER_SEED_SALT: u64 = 0x1f2e_3d4c_5b6a_7988;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Genuine,
    Imposter,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Genuine => "genuine",
            ScenarioKind::Imposter => "imposter",
        }
    }
}

/// Typing streams derived from one seed: the genuine user's enrollment log
/// and an authentication stream for each scenario.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    pub enrollment: Vec<KeyEvent>,
    pub genuine: Vec<KeyEvent>,
    pub imposter: Vec<KeyEvent>,
}

impl ScenarioSet {
    pub fn generate(seed: u64, n_keys: usize, enroll_events: usize, auth_events: usize) -> Self {
        let genuine = GeneratorProfile::random(n_keys, seed);
        let imposter = GeneratorProfile::random(n_keys, seed ^ IMPOSTER_SEED_SALT);
        ScenarioSet {
            enrollment: synthesize_stream(&genuine, enroll_events, 0),
            genuine: synthesize_stream(&genuine, auth_events, 1),
            imposter: synthesize_stream(&imposter, auth_events, 1),
        }
    }

    pub fn stream(&self, kind: ScenarioKind) -> &[KeyEvent] {
        match kind {
            ScenarioKind::Genuine => &self.genuine,
            ScenarioKind::Imposter => &self.imposter,
        }
    }
}

/// One encrypted step as seen through the test-only key escrow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscrowedStep {
    pub key: u32,
    pub c: i64,
    pub decision: Decision,
}

/// Replays `events` through a full client/server session and decrypts the
/// server's `C*` after every step with the user's own private key.
pub fn escrowed_run<H: ServerHandle + ?Sized>(
    handle: &H,
    sink: &MemorySink,
    user_id: &str,
    sk: &PrivateKey,
    fixed: FixedPointParams,
    events: &[KeyEvent],
    client_seed: u64,
) -> Result<Vec<EscrowedStep>, ProtocolError> {
    let mut client = AuthClient::begin(
        handle,
        user_id,
        sk.clone(),
        fixed,
        ChaCha20Rng::seed_from_u64(client_seed),
    )?;
    let session = client.session_id().to_string();
    let mut decisions = Vec::new();
    for e in events {
        if !client.is_enrolled(e.key) {
            continue;
        }
        let decision = client.keystroke(e)?;
        decisions.push((e.key, decision));
        if decision == Decision::Rejected {
            break;
        }
    }
    drop(client);
    let c_values: Vec<Ciphertext> = sink
        .events()
        .into_iter()
        .filter_map(|ev| match ev {
            ServerEvent::StepCompleted {
                session_id, c_star, ..
            } if session_id == session => Some(c_star),
            _ => None,
        })
        .collect();
    if c_values.len() != decisions.len() {
        return Err(ProtocolError::UnexpectedMessage(format!(
            "{} decisions but {} recorded steps",
            decisions.len(),
            c_values.len()
        )));
    }
    decisions
        .into_iter()
        .zip(c_values)
        .map(|((key, decision), c)| {
            let c = sk.decrypt_signed(&c)?;
            let c = i64::try_from(c).map_err(|_| {
                ProtocolError::UnexpectedMessage("trust score outside i64".into())
            })?;
            Ok(EscrowedStep { key, c, decision })
        })
        .collect()
}

/// Distance and trust drift of the quantized oracle against the real one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationCheck {
    pub compared_steps: usize,
    /// Largest `|d_q - d| / (2^-f (t + 1))`.
    pub worst_distance_ratio: f64,
    /// Largest growth of `|C_q - C|` in one step, over `2^-f (t + 1)`.
    pub worst_trust_ratio: f64,
    pub decisions_agree: bool,
}

impl QuantizationCheck {
    pub fn within_bound(&self) -> bool {
        self.worst_distance_ratio <= 1.0 && self.worst_trust_ratio <= 1.0 && self.decisions_agree
    }
}

pub fn quantization_check(
    real: &RunTrace,
    quantized: &QuantizedTrace,
    fixed: &FixedPointParams,
) -> QuantizationCheck {
    let unit = (-(fixed.frac_bits as f64)).exp2();
    let mut check = QuantizationCheck {
        compared_steps: 0,
        worst_distance_ratio: 0.0,
        worst_trust_ratio: 0.0,
        decisions_agree: real.steps.len() == quantized.steps.len(),
    };
    let mut prev_err = 0.0f64;
    for (r, q) in real.steps.iter().zip(&quantized.steps) {
        let bound = unit * (q.dwell as f64 + 1.0);
        let d_err = (decode(q.d, fixed) - r.d).abs();
        let c_err = (decode(q.c, fixed) - r.c).abs();
        check.worst_distance_ratio = check.worst_distance_ratio.max(d_err / bound);
        check.worst_trust_ratio = check.worst_trust_ratio.max((c_err - prev_err) / bound);
        check.decisions_agree &= r.decision == q.decision && r.event_idx == q.event_idx;
        check.compared_steps += 1;
        prev_err = c_err;
    }
    check
}

#[derive(Debug, Clone)]
pub struct SimulateConfig {
    pub seed: u64,
    pub n_keys: usize,
    pub enroll_events: usize,
    pub auth_events: usize,
    pub trust: TrustParams,
    pub fixed: FixedPointParams,
    /// Key size for the encrypted replay; `None` runs the oracles only.
    pub key_bits: Option<u64>,
    /// Trajectory rows printed per scenario are every `trajectory_every`-th step.
    pub trajectory_every: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            seed: 1,
            n_keys: 10,
            enroll_events: 400,
            auth_events: 200,
            trust: TrustParams::default(),
            fixed: FixedPointParams::default(),
            key_bits: Some(512),
            trajectory_every: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub kind: ScenarioKind,
    pub real: RunTrace,
    pub quantized: QuantizedTrace,
    pub encrypted: Option<Vec<EscrowedStep>>,
    pub quantization: QuantizationCheck,
}

impl ScenarioReport {
    /// Whether the encrypted replay equals the quantized oracle step for step.
    pub fn encrypted_matches(&self) -> Option<bool> {
        self.encrypted.as_ref().map(|enc| {
            enc.len() == self.quantized.steps.len()
                && enc.iter().zip(&self.quantized.steps).all(|(e, q)| {
                    e.key == q.key && e.c == q.c.raw() && e.decision == q.decision
                })
        })
    }
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub config: SimulateConfig,
    pub template_keys: usize,
    pub scenarios: Vec<ScenarioReport>,
}

impl SimulationReport {
    /// `None` when no encrypted replay was run.
    pub fn traces_identical(&self) -> Option<bool> {
        self.scenarios
            .iter()
            .map(|s| s.encrypted_matches().map(|m| m && s.quantization.decisions_agree))
            .collect::<Option<Vec<bool>>>()
            .map(|all| all.into_iter().all(|x| x))
    }
}

pub fn simulate(config: &SimulateConfig) -> Result<SimulationReport, ProtocolError> {
    let fixed = config.fixed;
    let set = ScenarioSet::generate(
        config.seed,
        config.n_keys,
        config.enroll_events,
        config.auth_events,
    );
    let template = build_template(&set.enrollment)?.template;
    if template.is_empty() {
        return Err(ProtocolError::InsufficientSamples);
    }
    let qtemplate = QuantizedTemplate::encode(&template, &fixed)?;
    let q = QuantizedTrustParams::encode(&config.trust, &fixed)?;

    let encrypted_env = match config.key_bits {
        Some(bits) => {
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
            let (pk, sk) = keygen(bits, &mut rng)?;
            let sink = Arc::new(MemorySink::new());
            let mut server_config = ServerConfig::new(fixed, &config.trust)?;
            server_config.seed = Some(config.seed);
            let server = Server::new(server_config, Arc::new(MemoryStore::new()), sink.clone());
            let handle = LocalServer::new(Arc::new(server));
            enroll(&handle, "genuine", &set.enrollment, &pk, &fixed, &mut rng)?;
            Some((handle, sink, sk))
        }
        None => None,
    };

    let mut scenarios = Vec::new();
    for (i, kind) in [ScenarioKind::Genuine, ScenarioKind::Imposter].into_iter().enumerate() {
        let events = set.stream(kind);
        let real = run(events, &template, &config.trust, RejectRule::BelowThreshold)?;
        let quantized = run_quantized(events, &qtemplate, &q, &fixed)?;
        let encrypted = match &encrypted_env {
            Some((handle, sink, sk)) => Some(escrowed_run(
                handle,
                sink,
                "genuine",
                sk,
                fixed,
                events,
                config.seed.wrapping_add(i as u64 + 1),
            )?),
            None => None,
        };
        let quantization = quantization_check(&real, &quantized, &fixed);
        scenarios.push(ScenarioReport {
            kind,
            real,
            quantized,
            encrypted,
            quantization,
        });
    }
    Ok(SimulationReport {
        config: config.clone(),
        template_keys: template.len(),
        scenarios,
    })
}

impl fmt::Display for SimulationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "simulation seed={} keys={} enroll_events={} auth_events={} f={} l={}",
            c.seed, c.n_keys, c.enroll_events, c.auth_events, c.fixed.frac_bits, c.fixed.value_bits
        )?;
        writeln!(
            f,
            "trust max={} R={} T_dist={} T_reject={}; template keys={}",
            c.trust.max, c.trust.reward, c.trust.dist_threshold, c.trust.reject_threshold, self.template_keys
        )?;
        match c.key_bits {
            Some(k) => writeln!(f, "encrypted replay: k={k}")?,
            None => writeln!(f, "encrypted replay: off")?,
        }
        for s in &self.scenarios {
            writeln!(f)?;
            let outcome = match s.real.rejected_at() {
                Some(idx) => format!("rejected at event {idx}"),
                None => "active throughout".to_string(),
            };
            writeln!(
                f,
                "[{}] steps={} skipped={} final_C={:.4} {}",
                s.kind.as_str(),
                s.real.steps.len(),
                s.real.skipped,
                s.real.final_state.c,
                outcome
            )?;
            writeln!(f, "  {:>6} {:>5} {:>10} {:>10} {:>12}  decision", "event", "key", "d", "C", "C_quantized")?;
            let every = c.trajectory_every.max(1);
            let last = s.real.steps.len().saturating_sub(1);
            for (i, (r, q)) in s.real.steps.iter().zip(&s.quantized.steps).enumerate() {
                if i % every == 0 || i == last {
                    writeln!(
                        f,
                        "  {:>6} {:>5} {:>10.4} {:>10.4} {:>12.4}  {}",
                        r.event_idx,
                        r.key,
                        r.d,
                        r.c,
                        decode(q.c, &c.fixed),
                        r.decision.as_str()
                    )?;
                }
            }
            writeln!(
                f,
                "  quantization: worst d error {:.3} and worst C drift {:.3} of 2^-f(t+1); decisions agree: {}",
                s.quantization.worst_distance_ratio,
                s.quantization.worst_trust_ratio,
                yes_no(s.quantization.decisions_agree)
            )?;
            if let Some(m) = s.encrypted_matches() {
                writeln!(f, "  encrypted replay matches quantized oracle: {}", yes_no(m))?;
            }
        }
        writeln!(f)?;
        match self.traces_identical() {
            Some(same) => writeln!(f, "traces identical: {}", yes_no(same)),
            None => writeln!(f, "traces identical: not checked (encrypted replay off)"),
        }
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Published complexity rows as `(citation, rounds, encryptions, invocations)`.
pub const TABLE1_BASELINES: [(&str, &str, &str, &str); 3] = [
    ("govindarajan:2013", "4", "N+1", "4N"),
    ("balagani:2018", "5", "2N+1", "5N"),
    ("wei:2020", "3", "3N", "0"),
];

/// Evaluates `aN+b`, `aN`, `N+b`, `N` or `b`.
pub fn eval_linear(expr: &str, n: u64) -> Option<u64> {
    expr.split('+').try_fold(0u64, |acc, term| {
        let term = term.trim();
        let value = match term.strip_suffix('N') {
            Some("") => n,
            Some(coef) => coef.parse::<u64>().ok()?.checked_mul(n)?,
            None => term.parse::<u64>().ok()?,
        };
        acc.checked_add(value)
    })
}

/// Per-keystroke transcripts of both trust branches, measured on live
/// sessions over an `n_keys` template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Measurement {
    pub n_keys: u64,
    pub reward: SessionTranscript,
    pub penalty: SessionTranscript,
}

pub fn measure_table1(n_keys: u32, key_bits: u64, seed: u64) -> Result<Table1Measurement, ProtocolError> {
    let fixed = FixedPointParams::default();
    let trust = TrustParams::default();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (pk, sk) = keygen(key_bits, &mut rng)?;
    let sink = Arc::new(MemorySink::new());
    let mut config = ServerConfig::new(fixed, &trust)?;
    config.seed = Some(seed);
    let server = Arc::new(Server::new(config, Arc::new(MemoryStore::new()), sink));
    let handle = LocalServer::new(Arc::clone(&server));
    // σ = 1 and μ = 1 for every key: a 1 ms dwell is distance 0, 100 ms is 99.
    let one = 1i64 << fixed.frac_bits;
    let entries = (0..n_keys)
        .map(|key_index| {
            Ok(EncryptedEntry {
                key_index,
                inv_sigma: pk.encrypt_i64(one, &mut rng)?,
                mu_over_sigma: pk.encrypt_i64(one, &mut rng)?,
            })
        })
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    enroll_entries(&handle, "table1", &pk, &fixed, entries)?;
    let session = |dwell: u64| -> Result<SessionTranscript, ProtocolError> {
        let mut client = AuthClient::begin(
            &handle,
            "table1",
            sk.clone(),
            fixed,
            ChaCha20Rng::seed_from_u64(seed ^ dwell),
        )?;
        client.keystroke_dwell(0, dwell)?;
        server
            .transcript(client.session_id())
            .ok_or_else(|| ProtocolError::UnexpectedMessage("missing transcript".into()))
    };
    Ok(Table1Measurement {
        n_keys: u64::from(n_keys),
        reward: session(1)?,
        penalty: session(100)?,
    })
}

fn formula_row(n: u64, rounds: &str, enc: &str, inv: &str) -> [String; 3] {
    let show = |e: &str| match eval_linear(e, n) {
        Some(v) if e.contains('N') => format!("{e} (={v})"),
        _ => e.to_string(),
    };
    [show(rounds), show(enc), show(inv)]
}

fn measured_row(n: u64, t: &SessionTranscript) -> [String; 3] {
    let enc = match t.ciphertexts_sent.checked_sub(n) {
        Some(extra) => format!("N+{extra} (={})", t.ciphertexts_sent),
        None => t.ciphertexts_sent.to_string(),
    };
    [t.rounds.to_string(), enc, t.ppcp_invocations.to_string()]
}

impl fmt::Display for Table1Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.n_keys;
        writeln!(f, "Complexity per authentication decision (N = {n})")?;
        writeln!(
            f,
            "{:<22} {:>8} {:>24} {:>26}",
            "protocol", "rounds", "transmitted encryptions", "sub-protocol invocations"
        )?;
        let mut rows: Vec<(String, [String; 3])> = TABLE1_BASELINES
            .iter()
            .map(|(cite, r, e, i)| (cite.to_string(), formula_row(n, r, e, i)))
            .collect();
        rows.push(("this implementation".into(), measured_row(n, &self.reward)));
        for (name, [r, e, i]) in rows {
            writeln!(f, "{name:<22} {r:>8} {e:>24} {i:>26}")?;
        }
        let [r, e, i] = measured_row(n, &self.penalty);
        writeln!(f, "{:<22} {r:>8} {e:>24} {i:>26}", "  (penalty branch)")?;
        let labels = |t: &SessionTranscript| {
            t.labels
                .iter()
                .map(|l| serde_json::to_string(l).unwrap_or_default().replace('"', ""))
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(f, "reward branch labels: {}", labels(&self.reward))?;
        writeln!(f, "penalty branch labels: {}", labels(&self.penalty))?;
        writeln!(
            f,
            "raw frames (reward branch): main {} messages/{} ciphertexts, comparisons {} messages/{} ciphertexts",
            self.reward.raw.main_messages,
            self.reward.raw.main_ciphertexts,
            self.reward.raw.sub_messages,
            self.reward.raw.sub_ciphertexts
        )
    }
}

/// Published per-keystroke milliseconds, `(k, [(l, ms)])`.
pub const TABLE2_PUBLISHED_MS: [(u64, [(u32, f64); 3]); 4] = [
    (512, [(4, 80.0), (7, 125.0), (10, 195.0)]),
    (768, [(4, 255.0), (7, 390.0), (10, 500.0)]),
    (1024, [(4, 540.0), (7, 750.0), (10, 1006.0)]),
    (1536, [(4, 1850.0), (7, 2503.0), (10, 3201.0)]),
];

pub fn published_ms(k: u64, l: u32) -> Option<f64> {
    TABLE2_PUBLISHED_MS
        .iter()
        .find(|(kk, _)| *kk == k)
        .and_then(|(_, row)| row.iter().find(|(ll, _)| *ll == l))
        .map(|(_, ms)| *ms)
}

pub const MIN_REPETITIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub key_bits: Vec<u64>,
    pub value_bits: Vec<u32>,
    pub repetitions: usize,
    /// Keystrokes timed back to back inside one repetition.
    pub batch: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            key_bits: vec![512, 768, 1024, 1536],
            value_bits: vec![4, 7, 10, 40],
            repetitions: 10,
            batch: 1,
            seed: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.repetitions < MIN_REPETITIONS {
            return Err(format!("repetitions must be >= {MIN_REPETITIONS}"));
        }
        if self.batch == 0 || self.key_bits.is_empty() || self.value_bits.is_empty() {
            return Err("batch, key sizes and bit lengths must be non-empty".into());
        }
        if self.value_bits.iter().any(|&l| !(3..=62).contains(&l)) {
            return Err("bit lengths must lie in 3..=62".into());
        }
        Ok(())
    }
}

/// Median and range of one timing column, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Summary {
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Summary {
            median,
            min: v.first().copied().unwrap_or(f64::NAN),
            max: v.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub key_bits: u64,
    pub value_bits: u32,
    /// Homomorphic work and comparisons with an in-process peer.
    pub crypto: Summary,
    /// Full protocol over the in-memory transport.
    pub in_process: Summary,
    /// Full protocol over loopback TCP.
    pub loopback: Summary,
    /// Per-repetition `in_process - crypto`.
    pub serialization: Summary,
    /// Per-repetition `loopback - in_process`.
    pub transport: Summary,
    pub rounds: u64,
    pub ciphertexts: u64,
    pub invocations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn cell(&self, k: u64, l: u32) -> Option<&BenchCell> {
        self.cells
            .iter()
            .find(|c| c.key_bits == k && c.value_bits == l)
    }

    pub const CSV_HEADER: [&'static str; 15] = [
        "k",
        "l",
        "reps",
        "crypto_median_ms",
        "crypto_min_ms",
        "crypto_max_ms",
        "in_process_median_ms",
        "loopback_median_ms",
        "serialization_ms",
        "transport_ms",
        "rounds",
        "ciphertexts",
        "invocations",
        "published_ms",
        "batch",
    ];

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(Self::CSV_HEADER)?;
        for c in &self.cells {
            wtr.write_record([
                c.key_bits.to_string(),
                c.value_bits.to_string(),
                self.config.repetitions.to_string(),
                format!("{:.3}", c.crypto.median),
                format!("{:.3}", c.crypto.min),
                format!("{:.3}", c.crypto.max),
                format!("{:.3}", c.in_process.median),
                format!("{:.3}", c.loopback.median),
                format!("{:.3}", c.serialization.median),
                format!("{:.3}", c.transport.median),
                c.rounds.to_string(),
                c.ciphertexts.to_string(),
                c.invocations.to_string(),
                published_ms(c.key_bits, c.value_bits)
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
                self.config.batch.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "Per-keystroke latency in ms, median of {} repetitions (min..max); published values for context only",
            self.config.repetitions
        )?;
        writeln!(
            f,
            "{:>5} {:>3} {:>26} {:>10} {:>10} {:>10} {:>10}  counts",
            "k", "l", "crypto", "serialize", "transport", "loopback", "published"
        )?;
        for c in &self.cells {
            let crypto = format!("{:.2} ({:.2}..{:.2})", c.crypto.median, c.crypto.min, c.crypto.max);
            let published = published_ms(c.key_bits, c.value_bits)
                .map(|v| format!("~{v}"))
                .unwrap_or_else(|| "-".into());
            writeln!(
                f,
                "{:>5} {:>3} {:>26} {:>10.2} {:>10.2} {:>10.2} {:>10}  rounds={} encryptions=N+{} invocations={}",
                c.key_bits,
                c.value_bits,
                crypto,
                c.serialization.median,
                c.transport.median,
                c.loopback.median,
                published,
                c.rounds,
                c.ciphertexts.saturating_sub(1),
                c.invocations
            )?;
        }
        Ok(())
    }
}

/// Integer parameters for a bench cell at bit length `l`: a one-key template
/// with `1/σ = μ/σ = 1` and a 1 ms dwell lands on the reward branch with a
/// clamp, the four-comparison path, while every operand stays inside `l` bits.
fn bench_params(l: u32) -> Result<(FixedPointParams, QuantizedTrustParams), ProtocolError> {
    let fixed = FixedPointParams::new(1, l, 40)?;
    let max = (1i64 << (l - 2)) - 1;
    let q = QuantizedTrustParams::from_raw(max, 1, 1, 1, &fixed)?;
    Ok((fixed, q))
}

fn elapsed_ms(start: Instant, batch: usize) -> f64 {
    start.elapsed().as_secs_f64() * 1e3 / batch as f64
}

pub fn bench(config: &BenchConfig) -> Result<BenchReport, ProtocolError> {
    config
        .validate()
        .map_err(|e| ProtocolError::UnexpectedMessage(format!("bench config: {e}")))?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut cells = Vec::new();
    for &k in &config.key_bits {
        let (pk, sk) = keygen(k, &mut rng)?;
        for &l in &config.value_bits {
            cells.push(bench_cell(&pk, &sk, l, config, &mut rng)?);
        }
    }
    Ok(BenchReport {
        config: config.clone(),
        cells,
    })
}

fn bench_cell(
    pk: &PublicKey,
    sk: &PrivateKey,
    l: u32,
    config: &BenchConfig,
    rng: &mut ChaCha20Rng,
) -> Result<BenchCell, ProtocolError> {
    let (fixed, q) = bench_params(l)?;
    let entry = EncryptedEntry {
        key_index: 0,
        inv_sigma: pk.encrypt_i64(1, rng)?,
        mu_over_sigma: pk.encrypt_i64(1, rng)?,
    };
    let reps = config.repetitions;
    let batch = config.batch;

    let server_config = ServerConfig {
        fixed,
        trust: q,
        idle_timeout: Some(Duration::from_secs(60)),
        seed: Some(config.seed ^ u64::from(l)),
    };
    let server = Arc::new(Server::new(
        server_config,
        Arc::new(MemoryStore::new()),
        Arc::new(crate::protocol::NullSink),
    ));
    let local = LocalServer::new(Arc::clone(&server));
    enroll_entries(&local, "bench", pk, &fixed, vec![entry.clone()])?;
    let tcp = OneShotTcp::start(Arc::clone(&server))?;
    let open = |handle: &dyn ServerHandle| {
        let mut client = AuthClient::begin(
            handle,
            "bench",
            sk.clone(),
            fixed,
            ChaCha20Rng::seed_from_u64(config.seed),
        )?;
        client.keystroke_dwell(0, 1)?;
        Ok::<_, ProtocolError>(client)
    };
    let mut local_client = open(&local)?;
    let mut tcp_client = open(&tcp)?;
    let transcript = server
        .transcript(local_client.session_id())
        .ok_or_else(|| ProtocolError::UnexpectedMessage("missing transcript".into()))?;

    let mut client_rng = ChaCha20Rng::seed_from_u64(config.seed ^ u64::from(l));
    let mut c_star = pk.encrypt_i64(q.max.raw(), rng)?;
    let mut crypto = Vec::with_capacity(reps);
    let mut in_process = Vec::with_capacity(reps);
    let mut loopback = Vec::with_capacity(reps);
    // The three paths alternate within each repetition so that drift in
    // machine load hits them alike.
    for _ in 0..reps {
        let start = Instant::now();
        for _ in 0..batch {
            let scaled = pk.scalar_mul(&entry.inv_sigma, &BigInt::from(1))?;
            let scaled = pk.rerandomize(&scaled, &mut client_rng)?;
            let mut peer = LocalPeer {
                sk,
                params: fixed,
                rng: &mut client_rng,
            };
            encrypted_step(pk, fixed, &q, &mut c_star, &entry, &scaled, &mut peer, rng, |_| {})?;
        }
        crypto.push(elapsed_ms(start, batch));

        let start = Instant::now();
        for _ in 0..batch {
            local_client.keystroke_dwell(0, 1)?;
        }
        in_process.push(elapsed_ms(start, batch));

        let start = Instant::now();
        for _ in 0..batch {
            tcp_client.keystroke_dwell(0, 1)?;
        }
        loopback.push(elapsed_ms(start, batch));
    }
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };

    Ok(BenchCell {
        key_bits: pk.bits(),
        value_bits: l,
        crypto: Summary::of(&crypto),
        in_process: Summary::of(&in_process),
        loopback: Summary::of(&loopback),
        serialization: Summary::of(&diff(&in_process, &crypto)),
        transport: Summary::of(&diff(&loopback, &in_process)),
        rounds: transcript.rounds,
        ciphertexts: transcript.ciphertexts_sent,
        invocations: transcript.ppcp_invocations,
    })
}

/// A loopback listener that serves exactly one connection.
struct OneShotTcp {
    addr: std::net::SocketAddr,
}

impl OneShotTcp {
    fn start(server: Arc<Server>) -> Result<Self, ProtocolError> {
        let listener = TcpListener::bind("127.0.0.1:0").map_err(crate::transport::TransportError::from)?;
        let addr = listener.local_addr().map_err(crate::transport::TransportError::from)?;
        thread::spawn(move || {
            if let Ok((stream, _)) = listener.accept() {
                let _ = stream.set_nodelay(true);
                let _ = server.serve_connection(Connection::boxed(stream));
            }
        });
        Ok(OneShotTcp { addr })
    }
}

impl ServerHandle for OneShotTcp {
    fn connect(&self) -> Result<Connection, crate::transport::TransportError> {
        let stream = TcpStream::connect(self.addr)?;
        stream.set_nodelay(true)?;
        Ok(Connection::boxed(stream))
    }
}
