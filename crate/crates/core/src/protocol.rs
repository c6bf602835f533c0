//! Enrollment and continuous authentication over an encrypted template.
//!
//! The server holds the user's public key, `E(1/σ_i)` and `E(μ_i/σ_i)` per
//! key, and the encrypted trust score `C*`. Per keystroke the client sends
//! `E(t·(1/σ_i))`, and the server runs four comparisons against the client:
//!
//! 1. `abs_branch`: `E(t/σ) > E(μ/σ)` picks the sign, giving `E(d) ≥ 0`;
//! 2. `dist_vs_T`: `E(d) > T_dist` selects penalty or reward;
//! 3. `reward_clamp` (reward branch only): `C* + R > max` clamps to `max`;
//! 4. `reject_check`: the session survives only while `C* > T_reject`.
//!
//! The server side owns no private key; every plaintext it ever holds is a
//! comparison outcome, a key index, a counter or session metadata.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use num_bigint::BigInt;
use rand::{CryptoRng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compare::{
    client_bits, client_reveal, client_zero_test, compare_gt, BitsMessage, CompareError,
    CompareHooks, ComparePeer, CompareRhs, CompareTraffic,
};
use crate::crypto::{Ciphertext, CryptoError, PrivateKey, PublicKey};
use crate::keystroke::{
    build_template, dwell_time, Exclusion, KeyEvent, KeystrokeError, MAX_DWELL_MS,
};
use crate::numerics::{encode, FixedPointParams, NumericsError};
use crate::store::{
    validate_user_id, EncryptedEntry, EncryptedTemplate, StoreError, TemplateRepository,
};
use crate::transport::{
    memory_pipe, Body, Connection, Envelope, ErrorCode, InvSigmaEntry, TransportError,
};
use crate::trust::{Decision, QuantizedTrustParams, TrustError, TrustParams};

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("user {0:?} is not enrolled")]
    UnknownUser(String),
    #[error("user {0:?} is already enrolled")]
    DuplicateUser(String),
    #[error("invalid user id {0:?}")]
    InvalidUserId(String),
    #[error("no key has enough distinct samples to enroll")]
    InsufficientSamples,
    #[error("invalid keystroke: {0}")]
    InvalidEvent(String),
    #[error("key index {0} is not enrolled")]
    UnknownKeyIndex(u32),
    #[error("session has been rejected")]
    SessionRejected,
    #[error("fixed-point parameters differ between client and server")]
    ParamsMismatch,
    #[error("server error {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("unexpected message: {0}")]
    UnexpectedMessage(String),
    #[error("entropy source failure: {0}")]
    Entropy(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Compare(#[from] CompareError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Keystroke(#[from] KeystrokeError),
    #[error(transparent)]
    Trust(#[from] TrustError),
}

impl ProtocolError {
    fn from_remote(code: ErrorCode, message: String, key_index: Option<u32>) -> Self {
        match (code, key_index) {
            (ErrorCode::UnknownUser, _) => ProtocolError::UnknownUser(message),
            (ErrorCode::DuplicateUser, _) => ProtocolError::DuplicateUser(message),
            (ErrorCode::InvalidUserId, _) => ProtocolError::InvalidUserId(message),
            (ErrorCode::SessionRejected, _) => ProtocolError::SessionRejected,
            (ErrorCode::ParamsMismatch, _) => ProtocolError::ParamsMismatch,
            (ErrorCode::UnknownKeyIndex, Some(k)) => ProtocolError::UnknownKeyIndex(k),
            (code, _) => ProtocolError::Remote { code, message },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpcpLabel {
    AbsBranch,
    DistVsT,
    RewardClamp,
    RejectCheck,
}

/// Every frame exchanged, split into main-protocol and comparison traffic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCounters {
    pub main_messages: u64,
    pub main_ciphertexts: u64,
    pub sub_messages: u64,
    pub sub_ciphertexts: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeystrokeTally {
    pub key_index: u32,
    pub labels: Vec<PpcpLabel>,
}

/// Communication accounting for one authentication session.
///
/// `rounds` and `ciphertexts_sent` use the complexity-table convention:
/// template delivery is one round carrying `N` encryptions, and each
/// comparison invocation is one round carrying its one encrypted operand.
/// The frames inside the comparisons are counted only in `raw`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub rounds: u64,
    pub ciphertexts_sent: u64,
    pub ppcp_invocations: u64,
    pub labels: BTreeSet<PpcpLabel>,
    pub raw: RawCounters,
    pub keystrokes: Vec<KeystrokeTally>,
}

impl SessionTranscript {
    fn begin(template_size: u64) -> Self {
        SessionTranscript {
            rounds: 1,
            ciphertexts_sent: template_size,
            raw: RawCounters {
                main_messages: 2,
                main_ciphertexts: template_size,
                ..RawCounters::default()
            },
            ..SessionTranscript::default()
        }
    }

    fn record_keystroke(&mut self, key_index: u32) {
        self.raw.main_messages += 1;
        self.raw.main_ciphertexts += 1;
        self.keystrokes.push(KeystrokeTally {
            key_index,
            labels: Vec::new(),
        });
    }

    fn record_ppcp(&mut self, label: PpcpLabel, value_bits: u32) {
        let traffic = CompareTraffic::for_bits(value_bits);
        self.rounds += 1;
        self.ciphertexts_sent += 1;
        self.ppcp_invocations += 1;
        self.labels.insert(label);
        self.raw.sub_messages += traffic.server_to_client + traffic.client_to_server;
        self.raw.sub_ciphertexts += traffic.ciphertexts;
        if let Some(last) = self.keystrokes.last_mut() {
            last.labels.push(label);
        }
    }

    fn record_decision(&mut self) {
        self.raw.main_messages += 1;
    }
}

/// Comparison outcomes of one keystroke, the only plaintexts the server
/// derives from encrypted data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub abs_branch: bool,
    pub penalty: bool,
    pub reward_clamp: Option<bool>,
    pub accepted: bool,
}

/// Everything the server records; the privacy audit enumerates these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ServerEvent {
    Enrolled {
        user_id: String,
        session_id: String,
        key_indices: Vec<u32>,
    },
    SessionStarted {
        user_id: String,
        session_id: String,
        template_size: u64,
    },
    StepCompleted {
        user_id: String,
        session_id: String,
        seq: u64,
        key_index: u32,
        outcome: StepOutcome,
        c_star: Ciphertext,
        transcript: SessionTranscript,
    },
    KeystrokeSkipped {
        user_id: String,
        session_id: String,
        key_index: u32,
    },
    SessionEnded {
        user_id: String,
        session_id: String,
        reason: SessionEndReason,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionEndReason {
    Closed,
    IdleTimeout,
    ProtocolFailure,
}

pub trait EventSink: Send + Sync {
    fn record(&self, event: &ServerEvent);
}

#[derive(Debug, Default)]
pub struct NullSink;

impl EventSink for NullSink {
    fn record(&self, _: &ServerEvent) {}
}

/// Keeps every event in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    events: Mutex<Vec<ServerEvent>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<ServerEvent> {
        self.events.lock().expect("sink lock poisoned").clone()
    }
}

impl EventSink for MemorySink {
    fn record(&self, event: &ServerEvent) {
        self.events
            .lock()
            .expect("sink lock poisoned")
            .push(event.clone());
    }
}

/// Writes each event as one JSON line at info level.
#[derive(Debug, Default)]
pub struct LogSink;

impl EventSink for LogSink {
    fn record(&self, event: &ServerEvent) {
        match serde_json::to_string(event) {
            Ok(line) => log::info!(target: "keytrust::server", "{line}"),
            Err(e) => log::warn!(target: "keytrust::server", "unserializable event: {e}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub fixed: FixedPointParams,
    pub trust: QuantizedTrustParams,
    pub idle_timeout: Option<Duration>,
    /// Seeds per-session randomness; `None` draws from the OS.
    pub seed: Option<u64>,
}

impl ServerConfig {
    pub fn new(fixed: FixedPointParams, trust: &TrustParams) -> Result<Self, ProtocolError> {
        fixed.validate()?;
        Ok(ServerConfig {
            fixed,
            trust: QuantizedTrustParams::encode(trust, &fixed)?,
            idle_timeout: Some(DEFAULT_IDLE_TIMEOUT),
            seed: None,
        })
    }
}

/// Frames plus envelope bookkeeping for one side of a connection.
struct Endpoint {
    conn: Connection,
    user_id: String,
    session_id: String,
    send_seq: u64,
    last_recv: Option<u64>,
}

impl Endpoint {
    fn new(conn: Connection, user_id: &str) -> Self {
        Endpoint {
            conn,
            user_id: user_id.to_string(),
            session_id: String::new(),
            send_seq: 0,
            last_recv: None,
        }
    }

    fn send(&mut self, body: Body) -> Result<(), ProtocolError> {
        self.send_seq += 1;
        let env = Envelope {
            user_id: self.user_id.clone(),
            session_id: self.session_id.clone(),
            seq: self.send_seq,
            body,
        };
        self.conn.send(&env)?;
        Ok(())
    }

    fn send_error(&mut self, code: ErrorCode, message: impl Into<String>) -> Result<(), ProtocolError> {
        self.send(Body::Error {
            code,
            message: message.into(),
        })
    }

    fn recv(&mut self) -> Result<Envelope, ProtocolError> {
        let env: Envelope = self.conn.recv()?;
        if self.last_recv.is_some_and(|last| env.seq <= last) {
            return Err(ProtocolError::UnexpectedMessage(format!(
                "sequence number {} does not advance",
                env.seq
            )));
        }
        self.last_recv = Some(env.seq);
        Ok(env)
    }
}

/// The server's half of the comparisons, carried over the session's frames.
struct WirePeer<'a> {
    ep: &'a mut Endpoint,
}

impl WirePeer<'_> {
    fn exchange(&mut self, body: Body) -> Result<Body, CompareError> {
        self.ep
            .send(body)
            .map_err(|e| CompareError::Peer(e.to_string()))?;
        let reply = self
            .ep
            .recv()
            .map_err(|e| CompareError::Peer(e.to_string()))?;
        match reply.body {
            Body::Error { code, message } => {
                Err(CompareError::Peer(format!("{code:?}: {message}")))
            }
            body => Ok(body),
        }
    }
}

impl ComparePeer for WirePeer<'_> {
    fn bits(&mut self, m1: &Ciphertext) -> Result<BitsMessage, CompareError> {
        match self.exchange(Body::PpcpM1 {
            ciphertext: m1.clone(),
        })? {
            Body::PpcpM2 { bits, high } => Ok(BitsMessage { bits, high }),
            other => Err(CompareError::MalformedMessage(format!(
                "expected PPCP_M2, got {}",
                other.type_name()
            ))),
        }
    }

    fn zero_test(&mut self, masked: &[Ciphertext]) -> Result<Ciphertext, CompareError> {
        match self.exchange(Body::PpcpM3 {
            terms: masked.to_vec(),
        })? {
            Body::PpcpM4 { ciphertext } => Ok(ciphertext),
            other => Err(CompareError::MalformedMessage(format!(
                "expected PPCP_M4, got {}",
                other.type_name()
            ))),
        }
    }

    fn reveal(&mut self, m5: &Ciphertext) -> Result<i64, CompareError> {
        match self.exchange(Body::PpcpM5 {
            ciphertext: m5.clone(),
        })? {
            Body::PpcpReveal { value } => Ok(value),
            other => Err(CompareError::MalformedMessage(format!(
                "expected PPCP_REVEAL, got {}",
                other.type_name()
            ))),
        }
    }
}

/// Server-side state of one authentication session.
struct ServerSession {
    user_id: String,
    session_id: String,
    pk: PublicKey,
    template: BTreeMap<u32, EncryptedEntry>,
    c_star: Ciphertext,
    decision: Decision,
    transcript: SessionTranscript,
    rng: ChaCha20Rng,
}

pub struct Server {
    config: ServerConfig,
    store: Arc<dyn TemplateRepository>,
    sink: Arc<dyn EventSink>,
    next_session: AtomicU64,
    transcripts: Mutex<HashMap<String, SessionTranscript>>,
}

impl Server {
    pub fn new(
        config: ServerConfig,
        store: Arc<dyn TemplateRepository>,
        sink: Arc<dyn EventSink>,
    ) -> Self {
        Server {
            config,
            store,
            sink,
            next_session: AtomicU64::new(1),
            transcripts: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    /// Latest transcript of a session, kept after the session ends.
    pub fn transcript(&self, session_id: &str) -> Option<SessionTranscript> {
        self.transcripts
            .lock()
            .expect("transcript lock poisoned")
            .get(session_id)
            .cloned()
    }

    fn session_rng(&self, n: u64) -> Result<ChaCha20Rng, ProtocolError> {
        match self.config.seed {
            Some(seed) => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                rng.set_stream(n);
                Ok(rng)
            }
            None => ChaCha20Rng::try_from_os_rng().map_err(|e| ProtocolError::Entropy(e.to_string())),
        }
    }

    /// Handles one connection until the peer closes it, the idle timeout
    /// fires, or the peer breaks the protocol.
    pub fn serve_connection(&self, mut conn: Connection) -> Result<(), ProtocolError> {
        conn.set_idle_timeout(self.config.idle_timeout)?;
        let mut ep = Endpoint::new(conn, "");
        let mut session: Option<ServerSession> = None;
        let result = loop {
            let env = match ep.recv() {
                Ok(env) => env,
                Err(ProtocolError::Transport(TransportError::ConnectionClosed)) => {
                    break Ok(SessionEndReason::Closed)
                }
                Err(ProtocolError::Transport(TransportError::Timeout)) => {
                    break Ok(SessionEndReason::IdleTimeout)
                }
                Err(ProtocolError::Transport(TransportError::MalformedPayload(m))) => {
                    ep.send_error(ErrorCode::InvalidMessage, m)?;
                    continue;
                }
                Err(e) => break Err(e),
            };
            let outcome = match env.body {
                Body::Enroll {
                    public_key,
                    params,
                    entries,
                } => self.handle_enroll(&mut ep, &env.user_id, public_key, params, entries),
                Body::AuthBegin => match self.handle_begin(&mut ep, &env.user_id) {
                    Ok(s) => {
                        if let Some(old) = session.replace(s) {
                            self.end_session(&old, SessionEndReason::Closed);
                        }
                        Ok(())
                    }
                    Err(e) => Err(e),
                },
                Body::Keystroke {
                    key_index,
                    ciphertext,
                } => match session.as_mut() {
                    Some(s) => self.handle_keystroke(&mut ep, s, env.seq, key_index, ciphertext),
                    None => ep.send_error(ErrorCode::InvalidMessage, "no authentication session"),
                },
                other => ep.send_error(
                    ErrorCode::InvalidMessage,
                    format!("unexpected {}", other.type_name()),
                ),
            };
            if let Err(e) = outcome {
                break Err(e);
            }
        };
        if let Some(s) = &session {
            let reason = match &result {
                Ok(reason) => *reason,
                Err(_) => SessionEndReason::ProtocolFailure,
            };
            self.end_session(s, reason);
        }
        result.map(|_| ())
    }

    fn end_session(&self, s: &ServerSession, reason: SessionEndReason) {
        self.sink.record(&ServerEvent::SessionEnded {
            user_id: s.user_id.clone(),
            session_id: s.session_id.clone(),
            reason,
        });
    }

    fn handle_enroll(
        &self,
        ep: &mut Endpoint,
        user_id: &str,
        public_key: crate::crypto::PublicKeyDoc,
        params: FixedPointParams,
        entries: Vec<EncryptedEntry>,
    ) -> Result<(), ProtocolError> {
        ep.user_id = user_id.to_string();
        ep.session_id = format!("e{}", self.next_session.fetch_add(1, Ordering::Relaxed));
        if let Err(e) = validate_user_id(user_id) {
            return ep.send_error(ErrorCode::InvalidUserId, e.to_string());
        }
        if params != self.config.fixed {
            return ep.send_error(ErrorCode::ParamsMismatch, "fixed-point parameters differ");
        }
        let pk = match PublicKey::from_doc(&public_key) {
            Ok(pk) => pk,
            Err(e) => return ep.send_error(ErrorCode::InvalidMessage, e.to_string()),
        };
        if let Err(e) = crate::compare::check_params(&pk, &self.config.fixed) {
            return ep.send_error(ErrorCode::ParamsMismatch, e.to_string());
        }
        if entries.is_empty() {
            return ep.send_error(ErrorCode::InvalidMessage, "empty template");
        }
        let template = EncryptedTemplate::new(user_id, &pk, entries);
        if let Err(e) = template.check_against(&pk) {
            return ep.send_error(ErrorCode::InvalidMessage, e.to_string());
        }
        match self.store.put(&template) {
            Ok(()) => {}
            Err(StoreError::AlreadyExists(_)) => {
                return ep.send_error(ErrorCode::DuplicateUser, user_id)
            }
            Err(StoreError::InvalidUserId(_)) => {
                return ep.send_error(ErrorCode::InvalidUserId, user_id)
            }
            Err(e) => return ep.send_error(ErrorCode::Internal, e.to_string()),
        }
        self.sink.record(&ServerEvent::Enrolled {
            user_id: user_id.to_string(),
            session_id: ep.session_id.clone(),
            key_indices: template.entries.iter().map(|e| e.key_index).collect(),
        });
        ep.send(Body::EnrollAck {
            stored_ciphertexts: template.ciphertext_count() as u64,
        })
    }

    fn handle_begin(&self, ep: &mut Endpoint, user_id: &str) -> Result<ServerSession, ProtocolError> {
        ep.user_id = user_id.to_string();
        let n = self.next_session.fetch_add(1, Ordering::Relaxed);
        ep.session_id = format!("s{n}");
        let template = match self.store.get(user_id) {
            Ok(t) => t,
            Err(StoreError::NotFound(_)) => {
                ep.send_error(ErrorCode::UnknownUser, user_id)?;
                return Err(ProtocolError::UnknownUser(user_id.to_string()));
            }
            Err(StoreError::InvalidUserId(_)) => {
                ep.send_error(ErrorCode::InvalidUserId, user_id)?;
                return Err(ProtocolError::InvalidUserId(user_id.to_string()));
            }
            Err(e) => {
                ep.send_error(ErrorCode::Internal, e.to_string())?;
                return Err(e.into());
            }
        };
        let pk = template.public_key()?;
        let mut rng = self.session_rng(n)?;
        let c_star = pk.encrypt_i64(self.config.trust.max.raw(), &mut rng)?;
        let n_keys = template.entries.len() as u64;
        let session = ServerSession {
            user_id: user_id.to_string(),
            session_id: ep.session_id.clone(),
            pk,
            template: template
                .entries
                .iter()
                .map(|e| (e.key_index, e.clone()))
                .collect(),
            c_star,
            decision: Decision::Active,
            transcript: SessionTranscript::begin(n_keys),
            rng,
        };
        self.save_transcript(&session);
        ep.send(Body::TemplatePart {
            params: self.config.fixed,
            part: 0,
            parts: 1,
            entries: template
                .entries
                .into_iter()
                .map(|e| InvSigmaEntry {
                    key_index: e.key_index,
                    inv_sigma: e.inv_sigma,
                })
                .collect(),
        })?;
        self.sink.record(&ServerEvent::SessionStarted {
            user_id: session.user_id.clone(),
            session_id: session.session_id.clone(),
            template_size: n_keys,
        });
        Ok(session)
    }

    fn save_transcript(&self, s: &ServerSession) {
        self.transcripts
            .lock()
            .expect("transcript lock poisoned")
            .insert(s.session_id.clone(), s.transcript.clone());
    }

    fn handle_keystroke(
        &self,
        ep: &mut Endpoint,
        s: &mut ServerSession,
        seq: u64,
        key_index: u32,
        scaled: Ciphertext,
    ) -> Result<(), ProtocolError> {
        if s.decision == Decision::Rejected {
            return ep.send_error(ErrorCode::SessionRejected, "session rejected");
        }
        let Some(entry) = s.template.get(&key_index).cloned() else {
            self.sink.record(&ServerEvent::KeystrokeSkipped {
                user_id: s.user_id.clone(),
                session_id: s.session_id.clone(),
                key_index,
            });
            return ep.send_error(ErrorCode::UnknownKeyIndex, format!("{key_index}"));
        };
        if let Err(e) = s.pk.check(&scaled) {
            return ep.send_error(ErrorCode::InvalidMessage, e.to_string());
        }
        s.transcript.record_keystroke(key_index);
        let value_bits = self.config.fixed.value_bits;
        let transcript = &mut s.transcript;
        let outcome = encrypted_step(
            &s.pk,
            self.config.fixed,
            &self.config.trust,
            &mut s.c_star,
            &entry,
            &scaled,
            &mut WirePeer { ep: &mut *ep },
            &mut s.rng,
            |label| transcript.record_ppcp(label, value_bits),
        )?;
        if !outcome.accepted {
            s.decision = Decision::Rejected;
        }
        s.transcript.record_decision();
        self.save_transcript(s);
        self.sink.record(&ServerEvent::StepCompleted {
            user_id: s.user_id.clone(),
            session_id: s.session_id.clone(),
            seq,
            key_index,
            outcome,
            c_star: s.c_star.clone(),
            transcript: s.transcript.clone(),
        });
        ep.send(Body::Decision {
            key_index,
            accepted: outcome.accepted,
        })
    }

    /// Accepts connections forever, one thread per connection.
    pub fn serve_tcp(self: Arc<Self>, listener: TcpListener) -> std::io::Result<()> {
        for stream in listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let _ = stream.set_nodelay(true);
            let server = Arc::clone(&self);
            thread::spawn(move || {
                let peer = stream
                    .peer_addr()
                    .map(|a| a.to_string())
                    .unwrap_or_default();
                if let Err(e) = server.serve_connection(Connection::boxed(stream)) {
                    log::warn!("connection {peer} ended with error: {e}");
                }
            });
        }
        Ok(())
    }
}

/// One keystroke of the encrypted trust update. `scaled` is `E(t·(1/σ))`
/// for the key of `entry`; `c_star` is updated in place. `on_compare` is
/// called before each comparison is started.
#[allow(clippy::too_many_arguments)]
pub fn encrypted_step<P, R>(
    pk: &PublicKey,
    fixed: FixedPointParams,
    q: &QuantizedTrustParams,
    c_star: &mut Ciphertext,
    entry: &EncryptedEntry,
    scaled: &Ciphertext,
    peer: &mut P,
    rng: &mut R,
    mut on_compare: impl FnMut(PpcpLabel),
) -> Result<StepOutcome, CompareError>
where
    P: ComparePeer + ?Sized,
    R: CryptoRng + ?Sized,
{
    let mut gt = |label, x: &Ciphertext, rhs: CompareRhs, rng: &mut R| {
        on_compare(label);
        compare_gt(pk, fixed, x, &rhs, CompareHooks::default(), peer, rng)
    };

    let abs_branch = gt(
        PpcpLabel::AbsBranch,
        scaled,
        CompareRhs::Encrypted(entry.mu_over_sigma.clone()),
        rng,
    )?;
    let d = if abs_branch {
        pk.sub(scaled, &entry.mu_over_sigma)?
    } else {
        pk.sub(&entry.mu_over_sigma, scaled)?
    };

    let penalty = gt(
        PpcpLabel::DistVsT,
        &d,
        CompareRhs::Plain(q.dist_threshold.raw()),
        rng,
    )?;
    let mut reward_clamp = None;
    if penalty {
        let t_dist = pk.encrypt_i64(q.dist_threshold.raw(), rng)?;
        *c_star = pk.add(&pk.sub(c_star, &d)?, &t_dist)?;
    } else {
        let reward = pk.encrypt_i64(q.reward.raw(), rng)?;
        let raised = pk.add(c_star, &reward)?;
        let over = gt(
            PpcpLabel::RewardClamp,
            &raised,
            CompareRhs::Plain(q.max.raw()),
            rng,
        )?;
        reward_clamp = Some(over);
        *c_star = if over {
            pk.encrypt_i64(q.max.raw(), rng)?
        } else {
            raised
        };
    }

    let accepted = gt(
        PpcpLabel::RejectCheck,
        c_star,
        CompareRhs::Plain(q.reject_threshold.raw()),
        rng,
    )?;
    Ok(StepOutcome {
        abs_branch,
        penalty,
        reward_clamp,
        accepted,
    })
}

/// Something a client can open protocol connections to.
pub trait ServerHandle {
    fn connect(&self) -> Result<Connection, TransportError>;
}

/// Runs each connection on a server thread over an in-process pipe.
#[derive(Clone)]
pub struct LocalServer {
    server: Arc<Server>,
}

impl LocalServer {
    pub fn new(server: Arc<Server>) -> Self {
        LocalServer { server }
    }

    pub fn server(&self) -> &Arc<Server> {
        &self.server
    }
}

impl ServerHandle for LocalServer {
    fn connect(&self) -> Result<Connection, TransportError> {
        let (client, server_end) = memory_pipe();
        let server = Arc::clone(&self.server);
        thread::spawn(move || {
            if let Err(e) = server.serve_connection(Connection::boxed(server_end)) {
                log::debug!("in-process connection ended with error: {e}");
            }
        });
        Ok(Connection::boxed(client))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteServer {
    addr: String,
    timeout: Option<Duration>,
}

impl RemoteServer {
    pub fn new(addr: impl Into<String>) -> Self {
        RemoteServer {
            addr: addr.into(),
            timeout: Some(DEFAULT_IDLE_TIMEOUT),
        }
    }
}

impl ServerHandle for RemoteServer {
    fn connect(&self) -> Result<Connection, TransportError> {
        let mut last = None;
        for addr in self.addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&addr, Duration::from_secs(5)) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    stream.set_read_timeout(self.timeout)?;
                    return Ok(Connection::boxed(stream));
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last
            .unwrap_or_else(|| std::io::Error::other(format!("{} resolves to nothing", self.addr)))
            .into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrollReport {
    pub stored_ciphertexts: u64,
    pub keys: Vec<u32>,
    pub excluded: Vec<(u32, Exclusion)>,
}

/// Builds the template from enrollment events, encrypts `1/σ` and `μ/σ` per
/// key and hands them to the server. Nothing is retained client-side.
pub fn enroll<H, R>(
    handle: &H,
    user_id: &str,
    events: &[KeyEvent],
    pk: &PublicKey,
    fixed: &FixedPointParams,
    rng: &mut R,
) -> Result<EnrollReport, ProtocolError>
where
    H: ServerHandle + ?Sized,
    R: CryptoRng + ?Sized,
{
    validate_user_id(user_id).map_err(|_| ProtocolError::InvalidUserId(user_id.to_string()))?;
    let build = build_template(events)?;
    if build.template.is_empty() {
        return Err(ProtocolError::InsufficientSamples);
    }
    // Every keystroke operand t·(1/σ) must stay inside the compared range.
    let bound = fixed.magnitude_bound() as i128;
    let mut entries = Vec::with_capacity(build.template.len());
    for (&key, stats) in &build.template.keys {
        let inv = encode(1.0 / stats.stddev, fixed)?;
        let mos = encode(stats.mean / stats.stddev, fixed)?;
        if i128::from(MAX_DWELL_MS) * i128::from(inv.raw()) >= bound {
            return Err(NumericsError::RangeOverflow(format!(
                "key {key}: {MAX_DWELL_MS} ms dwell overflows {} value bits",
                fixed.value_bits
            ))
            .into());
        }
        entries.push(EncryptedEntry {
            key_index: key,
            inv_sigma: pk.encrypt_i64(inv.raw(), rng)?,
            mu_over_sigma: pk.encrypt_i64(mos.raw(), rng)?,
        });
    }
    let keys = entries.iter().map(|e| e.key_index).collect();
    let stored_ciphertexts = enroll_entries(handle, user_id, pk, fixed, entries)?;
    Ok(EnrollReport {
        stored_ciphertexts,
        keys,
        excluded: build.excluded,
    })
}

/// Sends already-encrypted template entries.
pub fn enroll_entries<H: ServerHandle + ?Sized>(
    handle: &H,
    user_id: &str,
    pk: &PublicKey,
    fixed: &FixedPointParams,
    entries: Vec<EncryptedEntry>,
) -> Result<u64, ProtocolError> {
    let mut ep = Endpoint::new(handle.connect()?, user_id);
    ep.send(Body::Enroll {
        public_key: pk.to_doc(),
        params: *fixed,
        entries,
    })?;
    match ep.recv()?.body {
        Body::EnrollAck { stored_ciphertexts } => Ok(stored_ciphertexts),
        Body::Error { code, message } => Err(ProtocolError::from_remote(code, message, None)),
        other => Err(ProtocolError::UnexpectedMessage(other.type_name().into())),
    }
}

/// Client side of an authentication session.
pub struct AuthClient<R> {
    ep: Endpoint,
    sk: PrivateKey,
    fixed: FixedPointParams,
    rng: R,
    inv_sigma: BTreeMap<u32, Ciphertext>,
}

impl<R: CryptoRng> AuthClient<R> {
    /// Opens a session and fetches `E(1/σ_i)` for every enrolled key.
    pub fn begin<H: ServerHandle + ?Sized>(
        handle: &H,
        user_id: &str,
        sk: PrivateKey,
        fixed: FixedPointParams,
        rng: R,
    ) -> Result<Self, ProtocolError> {
        let mut ep = Endpoint::new(handle.connect()?, user_id);
        ep.send(Body::AuthBegin)?;
        let reply = ep.recv()?;
        let entries = match reply.body {
            Body::TemplatePart {
                params, entries, ..
            } => {
                if params != fixed {
                    return Err(ProtocolError::ParamsMismatch);
                }
                entries
            }
            Body::Error { code, message } => {
                return Err(ProtocolError::from_remote(code, message, None))
            }
            other => return Err(ProtocolError::UnexpectedMessage(other.type_name().into())),
        };
        ep.session_id = reply.session_id;
        let pk = sk.public_key();
        let mut inv_sigma = BTreeMap::new();
        for e in entries {
            pk.check(&e.inv_sigma)?;
            inv_sigma.insert(e.key_index, e.inv_sigma);
        }
        Ok(AuthClient {
            ep,
            sk,
            fixed,
            rng,
            inv_sigma,
        })
    }

    pub fn session_id(&self) -> &str {
        &self.ep.session_id
    }

    pub fn template_size(&self) -> usize {
        self.inv_sigma.len()
    }

    pub fn is_enrolled(&self, key_index: u32) -> bool {
        self.inv_sigma.contains_key(&key_index)
    }

    pub fn keystroke(&mut self, event: &KeyEvent) -> Result<Decision, ProtocolError> {
        let dwell = dwell_time(event).map_err(|e| ProtocolError::InvalidEvent(e.to_string()))?;
        self.keystroke_dwell(event.key, dwell)
    }

    /// Sends `E(t·(1/σ_i))` and answers the server's comparisons until the
    /// decision arrives.
    pub fn keystroke_dwell(&mut self, key_index: u32, dwell_ms: u64) -> Result<Decision, ProtocolError> {
        if dwell_ms == 0 || dwell_ms > MAX_DWELL_MS {
            return Err(ProtocolError::InvalidEvent(format!(
                "dwell {dwell_ms} ms outside 1..={MAX_DWELL_MS}"
            )));
        }
        let inv = self
            .inv_sigma
            .get(&key_index)
            .ok_or(ProtocolError::UnknownKeyIndex(key_index))?;
        let pk = self.sk.public_key().clone();
        let scaled = pk.scalar_mul(inv, &BigInt::from(dwell_ms))?;
        // Without fresh randomness the server could match E(1/σ)^t against
        // its own powers of E(1/σ) and recover t.
        let scaled = pk.rerandomize(&scaled, &mut self.rng)?;
        self.ep.send(Body::Keystroke {
            key_index,
            ciphertext: scaled,
        })?;
        loop {
            let msg = self.ep.recv()?;
            let reply = match msg.body {
                Body::PpcpM1 { ciphertext } => {
                    let m2 = client_bits(&self.sk, &self.fixed, &ciphertext, &mut self.rng)?;
                    Body::PpcpM2 {
                        bits: m2.bits,
                        high: m2.high,
                    }
                }
                Body::PpcpM3 { terms } => Body::PpcpM4 {
                    ciphertext: client_zero_test(&self.sk, &terms, &mut self.rng)?,
                },
                Body::PpcpM5 { ciphertext } => Body::PpcpReveal {
                    value: client_reveal(&self.sk, &ciphertext)?,
                },
                Body::Decision { accepted, .. } => {
                    return Ok(if accepted {
                        Decision::Active
                    } else {
                        Decision::Rejected
                    })
                }
                Body::Error { code, message } => {
                    return Err(ProtocolError::from_remote(code, message, Some(key_index)))
                }
                other => return Err(ProtocolError::UnexpectedMessage(other.type_name().into())),
            };
            self.ep.send(reply)?;
        }
    }
}
