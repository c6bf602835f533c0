//! Continuous keystroke authentication against an encrypted template.
//!
//! The client enrolls `E(1/σ)` and `E(μ/σ)` per key under its own Paillier
//! key. Each later keystroke is scored by the server entirely under
//! encryption, with secure comparisons against the client deciding every
//! branch; the server learns only the per-step outcomes.

pub mod compare;
pub mod crypto;
pub mod harness;
pub mod keystroke;
pub mod numerics;
pub mod protocol;
pub mod store;
pub mod transport;
pub mod trust;

pub use crypto::{keygen, keygen_os, Ciphertext, KeyId, PrivateKey, PublicKey};
pub use keystroke::{KeyEvent, ReferenceTemplate};
pub use numerics::{FixedPointParams, FixedValue};
pub use protocol::{
    enroll, AuthClient, LocalServer, ProtocolError, RemoteServer, Server, ServerConfig,
    ServerHandle, SessionTranscript,
};
pub use store::{EncryptedTemplate, FileStore, MemoryStore, TemplateRepository};
pub use trust::{Decision, TrustParams};
