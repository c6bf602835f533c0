//! Encrypted template persistence.
//!
//! [`FileStore`] keeps one JSON document per user under its root directory.
//! Documents are written to a temporary file in the same directory and
//! linked into place without clobbering, so a reader sees either no document
//! or a complete one, and at most one concurrent enrollment of a user wins.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Ciphertext, CryptoError, KeyId, PublicKey, PublicKeyDoc};

pub const TEMPLATE_DOC_VERSION: u32 = 1;
pub const MAX_USER_ID_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no template stored for user {0:?}")]
    NotFound(String),
    #[error("user id must be 1-64 characters from [A-Za-z0-9_-], got {0:?}")]
    InvalidUserId(String),
    #[error("user {0:?} is already enrolled")]
    AlreadyExists(String),
    #[error("template document is corrupt: {0}")]
    Corrupt(String),
    #[error("storage I/O: {0}")]
    StorageIo(#[from] io::Error),
}

pub fn validate_user_id(user_id: &str) -> Result<(), StoreError> {
    let ok = !user_id.is_empty()
        && user_id.len() <= MAX_USER_ID_LEN
        && user_id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidUserId(user_id.to_string()))
    }
}

/// `E(1/σ_i)` and `E(μ_i/σ_i)` for one key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptedEntry {
    pub key_index: u32,
    pub inv_sigma: Ciphertext,
    pub mu_over_sigma: Ciphertext,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptedTemplate {
    pub version: u32,
    pub user_id: String,
    pub public_key: PublicKeyDoc,
    pub key_id: KeyId,
    pub entries: Vec<EncryptedEntry>,
}

impl EncryptedTemplate {
    pub fn new(user_id: &str, pk: &PublicKey, entries: Vec<EncryptedEntry>) -> Self {
        EncryptedTemplate {
            version: TEMPLATE_DOC_VERSION,
            user_id: user_id.to_string(),
            public_key: pk.to_doc(),
            key_id: pk.key_id(),
            entries,
        }
    }

    /// Parses the key and checks that every ciphertext and the fingerprint
    /// belong to it and that key indices are unique.
    pub fn public_key(&self) -> Result<PublicKey, StoreError> {
        let pk = PublicKey::from_doc(&self.public_key)
            .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        self.check_against(&pk)
            .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        Ok(pk)
    }

    pub fn check_against(&self, pk: &PublicKey) -> Result<(), CryptoError> {
        if self.key_id != pk.key_id() {
            return Err(CryptoError::KeyMismatch);
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.key_index) {
                return Err(CryptoError::MalformedCiphertext(format!(
                    "duplicate key index {}",
                    e.key_index
                )));
            }
            pk.check(&e.inv_sigma)?;
            pk.check(&e.mu_over_sigma)?;
        }
        Ok(())
    }

    pub fn ciphertext_count(&self) -> usize {
        2 * self.entries.len()
    }
}

/// Concurrent readers; `put` never replaces an existing user.
pub trait TemplateRepository: Send + Sync {
    fn put(&self, template: &EncryptedTemplate) -> Result<(), StoreError>;
    fn get(&self, user_id: &str) -> Result<EncryptedTemplate, StoreError>;
    fn exists(&self, user_id: &str) -> Result<bool, StoreError>;
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    docs: RwLock<HashMap<String, EncryptedTemplate>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl TemplateRepository for MemoryStore {
    fn put(&self, template: &EncryptedTemplate) -> Result<(), StoreError> {
        validate_user_id(&template.user_id)?;
        let mut docs = self.docs.write().expect("store lock poisoned");
        if docs.contains_key(&template.user_id) {
            return Err(StoreError::AlreadyExists(template.user_id.clone()));
        }
        docs.insert(template.user_id.clone(), template.clone());
        Ok(())
    }

    fn get(&self, user_id: &str) -> Result<EncryptedTemplate, StoreError> {
        validate_user_id(user_id)?;
        self.docs
            .read()
            .expect("store lock poisoned")
            .get(user_id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(user_id.to_string()))
    }

    fn exists(&self, user_id: &str) -> Result<bool, StoreError> {
        validate_user_id(user_id)?;
        Ok(self
            .docs
            .read()
            .expect("store lock poisoned")
            .contains_key(user_id))
    }
}

#[derive(Debug, Clone)]
pub struct FileStore {
    root: PathBuf,
}

impl FileStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        fs::create_dir_all(root.as_ref())?;
        Ok(FileStore {
            root: root.as_ref().to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, user_id: &str) -> Result<PathBuf, StoreError> {
        validate_user_id(user_id)?;
        Ok(self.root.join(format!("{user_id}.json")))
    }
}

impl TemplateRepository for FileStore {
    fn put(&self, template: &EncryptedTemplate) -> Result<(), StoreError> {
        let path = self.path_for(&template.user_id)?;
        if path.exists() {
            return Err(StoreError::AlreadyExists(template.user_id.clone()));
        }
        let mut tmp = tempfile::Builder::new()
            .prefix(".pending-")
            .suffix(".tmp")
            .tempfile_in(&self.root)?;
        serde_json::to_writer_pretty(&mut tmp, template)
            .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        tmp.write_all(b"\n")?;
        tmp.as_file().sync_all()?;
        tmp.persist_noclobber(&path).map_err(|e| {
            if e.error.kind() == io::ErrorKind::AlreadyExists {
                StoreError::AlreadyExists(template.user_id.clone())
            } else {
                StoreError::StorageIo(e.error)
            }
        })?;
        Ok(())
    }

    fn get(&self, user_id: &str) -> Result<EncryptedTemplate, StoreError> {
        let path = self.path_for(user_id)?;
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(user_id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let doc: EncryptedTemplate =
            serde_json::from_str(&text).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        if doc.version != TEMPLATE_DOC_VERSION || doc.user_id != user_id {
            return Err(StoreError::Corrupt(format!(
                "document version {} for user {:?}",
                doc.version, doc.user_id
            )));
        }
        Ok(doc)
    }

    fn exists(&self, user_id: &str) -> Result<bool, StoreError> {
        Ok(self.path_for(user_id)?.is_file())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    fn template(user: &str) -> EncryptedTemplate {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (pk, _) = keygen(512, &mut rng).unwrap();
        let entries = (0..3)
            .map(|i| EncryptedEntry {
                key_index: i,
                inv_sigma: pk.encrypt_i64(i64::from(i) + 10, &mut rng).unwrap(),
                mu_over_sigma: pk.encrypt_i64(i64::from(i) + 20, &mut rng).unwrap(),
            })
            .collect();
        EncryptedTemplate::new(user, &pk, entries)
    }

    fn exercise(store: &dyn TemplateRepository) {
        let t = template("alice");
        assert!(!store.exists("alice").unwrap());
        store.put(&t).unwrap();
        assert!(store.exists("alice").unwrap());
        assert_eq!(store.get("alice").unwrap(), t);
        assert!(matches!(store.put(&t), Err(StoreError::AlreadyExists(_))));
        assert!(matches!(store.get("bob"), Err(StoreError::NotFound(_))));
        assert!(matches!(store.get("../x"), Err(StoreError::InvalidUserId(_))));
        assert!(matches!(
            store.put(&template("../x")),
            Err(StoreError::InvalidUserId(_))
        ));
        t.public_key().unwrap();
    }

    #[test]
    fn user_id_rules() {
        for ok in ["a", "A-b_9", &"x".repeat(64)] {
            assert!(validate_user_id(ok).is_ok(), "{ok}");
        }
        for bad in ["", "../x", "a b", "a/b", "é", &"x".repeat(65), "a.json"] {
            assert!(validate_user_id(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn memory_store_contract() {
        exercise(&MemoryStore::new());
    }

    #[test]
    fn file_store_contract() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        exercise(&store);
        let reopened = FileStore::open(dir.path()).unwrap();
        assert_eq!(reopened.get("alice").unwrap(), template("alice"));
        let names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["alice.json".to_string()]);
    }

    #[test]
    fn file_store_rejects_corrupt_documents() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        fs::write(dir.path().join("eve.json"), "{").unwrap();
        assert!(matches!(store.get("eve"), Err(StoreError::Corrupt(_))));
    }

    #[test]
    fn concurrent_enrollment_has_one_winner() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(FileStore::open(dir.path()).unwrap());
        let t = template("carol");
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let store = Arc::clone(&store);
                let t = t.clone();
                std::thread::spawn(move || store.put(&t).is_ok())
            })
            .collect();
        let wins = handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .filter(|&ok| ok)
            .count();
        assert_eq!(wins, 1);
        assert_eq!(store.get("carol").unwrap(), t);
    }

    #[test]
    fn template_integrity_checks() {
        let mut t = template("dave");
        let (other, _) = keygen(512, &mut ChaCha20Rng::seed_from_u64(4)).unwrap();
        let pk = t.public_key().unwrap();
        assert!(t.check_against(&other).is_err());
        t.entries[1].key_index = 0;
        assert!(t.check_against(&pk).is_err());
    }
}
