//! Fixtures shared by the criterion benches.

use keytrust_core::store::EncryptedEntry;
use keytrust_core::trust::QuantizedTrustParams;
use keytrust_core::{keygen, Ciphertext, FixedPointParams, PrivateKey, PublicKey, TrustParams};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const SEED: u64 = 0x6b65_7974;

/// Key sizes swept by the benches.
pub const KEY_BITS: [u64; 2] = [512, 1024];

pub struct Fixture {
    pub pk: PublicKey,
    pub sk: PrivateKey,
    pub rng: ChaCha20Rng,
}

impl Fixture {
    /// Deterministic key pair of `bits` with its randomizer table warmed.
    pub fn new(bits: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(SEED ^ bits);
        let (pk, sk) = keygen(bits, &mut rng).expect("keygen");
        pk.precompute();
        Fixture { pk, sk, rng }
    }

    pub fn encrypt(&mut self, m: i64) -> Ciphertext {
        self.pk.encrypt_i64(m, &mut self.rng).expect("encrypt")
    }

    /// Template entry for a key with mean 100 ms and deviation 20 ms.
    pub fn entry(&mut self, fixed: &FixedPointParams) -> EncryptedEntry {
        let scale = fixed.scale();
        EncryptedEntry {
            key_index: 0,
            inv_sigma: self.encrypt((scale / 20.0).round() as i64),
            mu_over_sigma: self.encrypt((scale * 100.0 / 20.0).round() as i64),
        }
    }
}

/// Default fixed-point and trust parameters as the server uses them.
pub fn default_params() -> (FixedPointParams, QuantizedTrustParams) {
    let fixed = FixedPointParams::default();
    let q = QuantizedTrustParams::encode(&TrustParams::default(), &fixed).expect("encode");
    (fixed, q)
}
