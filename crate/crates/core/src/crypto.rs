//! Paillier cryptosystem with `g = n + 1`.
//!
//! Ciphertexts live in `Z*_{n^2}`. Addition of plaintexts is ciphertext
//! multiplication, scalar multiplication is exponentiation and negation is
//! modular inversion. Signed plaintexts use the convention that a residue
//! `m >= n/2` stands for `m - n`.
//!
//! Encryption draws its `n`-th residue as `h_s^α` for a fixed key-derived
//! `h_s = (-x^2)^n mod n^2` and a random `α` of `⌈k/2⌉` bits, evaluated with a
//! fixed-base window table. The ciphertext distribution is that of the
//! Damgård–Jurik–Nielsen variant of Paillier; decryption is unchanged.

use std::fmt;
use std::sync::{Arc, OnceLock};

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Signed, Zero};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SUPPORTED_KEY_BITS: [u64; 5] = [512, 768, 1024, 1536, 2048];
/// Exponents up to this many bits skip Montgomery setup.
const SMALL_EXPONENT_BITS: u64 = 8;

pub const KEY_DOC_VERSION: u32 = 1;

/// Error probability per prime is at most 4^-40 = 2^-80.
const MILLER_RABIN_ROUNDS: usize = 40;
const WINDOW_BITS: u64 = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("unsupported key size {0} (supported: 512, 768, 1024, 1536, 2048)")]
    UnsupportedKeySize(u64),
    #[error("entropy source failure: {0}")]
    EntropyFailure(String),
    #[error("plaintext outside [0, n)")]
    MessageOutOfRange,
    #[error("ciphertext was produced under a different key")]
    KeyMismatch,
    #[error("malformed ciphertext: {0}")]
    MalformedCiphertext(String),
    #[error("invalid key material: {0}")]
    InvalidKey(String),
}

/// First eight bytes of SHA-256 over the big-endian modulus.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KeyId([u8; 8]);

impl KeyId {
    fn of_modulus(n: &BigUint) -> Self {
        let digest = Sha256::digest(n.to_bytes_be());
        let mut id = [0u8; 8];
        id.copy_from_slice(&digest[..8]);
        KeyId(id)
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({self})")
    }
}

impl From<KeyId> for String {
    fn from(id: KeyId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for KeyId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s.len() != 16 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(format!("key id must be 16 hex digits, got {s:?}"));
        }
        let mut id = [0u8; 8];
        for (i, byte) in id.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|e| e.to_string())?;
        }
        Ok(KeyId(id))
    }
}

/// An encrypted value together with the fingerprint of its key.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "CiphertextRepr", try_from = "CiphertextRepr")]
pub struct Ciphertext {
    value: BigUint,
    key_id: KeyId,
}

#[derive(Serialize, Deserialize)]
struct CiphertextRepr {
    key_id: KeyId,
    value: String,
}

impl From<Ciphertext> for CiphertextRepr {
    fn from(c: Ciphertext) -> Self {
        CiphertextRepr {
            key_id: c.key_id,
            value: c.value.to_str_radix(16),
        }
    }
}

impl TryFrom<CiphertextRepr> for Ciphertext {
    type Error = String;

    fn try_from(r: CiphertextRepr) -> Result<Self, Self::Error> {
        let value = parse_hex(&r.value)?;
        if value.is_zero() {
            return Err("ciphertext value must be non-zero".into());
        }
        Ok(Ciphertext {
            value,
            key_id: r.key_id,
        })
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hex = self.value.to_str_radix(16);
        let head = &hex[..hex.len().min(12)];
        write!(f, "Ciphertext({}, {head}…)", self.key_id)
    }
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    /// Reassembles a ciphertext from raw parts; range is checked on use.
    pub fn from_parts(value: BigUint, key_id: KeyId) -> Self {
        Ciphertext { value, key_id }
    }
}

/// `base^(d * 2^(w*i))` for every window position `i` and digit `d`.
struct FixedBaseTable {
    rows: Vec<Vec<BigUint>>,
}

impl FixedBaseTable {
    fn new(base: &BigUint, modulus: &BigUint, exponent_bits: u64) -> Self {
        let digits = (1usize << WINDOW_BITS) - 1;
        let row_count = exponent_bits.div_ceil(WINDOW_BITS) as usize;
        let mut rows = Vec::with_capacity(row_count);
        let mut row_base = base.clone();
        for _ in 0..row_count {
            let mut row = Vec::with_capacity(digits);
            let mut acc = row_base.clone();
            row.push(acc.clone());
            for _ in 1..digits {
                acc = &acc * &row_base % modulus;
                row.push(acc.clone());
            }
            row_base = &acc * &row_base % modulus;
            rows.push(row);
        }
        FixedBaseTable { rows }
    }

    fn pow(&self, exponent: &BigUint, modulus: &BigUint) -> BigUint {
        let mut acc = BigUint::one();
        for (i, row) in self.rows.iter().enumerate() {
            let mut digit = 0usize;
            for b in 0..WINDOW_BITS {
                if exponent.bit(i as u64 * WINDOW_BITS + b) {
                    digit |= 1 << b;
                }
            }
            if digit != 0 {
                acc = acc * &row[digit - 1] % modulus;
            }
        }
        acc
    }
}

struct PublicInner {
    bits: u64,
    n: BigUint,
    nn: BigUint,
    half_n: BigUint,
    id: KeyId,
    masks: OnceLock<FixedBaseTable>,
}

/// Public key `(n, g = n + 1)`.
#[derive(Clone)]
pub struct PublicKey(Arc<PublicInner>);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("bits", &self.0.bits)
            .field("id", &self.0.id)
            .finish()
    }
}

impl PartialEq for PublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.0.n == other.0.n
    }
}

impl Eq for PublicKey {}

impl PublicKey {
    pub fn from_modulus(n: BigUint, bits: u64) -> Result<Self, CryptoError> {
        if !SUPPORTED_KEY_BITS.contains(&bits) {
            return Err(CryptoError::UnsupportedKeySize(bits));
        }
        if n.bits() != bits {
            return Err(CryptoError::InvalidKey(format!(
                "modulus has {} bits, expected {bits}",
                n.bits()
            )));
        }
        if n.is_even() {
            return Err(CryptoError::InvalidKey("modulus must be odd".into()));
        }
        let nn = &n * &n;
        let half_n = &n >> 1u32;
        let id = KeyId::of_modulus(&n);
        Ok(PublicKey(Arc::new(PublicInner {
            bits,
            n,
            nn,
            half_n,
            id,
            masks: OnceLock::new(),
        })))
    }

    pub fn bits(&self) -> u64 {
        self.0.bits
    }

    pub fn n(&self) -> &BigUint {
        &self.0.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.0.nn
    }

    pub fn g(&self) -> BigUint {
        &self.0.n + 1u32
    }

    pub fn key_id(&self) -> KeyId {
        self.0.id
    }

    fn mask_table(&self) -> &FixedBaseTable {
        self.0.masks.get_or_init(|| {
            let x = self.derive_mask_seed();
            // h = -x^2 mod n, h_s = h^n mod n^2
            let h = &self.0.n - (&x * &x % &self.0.n);
            let hs = h.modpow(&self.0.n, &self.0.nn);
            FixedBaseTable::new(&hs, &self.0.nn, self.mask_exponent_bits())
        })
    }

    fn mask_exponent_bits(&self) -> u64 {
        self.0.bits.div_ceil(2)
    }

    fn derive_mask_seed(&self) -> BigUint {
        let n_bytes = self.0.n.to_bytes_be();
        let want = (self.0.bits / 8 + 16) as usize;
        for attempt in 0u32.. {
            let mut out = Vec::with_capacity(want + 32);
            let mut block = 0u32;
            while out.len() < want {
                let mut h = Sha256::new();
                h.update(b"keytrust/paillier-mask");
                h.update(attempt.to_be_bytes());
                h.update(block.to_be_bytes());
                h.update(&n_bytes);
                out.extend_from_slice(&h.finalize());
                block += 1;
            }
            let x = BigUint::from_bytes_be(&out) % &self.0.n;
            if !x.is_zero() && x.gcd(&self.0.n).is_one() {
                return x;
            }
        }
        unreachable!("an attempt counter of u32 range always finds a unit")
    }

    /// A uniformly drawn element of the subgroup generated by `h_s`.
    pub fn random_mask<R: CryptoRng + ?Sized>(&self, rng: &mut R) -> BigUint {
        let alpha = random_bits(rng, self.mask_exponent_bits());
        self.mask_table().pow(&alpha, &self.0.nn)
    }

    /// Forces the randomizer table to be built now rather than on first use.
    pub fn precompute(&self) {
        let _ = self.mask_table();
    }

    pub fn encrypt<R: CryptoRng + ?Sized>(
        &self,
        m: &BigUint,
        rng: &mut R,
    ) -> Result<Ciphertext, CryptoError> {
        if m >= &self.0.n {
            return Err(CryptoError::MessageOutOfRange);
        }
        let gm = self.g_pow(m);
        let value = gm * self.random_mask(rng) % &self.0.nn;
        Ok(self.wrap(value))
    }

    /// Encrypts a signed value via `m mod n`; requires `|m| < n/2`.
    pub fn encrypt_signed<R: CryptoRng + ?Sized>(
        &self,
        m: &BigInt,
        rng: &mut R,
    ) -> Result<Ciphertext, CryptoError> {
        let residue = self.signed_residue(m)?;
        self.encrypt(&residue, rng)
    }

    pub fn encrypt_i64<R: CryptoRng + ?Sized>(
        &self,
        m: i64,
        rng: &mut R,
    ) -> Result<Ciphertext, CryptoError> {
        self.encrypt_signed(&BigInt::from(m), rng)
    }

    /// Maps a signed plaintext into `[0, n)`.
    pub fn signed_residue(&self, m: &BigInt) -> Result<BigUint, CryptoError> {
        if m.magnitude() >= &self.0.half_n {
            return Err(CryptoError::MessageOutOfRange);
        }
        let n = BigInt::from_biguint(Sign::Plus, self.0.n.clone());
        Ok(m.mod_floor(&n).magnitude().clone())
    }

    /// Interprets a residue in `[0, n)` under the signed convention.
    pub fn to_signed(&self, m: &BigUint) -> BigInt {
        if m >= &self.0.half_n {
            BigInt::from_biguint(Sign::Plus, m.clone()) - BigInt::from_biguint(Sign::Plus, self.0.n.clone())
        } else {
            BigInt::from_biguint(Sign::Plus, m.clone())
        }
    }

    // (1 + n)^m = 1 + m*n mod n^2
    fn g_pow(&self, m: &BigUint) -> BigUint {
        (m * &self.0.n + 1u32) % &self.0.nn
    }

    fn wrap(&self, value: BigUint) -> Ciphertext {
        Ciphertext {
            value,
            key_id: self.0.id,
        }
    }

    pub fn check(&self, c: &Ciphertext) -> Result<(), CryptoError> {
        if c.key_id != self.0.id {
            return Err(CryptoError::KeyMismatch);
        }
        if c.value.is_zero() || c.value >= self.0.nn {
            return Err(CryptoError::MalformedCiphertext(
                "value outside (0, n^2)".into(),
            ));
        }
        Ok(())
    }

    /// `E(a) * E(b) = E(a + b)`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.wrap(&a.value * &b.value % &self.0.nn))
    }

    /// `E(m) * g^k = E(m + k)` without fresh randomness.
    pub fn add_plain(&self, c: &Ciphertext, k: &BigInt) -> Result<Ciphertext, CryptoError> {
        self.check(c)?;
        let n = BigInt::from_biguint(Sign::Plus, self.0.n.clone());
        let k = k.mod_floor(&n).magnitude().clone();
        Ok(self.wrap(&c.value * self.g_pow(&k) % &self.0.nn))
    }

    /// `E(m)^s = E(s * m)`; a negative `s` exponentiates the inverse.
    pub fn scalar_mul(&self, c: &Ciphertext, s: &BigInt) -> Result<Ciphertext, CryptoError> {
        self.check(c)?;
        let base = if s.is_negative() {
            self.invert(&c.value)?
        } else {
            c.value.clone()
        };
        Ok(self.wrap(self.pow_mod_nn(&base, s.magnitude())))
    }

    /// Plain square-and-multiply below [`SMALL_EXPONENT_BITS`], where it
    /// beats the setup cost of a Montgomery exponentiation.
    fn pow_mod_nn(&self, base: &BigUint, e: &BigUint) -> BigUint {
        let bits = e.bits();
        if bits > SMALL_EXPONENT_BITS {
            return base.modpow(e, &self.0.nn);
        }
        let mut acc = BigUint::one();
        for i in (0..bits).rev() {
            acc = &acc * &acc % &self.0.nn;
            if e.bit(i) {
                acc = acc * base % &self.0.nn;
            }
        }
        acc % &self.0.nn
    }

    pub fn scalar_mul_i64(&self, c: &Ciphertext, s: i64) -> Result<Ciphertext, CryptoError> {
        self.scalar_mul(c, &BigInt::from(s))
    }

    /// `E(m)^-1 = E(-m)`.
    pub fn negate(&self, c: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        self.check(c)?;
        Ok(self.wrap(self.invert(&c.value)?))
    }

    /// [`Self::negate`] over many ciphertexts with a single modular inversion.
    pub fn negate_batch(&self, cs: &[&Ciphertext]) -> Result<Vec<Ciphertext>, CryptoError> {
        let nn = &self.0.nn;
        // prefix[i] = c_0 * ... * c_{i-1}
        let mut prefix = Vec::with_capacity(cs.len() + 1);
        prefix.push(BigUint::one());
        for c in cs {
            self.check(c)?;
            let next = prefix.last().expect("non-empty") * &c.value % nn;
            prefix.push(next);
        }
        let mut inv = self.invert(prefix.last().expect("non-empty"))?;
        let mut out = vec![BigUint::zero(); cs.len()];
        for i in (0..cs.len()).rev() {
            out[i] = &inv * &prefix[i] % nn;
            inv = inv * &cs[i].value % nn;
        }
        Ok(out.into_iter().map(|v| self.wrap(v)).collect())
    }

    /// `a - b` homomorphically.
    pub fn sub(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        let nb = self.negate(b)?;
        self.add(a, &nb)
    }

    /// Multiplies in a fresh mask; the plaintext is unchanged.
    pub fn rerandomize<R: CryptoRng + ?Sized>(
        &self,
        c: &Ciphertext,
        rng: &mut R,
    ) -> Result<Ciphertext, CryptoError> {
        self.check(c)?;
        Ok(self.wrap(&c.value * self.random_mask(rng) % &self.0.nn))
    }

    fn invert(&self, v: &BigUint) -> Result<BigUint, CryptoError> {
        v.modinv(&self.0.nn)
            .ok_or_else(|| CryptoError::MalformedCiphertext("value not invertible mod n^2".into()))
    }

    pub fn to_doc(&self) -> PublicKeyDoc {
        PublicKeyDoc {
            version: KEY_DOC_VERSION,
            k: self.0.bits,
            n: self.0.n.to_str_radix(16),
            g: self.g().to_str_radix(16),
        }
    }

    pub fn from_doc(doc: &PublicKeyDoc) -> Result<Self, CryptoError> {
        if doc.version != KEY_DOC_VERSION {
            return Err(CryptoError::InvalidKey(format!(
                "unsupported key document version {}",
                doc.version
            )));
        }
        let n = parse_hex(&doc.n).map_err(CryptoError::InvalidKey)?;
        let g = parse_hex(&doc.g).map_err(CryptoError::InvalidKey)?;
        if g != &n + 1u32 {
            return Err(CryptoError::InvalidKey("only g = n + 1 is supported".into()));
        }
        Self::from_modulus(n, doc.k)
    }
}

/// Trapdoor `(p, q)` with CRT decryption constants.
#[derive(Clone)]
pub struct PrivateKey {
    public: PublicKey,
    p: BigUint,
    q: BigUint,
    pp: BigUint,
    qq: BigUint,
    hp: BigUint,
    hq: BigUint,
    q_inv_p: BigUint,
    half_p: BigUint,
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrivateKey")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl PrivateKey {
    pub fn from_primes(p: BigUint, q: BigUint, bits: u64) -> Result<Self, CryptoError> {
        if p == q {
            return Err(CryptoError::InvalidKey("p and q must differ".into()));
        }
        let public = PublicKey::from_modulus(&p * &q, bits)?;
        let g = public.g();
        let one = BigUint::one();
        let pp = &p * &p;
        let qq = &q * &q;
        let lp = (g.modpow(&(&p - &one), &pp) - &one) / &p;
        let lq = (g.modpow(&(&q - &one), &qq) - &one) / &q;
        let hp = lp
            .modinv(&p)
            .ok_or_else(|| CryptoError::InvalidKey("L_p(g) not invertible".into()))?;
        let hq = lq
            .modinv(&q)
            .ok_or_else(|| CryptoError::InvalidKey("L_q(g) not invertible".into()))?;
        let q_inv_p = q
            .modinv(&p)
            .ok_or_else(|| CryptoError::InvalidKey("q not invertible mod p".into()))?;
        let half_p = &p >> 1u32;
        Ok(PrivateKey {
            public,
            p,
            q,
            pp,
            qq,
            hp,
            hq,
            q_inv_p,
            half_p,
        })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    fn check(&self, c: &Ciphertext) -> Result<(), CryptoError> {
        self.public.check(c)?;
        if (&c.value % &self.p).is_zero() || (&c.value % &self.q).is_zero() {
            return Err(CryptoError::MalformedCiphertext(
                "value shares a factor with n".into(),
            ));
        }
        Ok(())
    }

    fn half_decrypt(&self, c: &BigUint, prime: &BigUint, square: &BigUint, h: &BigUint) -> BigUint {
        let u = c.modpow(&(prime - 1u32), square);
        let l = (u - 1u32) / prime;
        l * h % prime
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, CryptoError> {
        self.check(c)?;
        let mp = self.half_decrypt(&c.value, &self.p, &self.pp, &self.hp);
        let mq = self.half_decrypt(&c.value, &self.q, &self.qq, &self.hq);
        // m = mq + q * ((mp - mq) * q^-1 mod p)
        let diff = (&mp + &self.p - (&mq % &self.p)) % &self.p;
        let t = diff * &self.q_inv_p % &self.p;
        Ok(mq + &self.q * t)
    }

    pub fn decrypt_signed(&self, c: &Ciphertext) -> Result<BigInt, CryptoError> {
        Ok(self.public.to_signed(&self.decrypt(c)?))
    }

    /// Decrypts modulo `p` only. Exact for any plaintext whose signed value
    /// lies in `(-p/2, p/2)`; the comparison protocol keeps all of its
    /// client-side plaintexts far below that bound.
    pub fn decrypt_short(&self, c: &Ciphertext) -> Result<BigInt, CryptoError> {
        self.check(c)?;
        let mp = self.half_decrypt(&c.value, &self.p, &self.pp, &self.hp);
        let mp_signed = BigInt::from_biguint(Sign::Plus, mp.clone());
        if mp > self.half_p {
            Ok(mp_signed - BigInt::from_biguint(Sign::Plus, self.p.clone()))
        } else {
            Ok(mp_signed)
        }
    }

    /// Zero test under the same range condition as [`Self::decrypt_short`].
    pub fn is_zero(&self, c: &Ciphertext) -> Result<bool, CryptoError> {
        Ok(self.decrypt_short(c)?.is_zero())
    }

    pub fn to_doc(&self) -> PrivateKeyDoc {
        PrivateKeyDoc {
            version: KEY_DOC_VERSION,
            k: self.public.bits(),
            p: self.p.to_str_radix(16),
            q: self.q.to_str_radix(16),
        }
    }

    pub fn from_doc(doc: &PrivateKeyDoc) -> Result<Self, CryptoError> {
        if doc.version != KEY_DOC_VERSION {
            return Err(CryptoError::InvalidKey(format!(
                "unsupported key document version {}",
                doc.version
            )));
        }
        let p = parse_hex(&doc.p).map_err(CryptoError::InvalidKey)?;
        let q = parse_hex(&doc.q).map_err(CryptoError::InvalidKey)?;
        Self::from_primes(p, q, doc.k)
    }
}

/// Serialized public key: hex strings are big-endian.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKeyDoc {
    pub version: u32,
    pub k: u64,
    pub n: String,
    pub g: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivateKeyDoc {
    pub version: u32,
    pub k: u64,
    pub p: String,
    pub q: String,
}

pub fn keygen<R: CryptoRng + ?Sized>(
    bits: u64,
    rng: &mut R,
) -> Result<(PublicKey, PrivateKey), CryptoError> {
    if !SUPPORTED_KEY_BITS.contains(&bits) {
        return Err(CryptoError::UnsupportedKeySize(bits));
    }
    let half = bits / 2;
    loop {
        let p = generate_prime(half, rng);
        let q = generate_prime(half, rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if n.bits() != bits || !n.gcd(&phi).is_one() {
            continue;
        }
        let sk = PrivateKey::from_primes(p, q, bits)?;
        return Ok((sk.public.clone(), sk));
    }
}

/// Key generation seeded from the operating system.
pub fn keygen_os(bits: u64) -> Result<(PublicKey, PrivateKey), CryptoError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::try_from_os_rng()
        .map_err(|e| CryptoError::EntropyFailure(e.to_string()))?;
    keygen(bits, &mut rng)
}

fn parse_hex(s: &str) -> Result<BigUint, String> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(format!("not a hex integer: {s:?}"));
    }
    BigUint::parse_bytes(s.as_bytes(), 16).ok_or_else(|| format!("not a hex integer: {s:?}"))
}

/// Uniform integer in `[0, 2^bits)`.
pub fn random_bits<R: RngCore + ?Sized>(rng: &mut R, bits: u64) -> BigUint {
    if bits == 0 {
        return BigUint::zero();
    }
    let mut bytes = vec![0u8; bits.div_ceil(8) as usize];
    rng.fill_bytes(&mut bytes);
    let excess = bytes.len() as u64 * 8 - bits;
    bytes[0] &= 0xffu8 >> excess;
    BigUint::from_bytes_be(&bytes)
}

/// Uniform integer in `[0, bound)` by rejection sampling.
pub fn random_below<R: RngCore + ?Sized>(rng: &mut R, bound: &BigUint) -> BigUint {
    assert!(!bound.is_zero(), "empty sampling range");
    let bits = bound.bits();
    loop {
        let x = random_bits(rng, bits);
        if &x < bound {
            return x;
        }
    }
}

fn small_primes() -> &'static [u32] {
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        const LIMIT: usize = 2000;
        let mut sieve = vec![true; LIMIT];
        sieve[0] = false;
        sieve[1] = false;
        for i in 2..LIMIT {
            if sieve[i] {
                for j in (i * i..LIMIT).step_by(i) {
                    sieve[j] = false;
                }
            }
        }
        (0..LIMIT as u32).filter(|&i| sieve[i as usize]).collect()
    })
}

pub(crate) fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    if n < &BigUint::from(2u32) {
        return false;
    }
    for &sp in small_primes() {
        if n == &BigUint::from(sp) {
            return true;
        }
        if (n % sp).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_1 = n - &one;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    let base_range = n - 3u32;
    'witness: for _ in 0..rounds {
        let a = random_below(rng, &base_range) + 2u32;
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = &x * &x % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn generate_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    loop {
        let mut candidate = random_bits(rng, bits);
        // Top two bits set so that the product of two such primes has exactly
        // 2 * bits bits.
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return candidate;
        }
    }
}
