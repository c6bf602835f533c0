//! Two-party strict greater-than on encrypted integers.
//!
//! The server holds `E(x)` and either a plaintext `y` or `E(y)` under the
//! client's key; the server learns `[x > y]` and the client learns nothing.
//! The construction is a blinded difference followed by a DGK bitwise
//! comparison over the same Paillier key:
//!
//! ```text
//! server                                   client
//!   z = 2^l + x - y + r         M1 E(z) ->
//!                        <- M2 E(z_0..z_{l-1}), E(z >> l)
//!   masked, shuffled e_j        M3 ->
//!                        <- M4 E([some e_j = 0])
//!   E(res XOR b)                M5 ->
//!                        <- REVEAL res XOR b
//! ```
//!
//! Internally the server works with `r' = r + 1`, so that the borrow of
//! `z - r'` out of the low `l` bits yields the strict relation:
//! `[x > y] = (z >> l) - (r' >> l) - [z mod 2^l < r' mod 2^l]`.
//!
//! The server side owns only a [`PublicKey`], so it cannot decrypt:
//!
//! ```compile_fail
//! use keytrust_core::crypto::{Ciphertext, PublicKey};
//! fn server_peeks(pk: &PublicKey, c: &Ciphertext) {
//!     let _ = pk.decrypt(c);
//! }
//! ```

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{One, Zero};
use rand::seq::SliceRandom;
use rand::{CryptoRng, Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto::{random_bits, random_below, Ciphertext, CryptoError, PrivateKey, PublicKey};
use crate::numerics::FixedPointParams;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompareError {
    #[error("comparison parameters need {needed} plaintext bits but the key offers fewer than {available}")]
    ParamsTooLarge { needed: u64, available: u64 },
    #[error("comparison session in state {found:?}, expected {expected:?}")]
    InvalidState {
        expected: CompareState,
        found: CompareState,
    },
    #[error("comparison aborted: {0}")]
    ProtocolAbort(String),
    #[error("malformed comparison message: {0}")]
    MalformedMessage(String),
    #[error("peer failure: {0}")]
    Peer(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareState {
    Init,
    SentZ,
    SentMasked,
    SentResult,
    Done,
}

/// Right-hand side of a comparison.
#[derive(Debug, Clone)]
pub enum CompareRhs {
    Plain(i64),
    Encrypted(Ciphertext),
}

/// Deterministic overrides for tests. Production callers use the default.
#[derive(Debug, Clone, Default)]
pub struct CompareHooks {
    /// Blinding `r`, must be below `2^(l+κ)`.
    pub blinding: Option<BigUint>,
    pub flip: Option<bool>,
    pub mask_bit: Option<bool>,
    pub permutation_seed: Option<u64>,
}

/// Client reply to M1: encrypted low bits of `z`, least significant first,
/// and the encrypted high part `z >> l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitsMessage {
    pub bits: Vec<Ciphertext>,
    pub high: Ciphertext,
}

/// Number of plaintext bits that stay exact under `decrypt_short`.
fn short_plaintext_bits(pk: &PublicKey) -> u64 {
    pk.bits() / 2
}

pub fn check_params(pk: &PublicKey, params: &FixedPointParams) -> Result<(), CompareError> {
    let available = short_plaintext_bits(pk);
    if !params.fits_plaintext_space(available) {
        return Err(CompareError::ParamsTooLarge {
            needed: u64::from(params.value_bits + params.stat_sec + 2),
            available,
        });
    }
    Ok(())
}

/// Server half of one comparison.
pub struct CompareServer {
    pk: PublicKey,
    params: FixedPointParams,
    hooks: CompareHooks,
    state: CompareState,
    /// `(r + 1) mod 2^l`
    r_low: u64,
    /// `(r + 1) >> l`
    r_high: BigUint,
    flip: bool,
    mask_bit: bool,
    high: Option<Ciphertext>,
}

impl std::fmt::Debug for CompareServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompareServer")
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

impl CompareServer {
    pub fn new(
        pk: &PublicKey,
        params: FixedPointParams,
        hooks: CompareHooks,
    ) -> Result<Self, CompareError> {
        check_params(pk, &params)?;
        Ok(CompareServer {
            pk: pk.clone(),
            params,
            hooks,
            state: CompareState::Init,
            r_low: 0,
            r_high: BigUint::zero(),
            flip: false,
            mask_bit: false,
            high: None,
        })
    }

    pub fn state(&self) -> CompareState {
        self.state
    }

    fn expect(&self, expected: CompareState) -> Result<(), CompareError> {
        if self.state != expected {
            return Err(CompareError::InvalidState {
                expected,
                found: self.state,
            });
        }
        Ok(())
    }

    fn l(&self) -> u32 {
        self.params.value_bits
    }

    /// M1. Only `x - y` enters `z`, so offset-domain inputs and signed inputs
    /// of the same range behave identically; `|x - y| < 2^l` is required.
    pub fn start<R: CryptoRng + ?Sized>(
        &mut self,
        x: &Ciphertext,
        rhs: &CompareRhs,
        rng: &mut R,
    ) -> Result<Ciphertext, CompareError> {
        self.expect(CompareState::Init)?;
        let l = self.l();
        let blind_bits = u64::from(l + self.params.stat_sec);
        let r = match self.hooks.blinding.take() {
            Some(r) if r.bits() <= blind_bits => r,
            Some(_) => {
                return Err(CompareError::ProtocolAbort(
                    "blinding hook exceeds 2^(l+κ)".into(),
                ))
            }
            None => random_bits(rng, blind_bits),
        };
        let r_tilde = &r + 1u32;
        let low_mask = (BigUint::one() << l) - 1u32;
        self.r_low = (&r_tilde & &low_mask)
            .to_u64_digits()
            .first()
            .copied()
            .unwrap_or(0);
        self.r_high = &r_tilde >> l;

        let shift = BigInt::from_biguint(Sign::Plus, (BigUint::one() << l) + &r);
        let z = match rhs {
            CompareRhs::Plain(y) => self.pk.add_plain(x, &(shift - BigInt::from(*y)))?,
            CompareRhs::Encrypted(ey) => {
                let diff = self.pk.sub(x, ey)?;
                self.pk.add_plain(&diff, &shift)?
            }
        };
        let m1 = self.pk.rerandomize(&z, rng)?;
        self.flip = self.hooks.flip.unwrap_or_else(|| rng.random());
        self.state = CompareState::SentZ;
        Ok(m1)
    }

    /// M3: the masked, shuffled DGK terms.
    pub fn mask<R: CryptoRng + ?Sized>(
        &mut self,
        m2: &BitsMessage,
        rng: &mut R,
    ) -> Result<Vec<Ciphertext>, CompareError> {
        self.expect(CompareState::SentZ)?;
        if m2.bits.len() != self.l() as usize {
            return Err(CompareError::MalformedMessage(format!(
                "expected {} bit ciphertexts, got {}",
                self.l(),
                m2.bits.len()
            )));
        }
        self.pk.check(&m2.high)?;
        let mut terms = masked_terms(
            &self.pk,
            &m2.bits,
            self.r_low,
            self.flip,
            self.params.stat_sec,
            rng,
        )?;
        match self.hooks.permutation_seed {
            Some(seed) => terms.shuffle(&mut ChaCha20Rng::seed_from_u64(seed)),
            None => terms.shuffle(rng),
        }
        self.high = Some(m2.high.clone());
        self.state = CompareState::SentMasked;
        Ok(terms)
    }

    /// M5: `E(res XOR b)` with `res = [x > y]`.
    pub fn finish<R: CryptoRng + ?Sized>(
        &mut self,
        m4: &Ciphertext,
        rng: &mut R,
    ) -> Result<Ciphertext, CompareError> {
        self.expect(CompareState::SentMasked)?;
        let high = self.high.take().expect("high part stored in SentMasked");
        let r_high = BigInt::from_biguint(Sign::Plus, self.r_high.clone());
        // δ = [c < r'_low]; the client returned δ̃ = δ XOR flip.
        let res = if self.flip {
            let with_delta = self.pk.add(&high, m4)?;
            self.pk.add_plain(&with_delta, &(-r_high - 1))?
        } else {
            let without_delta = self.pk.sub(&high, m4)?;
            self.pk.add_plain(&without_delta, &(-r_high))?
        };
        self.mask_bit = self.hooks.mask_bit.unwrap_or_else(|| rng.random());
        let masked = if self.mask_bit {
            let neg = self.pk.negate(&res)?;
            self.pk.add_plain(&neg, &BigInt::one())?
        } else {
            res
        };
        let m5 = self.pk.rerandomize(&masked, rng)?;
        self.state = CompareState::SentResult;
        Ok(m5)
    }

    /// Unmasks the revealed bit.
    pub fn conclude(&mut self, revealed: i64) -> Result<bool, CompareError> {
        self.expect(CompareState::SentResult)?;
        let bit = match revealed {
            0 => false,
            1 => true,
            other => {
                return Err(CompareError::ProtocolAbort(format!(
                    "revealed value {other} is not a bit"
                )))
            }
        };
        self.state = CompareState::Done;
        Ok(bit ^ self.mask_bit)
    }
}

/// DGK terms for the predicate `[c < a]` (`flip = false`) or `[c >= a]`
/// (`flip = true`), where `bits` encrypts `c` least significant bit first.
/// Exactly one term decrypts to zero when the predicate holds, none otherwise.
pub(crate) fn masked_terms<R: CryptoRng + ?Sized>(
    pk: &PublicKey,
    bits: &[Ciphertext],
    a: u64,
    flip: bool,
    stat_sec: u32,
    rng: &mut R,
) -> Result<Vec<Ciphertext>, CompareError> {
    let l = bits.len();
    // [c >= a] = [c > a - 1]; for a = 0 the predicate is constant true.
    let (t, offset, force_zero) = match (flip, a) {
        (false, _) => (a, 1i64, false),
        (true, 0) => (0, 1i64, true),
        (true, _) => (a - 1, -1i64, false),
    };
    let t_bit = |j: usize| j < 64 && (t >> j) & 1 == 1;

    // W_u = E(c_u XOR t_u)
    let flipped: Vec<&Ciphertext> = (0..l).filter(|&u| t_bit(u)).map(|u| &bits[u]).collect();
    let mut negated = pk.negate_batch(&flipped)?.into_iter();
    let mut xor = Vec::with_capacity(l);
    for (u, cu) in bits.iter().enumerate() {
        if t_bit(u) {
            let neg = negated.next().expect("one negation per set bit");
            xor.push(pk.add_plain(&neg, &BigInt::one())?);
        } else {
            pk.check(cu)?;
            xor.push(cu.clone());
        }
    }

    let rho_bound = (BigUint::one() << stat_sec) - 1u32;
    let mut terms = vec![None; l];
    let mut suffix: Option<Ciphertext> = None;
    for j in (0..l).rev() {
        let mut term = pk.add_plain(
            &bits[j],
            &BigInt::from(offset - i64::from(t_bit(j))),
        )?;
        if let Some(s) = &suffix {
            let s3 = pk.scalar_mul_i64(s, 3)?;
            term = pk.add(&term, &s3)?;
        }
        let rho = random_below(rng, &rho_bound) + 1u32;
        let scaled = pk.scalar_mul(&term, &BigInt::from_biguint(Sign::Plus, rho))?;
        terms[j] = Some(pk.rerandomize(&scaled, rng)?);
        suffix = Some(match suffix {
            Some(s) => pk.add(&s, &xor[j])?,
            None => xor[j].clone(),
        });
    }
    let mut terms: Vec<Ciphertext> = terms.into_iter().map(|t| t.expect("filled")).collect();
    if force_zero && l > 0 {
        let pos = rng.random_range(0..l);
        terms[pos] = pk.encrypt(&BigUint::zero(), rng)?;
    }
    Ok(terms)
}

/// Client reply to M1.
pub fn client_bits<R: CryptoRng + ?Sized>(
    sk: &PrivateKey,
    params: &FixedPointParams,
    m1: &Ciphertext,
    rng: &mut R,
) -> Result<BitsMessage, CompareError> {
    let pk = sk.public_key();
    let z = sk.decrypt_short(m1)?;
    let z = z
        .to_biguint()
        .ok_or_else(|| CompareError::MalformedMessage("blinded difference is negative".into()))?;
    let l = params.value_bits as u64;
    let mut bits = Vec::with_capacity(l as usize);
    for j in 0..l {
        let bit = BigUint::from(u8::from(z.bit(j)));
        bits.push(pk.encrypt(&bit, rng)?);
    }
    let high = pk.encrypt(&(&z >> l), rng)?;
    Ok(BitsMessage { bits, high })
}

/// Client reply to M3: a fresh `E(1)` if any term is zero, else `E(0)`.
pub fn client_zero_test<R: CryptoRng + ?Sized>(
    sk: &PrivateKey,
    masked: &[Ciphertext],
    rng: &mut R,
) -> Result<Ciphertext, CompareError> {
    let mut any_zero = false;
    for c in masked {
        // Every term is decrypted so the client's work does not depend on it.
        any_zero |= sk.is_zero(c)?;
    }
    Ok(sk
        .public_key()
        .encrypt(&BigUint::from(u8::from(any_zero)), rng)?)
}

/// Client reply to M5: the decrypted masked result.
pub fn client_reveal(sk: &PrivateKey, m5: &Ciphertext) -> Result<i64, CompareError> {
    let v = sk.decrypt_short(m5)?;
    Ok(i64::try_from(&v).unwrap_or(i64::MAX))
}

/// Whoever answers the comparison's client-side messages.
pub trait ComparePeer {
    fn bits(&mut self, m1: &Ciphertext) -> Result<BitsMessage, CompareError>;
    fn zero_test(&mut self, masked: &[Ciphertext]) -> Result<Ciphertext, CompareError>;
    fn reveal(&mut self, m5: &Ciphertext) -> Result<i64, CompareError>;
}

/// In-process client.
pub struct LocalPeer<'a, R: ?Sized> {
    pub sk: &'a PrivateKey,
    pub params: FixedPointParams,
    pub rng: &'a mut R,
}

impl<R: CryptoRng + ?Sized> ComparePeer for LocalPeer<'_, R> {
    fn bits(&mut self, m1: &Ciphertext) -> Result<BitsMessage, CompareError> {
        client_bits(self.sk, &self.params, m1, self.rng)
    }

    fn zero_test(&mut self, masked: &[Ciphertext]) -> Result<Ciphertext, CompareError> {
        client_zero_test(self.sk, masked, self.rng)
    }

    fn reveal(&mut self, m5: &Ciphertext) -> Result<i64, CompareError> {
        client_reveal(self.sk, m5)
    }
}

/// Wire cost of one comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompareTraffic {
    pub server_to_client: u64,
    pub client_to_server: u64,
    pub ciphertexts: u64,
}

impl CompareTraffic {
    /// M1, M3, M5 one way; M2, M4, REVEAL the other.
    pub fn for_bits(l: u32) -> Self {
        let l = u64::from(l);
        CompareTraffic {
            server_to_client: 3,
            client_to_server: 3,
            ciphertexts: 1 + (l + 1) + l + 1 + 1,
        }
    }
}

/// Runs a whole comparison against `peer` and returns `[x > y]`.
pub fn compare_gt<P, R>(
    pk: &PublicKey,
    params: FixedPointParams,
    x: &Ciphertext,
    rhs: &CompareRhs,
    hooks: CompareHooks,
    peer: &mut P,
    rng: &mut R,
) -> Result<bool, CompareError>
where
    P: ComparePeer + ?Sized,
    R: CryptoRng + ?Sized,
{
    let mut server = CompareServer::new(pk, params, hooks)?;
    let m1 = server.start(x, rhs, rng)?;
    let m2 = peer.bits(&m1)?;
    let m3 = server.mask(&m2, rng)?;
    let m4 = peer.zero_test(&m3)?;
    let m5 = server.finish(&m4, rng)?;
    let revealed = peer.reveal(&m5)?;
    server.conclude(revealed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn keys() -> &'static (PublicKey, PrivateKey) {
        static KEYS: OnceLock<(PublicKey, PrivateKey)> = OnceLock::new();
        KEYS.get_or_init(|| keygen(512, &mut ChaCha20Rng::seed_from_u64(11)).unwrap())
    }

    fn params(l: u32) -> FixedPointParams {
        FixedPointParams::new(1, l, 40).unwrap()
    }

    fn run(x: i64, y: i64, l: u32, hooks: CompareHooks, seed: u64) -> bool {
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut client_rng = ChaCha20Rng::seed_from_u64(seed ^ 0xc0ffee);
        let p = params(l);
        let ex = pk.encrypt_i64(x, &mut rng).unwrap();
        let mut peer = LocalPeer {
            sk,
            params: p,
            rng: &mut client_rng,
        };
        compare_gt(pk, p, &ex, &CompareRhs::Plain(y), hooks, &mut peer, &mut rng).unwrap()
    }

    #[test]
    fn forced_examples() {
        assert!(run(5, 3, 5, CompareHooks::default(), 1));
        assert!(!run(3, 5, 5, CompareHooks::default(), 2));
        assert!(!run(7, 7, 5, CompareHooks::default(), 3));
    }

    #[test]
    fn zero_blinding_gives_expected_z() {
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let p = params(5);
        let mut server = CompareServer::new(
            pk,
            p,
            CompareHooks {
                blinding: Some(BigUint::zero()),
                ..Default::default()
            },
        )
        .unwrap();
        let ex = pk.encrypt_i64(3, &mut rng).unwrap();
        let m1 = server.start(&ex, &CompareRhs::Plain(5), &mut rng).unwrap();
        assert_eq!(sk.decrypt(&m1).unwrap(), BigUint::from(30u32));

        let m2 = client_bits(sk, &p, &m1, &mut rng).unwrap();
        let bits: Vec<u32> = m2
            .bits
            .iter()
            .map(|c| u32::try_from(&sk.decrypt(c).unwrap()).unwrap())
            .collect();
        assert_eq!(bits, vec![0, 1, 1, 1, 1]);
        assert!(sk.decrypt(&m2.high).unwrap().is_zero());
    }

    #[test]
    fn equal_inputs_blind_to_power_of_two_plus_r() {
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let p = params(5);
        let r = BigUint::from(123_456u32);
        let mut server = CompareServer::new(
            pk,
            p,
            CompareHooks {
                blinding: Some(r.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        let ex = pk.encrypt_i64(9, &mut rng).unwrap();
        let ey = pk.encrypt_i64(9, &mut rng).unwrap();
        let m1 = server
            .start(&ex, &CompareRhs::Encrypted(ey), &mut rng)
            .unwrap();
        assert_eq!(sk.decrypt(&m1).unwrap(), r + 32u32);
    }

    #[test]
    fn zero_low_bits_encrypt_zero() {
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let p = params(5);
        let m1 = pk.encrypt(&BigUint::from(64u32), &mut rng).unwrap();
        let m2 = client_bits(sk, &p, &m1, &mut rng).unwrap();
        assert_eq!(m2.bits.len(), 5);
        for c in &m2.bits {
            assert!(sk.decrypt(c).unwrap().is_zero());
        }
        assert_eq!(sk.decrypt(&m2.high).unwrap(), BigUint::from(2u32));
    }

    #[test]
    fn masked_terms_match_predicate_exhaustively() {
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for c in 0u64..16 {
            let bits: Vec<Ciphertext> = (0..4)
                .map(|j| pk.encrypt(&BigUint::from((c >> j) & 1), &mut rng).unwrap())
                .collect();
            for a in 0u64..16 {
                for flip in [false, true] {
                    let terms = masked_terms(pk, &bits, a, flip, 40, &mut rng).unwrap();
                    assert_eq!(terms.len(), 4);
                    let zeros = terms.iter().filter(|t| sk.is_zero(t).unwrap()).count();
                    let expected = if flip { c >= a } else { c < a };
                    assert_eq!(zeros, usize::from(expected), "c={c} a={a} flip={flip}");
                }
            }
        }
    }

    #[test]
    fn equality_edge_has_no_zero_without_flip() {
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let bits: Vec<Ciphertext> = (0..5)
            .map(|j| pk.encrypt(&BigUint::from((13u64 >> j) & 1), &mut rng).unwrap())
            .collect();
        let terms = masked_terms(pk, &bits, 13, false, 40, &mut rng).unwrap();
        assert!(terms.iter().all(|t| !sk.is_zero(t).unwrap()));
    }

    #[test]
    fn zero_test_outputs_are_fresh() {
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let nonzero: Vec<Ciphertext> = (1..4).map(|v| pk.encrypt_i64(v, &mut rng).unwrap()).collect();
        let a = client_zero_test(sk, &nonzero, &mut rng).unwrap();
        let b = client_zero_test(sk, &nonzero, &mut rng).unwrap();
        assert!(sk.decrypt(&a).unwrap().is_zero());
        assert_ne!(a, b);
        let mut with_zero = nonzero.clone();
        with_zero.push(pk.encrypt_i64(0, &mut rng).unwrap());
        let c = client_zero_test(sk, &with_zero, &mut rng).unwrap();
        assert_eq!(sk.decrypt(&c).unwrap(), BigUint::one());
    }

    #[test]
    fn exhaustive_l4_under_every_hook_combination() {
        let mut failures = 0;
        for seed in 0..4u64 {
            for flip in [false, true] {
                for mask_bit in [false, true] {
                    for x in 0..16i64 {
                        for y in 0..16i64 {
                            let hooks = CompareHooks {
                                flip: Some(flip),
                                mask_bit: Some(mask_bit),
                                permutation_seed: Some(seed),
                                ..Default::default()
                            };
                            if run(x, y, 4, hooks, seed * 1000 + (x * 16 + y) as u64) != (x > y) {
                                failures += 1;
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(failures, 0);
    }

    #[test]
    fn extreme_blinding_values() {
        let l = 5;
        let top: BigUint = (BigUint::one() << (l + 40)) - 1u32;
        for r in [BigUint::zero(), top.clone(), top >> 1u32, BigUint::from(31u32)] {
            for (x, y) in [(0, 31), (31, 0), (16, 16), (0, 0), (31, 31), (17, 16)] {
                for flip in [false, true] {
                    let hooks = CompareHooks {
                        blinding: Some(r.clone()),
                        flip: Some(flip),
                        ..Default::default()
                    };
                    assert_eq!(run(x, y, l, hooks, 77), x > y, "r={r} x={x} y={y} flip={flip}");
                }
            }
        }
    }

    #[test]
    fn signed_inputs_compare_like_offset_inputs() {
        for (x, y) in [(-3, 5), (5, -3), (-7, -7), (-15, 15), (15, -15)] {
            assert_eq!(run(x, y, 5, CompareHooks::default(), 12), x > y);
        }
    }

    #[test]
    fn state_machine_rejects_out_of_order_calls() {
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let p = params(5);
        let mut server = CompareServer::new(pk, p, CompareHooks::default()).unwrap();
        let e = pk.encrypt_i64(1, &mut rng).unwrap();
        assert!(matches!(
            server.finish(&e, &mut rng),
            Err(CompareError::InvalidState { .. })
        ));
        let m1 = server.start(&e, &CompareRhs::Plain(0), &mut rng).unwrap();
        assert!(matches!(
            server.start(&e, &CompareRhs::Plain(0), &mut rng),
            Err(CompareError::InvalidState { .. })
        ));
        let mut m2 = client_bits(sk, &p, &m1, &mut rng).unwrap();
        m2.bits.pop();
        assert!(matches!(
            server.mask(&m2, &mut rng),
            Err(CompareError::MalformedMessage(_))
        ));
        assert_eq!(server.state(), CompareState::SentZ);
    }

    #[test]
    fn non_bit_reveal_aborts() {
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let p = params(5);
        let mut server = CompareServer::new(pk, p, CompareHooks::default()).unwrap();
        let e = pk.encrypt_i64(4, &mut rng).unwrap();
        let m1 = server.start(&e, &CompareRhs::Plain(2), &mut rng).unwrap();
        let m2 = client_bits(sk, &p, &m1, &mut rng).unwrap();
        let m3 = server.mask(&m2, &mut rng).unwrap();
        let m4 = client_zero_test(sk, &m3, &mut rng).unwrap();
        server.finish(&m4, &mut rng).unwrap();
        assert!(matches!(
            server.conclude(2),
            Err(CompareError::ProtocolAbort(_))
        ));
    }

    #[test]
    fn oversized_params_are_refused() {
        let (pk, _) = keys();
        // 512-bit key: 256 short plaintext bits; 62 + 200 + 2 >= 256.
        let p = FixedPointParams::new(1, 62, 200).unwrap();
        assert!(matches!(
            CompareServer::new(pk, p, CompareHooks::default()),
            Err(CompareError::ParamsTooLarge { .. })
        ));
    }

    #[test]
    fn traffic_shape() {
        let t = CompareTraffic::for_bits(5);
        assert_eq!((t.server_to_client, t.client_to_server), (3, 3));
        assert_eq!(t.ciphertexts, 1 + 6 + 5 + 1 + 1);
    }

    #[test]
    fn client_sees_uniform_final_bit() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let p = params(4);
        let ex = pk.encrypt_i64(9, &mut rng).unwrap();
        let runs = 1000;
        let mut ones = 0u32;
        for _ in 0..runs {
            let mut server = CompareServer::new(pk, p, CompareHooks::default()).unwrap();
            let m1 = server.start(&ex, &CompareRhs::Plain(3), &mut rng).unwrap();
            let m2 = client_bits(sk, &p, &m1, &mut rng).unwrap();
            let m3 = server.mask(&m2, &mut rng).unwrap();
            let m4 = client_zero_test(sk, &m3, &mut rng).unwrap();
            let m5 = server.finish(&m4, &mut rng).unwrap();
            let seen = client_reveal(sk, &m5).unwrap();
            ones += seen as u32;
            assert!(server.conclude(seen).unwrap());
        }
        let expected = f64::from(runs) / 2.0;
        let stat = (f64::from(ones) - expected).powi(2) / expected
            + (f64::from(runs - ones) - expected).powi(2) / expected;
        let p_value = 1.0 - ChiSquared::new(1.0).unwrap().cdf(stat);
        assert!(p_value > 0.01, "p = {p_value}, ones = {ones}");
    }

    #[test]
    fn blinding_has_l_plus_kappa_bits() {
        // Statistical hiding of x - y needs r drawn from 2^(l+κ) values.
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let p = params(5);
        let ex = pk.encrypt_i64(0, &mut rng).unwrap();
        let mut max_bits = 0;
        for _ in 0..64 {
            let mut server = CompareServer::new(pk, p, CompareHooks::default()).unwrap();
            let m1 = server.start(&ex, &CompareRhs::Plain(0), &mut rng).unwrap();
            let z = sk.decrypt(&m1).unwrap() - 32u32;
            max_bits = max_bits.max(z.bits());
        }
        assert_eq!(max_bits, 45);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_l40_comparisons(
            x in 0i64..(1 << 40),
            y in 0i64..(1 << 40),
            seed in any::<u64>(),
        ) {
            prop_assert_eq!(run(x, y, 40, CompareHooks::default(), seed), x > y);
        }

        #[test]
        fn neighbours_l40(x in 1i64..(1 << 40) - 1, seed in any::<u64>()) {
            prop_assert!(run(x, x - 1, 40, CompareHooks::default(), seed));
            prop_assert!(!run(x, x, 40, CompareHooks::default(), seed));
            prop_assert!(!run(x, x + 1, 40, CompareHooks::default(), seed));
        }
    }
}
