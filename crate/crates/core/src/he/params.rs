use std::fmt;
use std::sync::{Arc, Once};

use serde::{Deserialize, Serialize};

use super::arith::{inv_mod, is_prime, ntt_primes};
use super::encoding::Encoder;
use super::ntt::{RingMul, NTT_THRESHOLD};
use crate::error::{Error, Result};

/// Decode tolerance for `decode(encode(v))`.
pub const DEFAULT_ENCODE_TOLERANCE: f64 = 1e-6;
/// Tolerance for `decode(decrypt(encrypt(encode(v))))`.
pub const DEFAULT_DECRYPT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityGrade {
    /// Any parameters; a warning is logged once per process.
    #[default]
    Toy,
    /// Rejects moduli larger than the homomorphic-encryption standard table
    /// allows for the ring degree. Still not a security claim.
    Hardened,
}

/// Maximum `log2(Q)` for 128-bit classical security with ternary secrets.
const HARDENED_LOGQ: [(usize, u32); 6] =
    [(1024, 27), (2048, 54), (4096, 109), (8192, 218), (16384, 438), (32768, 881)];

/// User-facing scheme parameters. The primes themselves are derived by
/// [`HeParams::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeConfig {
    pub ring_degree: usize,
    /// Bit sizes of the RNS primes, lowest level first.
    pub modulus_bits: Vec<u32>,
    pub scale: f64,
    pub value_bound: f64,
    pub security_grade: SecurityGrade,
}

impl Default for HeConfig {
    fn default() -> Self {
        Self {
            ring_degree: 4096,
            modulus_bits: vec![50, 50],
            scale: (1u64 << 30) as f64,
            value_bound: 64.0,
            security_grade: SecurityGrade::Toy,
        }
    }
}

struct Inner {
    ring_degree: usize,
    moduli: Vec<u64>,
    scale: f64,
    value_bound: f64,
    grade: SecurityGrade,
    rings: Vec<RingMul>,
    encoder: Encoder,
    /// `rescale_inv[l][i] = q_l^{-1} mod q_i` for `i < l`.
    rescale_inv: Vec<Vec<u64>>,
}

/// Validated parameters plus the precomputed tables every operation needs.
/// Cheap to clone and safe to share between threads.
#[derive(Clone)]
pub struct HeParams {
    inner: Arc<Inner>,
}

static TOY_WARNING: Once = Once::new();

impl HeParams {
    pub fn new(config: &HeConfig) -> Result<Self> {
        let n = config.ring_degree;
        if !n.is_power_of_two() || !(8..=65536).contains(&n) {
            return Err(Error::config(format!(
                "he.ring_degree must be a power of two in [8, 65536], got {n}"
            )));
        }
        if config.modulus_bits.is_empty() {
            return Err(Error::config("he.modulus_bits must list at least one prime"));
        }
        if config.modulus_bits.iter().any(|&b| !(20..=61).contains(&b)) {
            return Err(Error::config("he.modulus_bits entries must be in [20, 61]"));
        }
        let moduli = ntt_primes(&config.modulus_bits, n).ok_or_else(|| {
            Error::config(format!(
                "he.modulus_bits: no NTT-friendly primes for {:?}",
                config.modulus_bits
            ))
        })?;
        Self::from_moduli(n, moduli, config.scale, config.value_bound, config.security_grade)
    }

    /// Parameters over an explicit prime list (lowest level first).
    pub fn from_moduli(
        ring_degree: usize,
        moduli: Vec<u64>,
        scale: f64,
        value_bound: f64,
        grade: SecurityGrade,
    ) -> Result<Self> {
        let n = ring_degree;
        if !n.is_power_of_two() || !(8..=65536).contains(&n) {
            return Err(Error::config(format!(
                "he.ring_degree must be a power of two in [8, 65536], got {n}"
            )));
        }
        if moduli.is_empty() || moduli.len() > u8::MAX as usize {
            return Err(Error::config("he: need between 1 and 255 moduli"));
        }
        let mut product: u128 = 1;
        for (i, &q) in moduli.iter().enumerate() {
            if !is_prime(q) || q >= 1 << 62 {
                return Err(Error::config(format!("he: modulus {q} is not a prime below 2^62")));
            }
            if n >= NTT_THRESHOLD && q % (2 * n as u64) != 1 {
                return Err(Error::config(format!("he: modulus {q} is not 1 mod 2N")));
            }
            if moduli[..i].contains(&q) {
                return Err(Error::config(format!("he: modulus {q} repeated")));
            }
            product = product
                .checked_mul(q as u128)
                .filter(|p| *p < 1 << 126)
                .ok_or_else(|| Error::config("he: modulus product must stay below 2^126"))?;
        }
        let q_min = *moduli.iter().min().unwrap() as f64;
        if !(scale > 1.0 && scale < q_min) {
            return Err(Error::config(format!(
                "he.scale must be in (1, smallest modulus = {q_min}), got {scale}"
            )));
        }
        if !(value_bound > 0.0 && value_bound * scale < q_min / 2.0) {
            return Err(Error::config(format!(
                "he.value_bound must be positive with value_bound * scale < q_min / 2, got {value_bound}"
            )));
        }
        let log_q = (product as f64).log2();
        match grade {
            SecurityGrade::Hardened => {
                let limit = HARDENED_LOGQ.iter().find(|(deg, _)| *deg == n).map(|(_, b)| *b);
                match limit {
                    Some(max) if log_q <= max as f64 => {}
                    Some(max) => {
                        return Err(Error::config(format!(
                            "he.security_grade = hardened: log2(Q) = {log_q:.1} exceeds {max} for N = {n}"
                        )))
                    }
                    None => {
                        return Err(Error::config(format!(
                            "he.security_grade = hardened: no table entry for N = {n}"
                        )))
                    }
                }
            }
            SecurityGrade::Toy => TOY_WARNING.call_once(|| {
                log::warn!(
                    "CKKS parameters (N = {n}, log2 Q = {log_q:.1}) are for experimentation only \
                     and provide no security guarantee"
                )
            }),
        }
        let rings = moduli
            .iter()
            .map(|&q| RingMul::new(n, q))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::config("he: failed to build NTT tables"))?;
        let rescale_inv = (0..moduli.len())
            .map(|l| (0..l).map(|i| inv_mod(moduli[l] % moduli[i], moduli[i])).collect())
            .collect();
        Ok(Self {
            inner: Arc::new(Inner {
                ring_degree: n,
                moduli,
                scale,
                value_bound,
                grade,
                rings,
                encoder: Encoder::new(n),
                rescale_inv,
            }),
        })
    }

    pub fn ring_degree(&self) -> usize {
        self.inner.ring_degree
    }

    pub fn slot_count(&self) -> usize {
        self.inner.ring_degree / 2
    }

    pub fn moduli(&self) -> &[u64] {
        &self.inner.moduli
    }

    /// Level of a fresh ciphertext (number of moduli minus one).
    pub fn max_level(&self) -> usize {
        self.inner.moduli.len() - 1
    }

    pub fn scale(&self) -> f64 {
        self.inner.scale
    }

    pub fn value_bound(&self) -> f64 {
        self.inner.value_bound
    }

    pub fn security_grade(&self) -> SecurityGrade {
        self.inner.grade
    }

    pub(crate) fn ring(&self, limb: usize) -> &RingMul {
        &self.inner.rings[limb]
    }

    pub(crate) fn encoder(&self) -> &Encoder {
        &self.inner.encoder
    }

    pub(crate) fn rescale_inv(&self, level: usize, limb: usize) -> u64 {
        self.inner.rescale_inv[level][limb]
    }

    /// Serialized ciphertext size at `level`.
    pub fn ciphertext_bytes(&self, level: usize) -> usize {
        super::ciphertext::HEADER_BYTES + 2 * self.ring_degree() * (level + 1) * 8
    }
}

impl PartialEq for HeParams {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
            || (self.inner.ring_degree == other.inner.ring_degree
                && self.inner.moduli == other.inner.moduli
                && self.inner.scale == other.inner.scale)
    }
}

impl fmt::Debug for HeParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HeParams")
            .field("ring_degree", &self.inner.ring_degree)
            .field("moduli", &self.inner.moduli)
            .field("scale", &self.inner.scale)
            .field("value_bound", &self.inner.value_bound)
            .field("security_grade", &self.inner.grade)
            .finish()
    }
}
