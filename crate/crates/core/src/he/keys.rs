use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::arith::{add_mod, neg_mod, reduce_i64};
use super::ciphertext::{read_header, write_header, Header};
use super::params::HeParams;
use crate::error::{Error, Result};

pub const NOISE_STDDEV: f64 = 3.2;

/// Coefficients in {-1, 0, 1} with P(0) = 1/2.
pub(crate) fn sample_ternary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<i64> {
    (0..n)
        .map(|_| match rng.random_range(0..4u8) {
            0 => -1,
            1 => 1,
            _ => 0,
        })
        .collect()
}

/// Rounded Gaussian, truncated at six standard deviations.
pub(crate) fn sample_error<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<i64> {
    let normal = Normal::new(0.0, NOISE_STDDEV).unwrap();
    let cap = (6.0 * NOISE_STDDEV).round();
    (0..n).map(|_| normal.sample(rng).round().clamp(-cap, cap) as i64).collect()
}

pub(crate) fn to_limb(small: &[i64], q: u64) -> Vec<u64> {
    small.iter().map(|&v| reduce_i64(v, q)).collect()
}

fn companions(prepared: &[Vec<u64>], params: &HeParams) -> Vec<Vec<u64>> {
    prepared.iter().enumerate().map(|(i, p)| params.ring(i).companion(p)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecretKey {
    /// Ternary coefficients.
    pub(crate) s: Vec<i64>,
    /// `s` prepared for multiplication, per limb, with Shoup companions.
    pub(crate) prepared: Vec<Vec<u64>>,
    pub(crate) prepared_shoup: Vec<Vec<u64>>,
    pub(crate) moduli: Vec<u64>,
}

/// `(b, a)` with `b = −a·s + e`; stored per limb in coefficient form with a
/// prepared copy for encryption.
#[derive(Debug, Clone, PartialEq)]
pub struct PublicKey {
    pub(crate) b: Vec<Vec<u64>>,
    pub(crate) a: Vec<Vec<u64>>,
    pub(crate) b_prepared: Vec<Vec<u64>>,
    pub(crate) a_prepared: Vec<Vec<u64>>,
    pub(crate) b_shoup: Vec<Vec<u64>>,
    pub(crate) a_shoup: Vec<Vec<u64>>,
    pub(crate) moduli: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyPair {
    pub secret_key: SecretKey,
    pub public_key: PublicKey,
}

impl SecretKey {
    fn from_coeffs(s: Vec<i64>, params: &HeParams) -> Self {
        let prepared: Vec<Vec<u64>> = params
            .moduli()
            .iter()
            .enumerate()
            .map(|(i, &q)| params.ring(i).prepare(&to_limb(&s, q)))
            .collect();
        let prepared_shoup = companions(&prepared, params);
        Self { s, prepared, prepared_shoup, moduli: params.moduli().to_vec() }
    }

    pub(crate) fn check(&self, params: &HeParams) -> Result<()> {
        if self.moduli != params.moduli() || self.s.len() != params.ring_degree() {
            return Err(Error::crypto("secret key was generated for different parameters"));
        }
        Ok(())
    }
}

impl PublicKey {
    fn from_parts(b: Vec<Vec<u64>>, a: Vec<Vec<u64>>, params: &HeParams) -> Self {
        let prep = |polys: &[Vec<u64>]| -> Vec<Vec<u64>> {
            polys.iter().enumerate().map(|(i, p)| params.ring(i).prepare(p)).collect()
        };
        let (b_prepared, a_prepared) = (prep(&b), prep(&a));
        Self {
            b_shoup: companions(&b_prepared, params),
            a_shoup: companions(&a_prepared, params),
            b_prepared,
            a_prepared,
            b,
            a,
            moduli: params.moduli().to_vec(),
        }
    }

    pub(crate) fn check(&self, params: &HeParams) -> Result<()> {
        if self.moduli != params.moduli() || self.a[0].len() != params.ring_degree() {
            return Err(Error::crypto("public key was generated for different parameters"));
        }
        Ok(())
    }
}

/// Deterministic in `seed`.
pub fn keygen(params: &HeParams, seed: u64) -> Result<KeyPair> {
    let n = params.ring_degree();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let secret_key = SecretKey::from_coeffs(sample_ternary(n, &mut rng), params);
    let e = sample_error(n, &mut rng);
    let mut b = Vec::new();
    let mut a = Vec::new();
    for (i, &q) in params.moduli().iter().enumerate() {
        let ring = params.ring(i);
        let a_i: Vec<u64> = (0..n).map(|_| rng.random_range(0..q)).collect();
        let as_i = ring.finish(ring.mul_prepared(&ring.prepare(&a_i), &secret_key.prepared[i]));
        let b_i = as_i
            .iter()
            .zip(&e)
            .map(|(&x, &err)| add_mod(neg_mod(x, q), reduce_i64(err, q), q))
            .collect();
        b.push(b_i);
        a.push(a_i);
    }
    let public_key = PublicKey::from_parts(b, a, params);
    Ok(KeyPair { secret_key, public_key })
}

const PUBLIC_KEY_TAG: u8 = 0xFE;
const SECRET_KEY_TAG: u8 = 0xFF;

fn write_limbs(out: &mut Vec<u8>, polys: &[Vec<u64>]) {
    for p in polys {
        for &c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
}

fn read_limbs(body: &[u8], n: usize, moduli: &[u64]) -> Result<Vec<Vec<u64>>> {
    let mut polys = Vec::with_capacity(moduli.len());
    for (i, &q) in moduli.iter().enumerate() {
        let mut p = Vec::with_capacity(n);
        for k in 0..n {
            let at = (i * n + k) * 8;
            let c = u64::from_le_bytes(body[at..at + 8].try_into().unwrap());
            if c >= q {
                return Err(Error::format(format!("key coefficient {c} not reduced mod {q}")));
            }
            p.push(c);
        }
        polys.push(p);
    }
    Ok(polys)
}

/// Key files share the ciphertext header; the level byte holds `0xFE`
/// (public key: `b` limbs then `a` limbs) or `0xFF` (secret key: residues of
/// `s` per limb), and the scale field is 0.
pub fn serialize_public_key(pk: &PublicKey) -> Vec<u8> {
    let n = pk.a[0].len();
    let mut out = Vec::new();
    write_header(&mut out, &Header { ring_degree: n, limbs: pk.moduli.len(), level: PUBLIC_KEY_TAG, scale: 0.0 });
    write_limbs(&mut out, &pk.b);
    write_limbs(&mut out, &pk.a);
    out
}

pub fn deserialize_public_key(bytes: &[u8], params: &HeParams) -> Result<PublicKey> {
    let (header, body) = read_header(bytes, params)?;
    let n = params.ring_degree();
    let moduli = params.moduli();
    if header.level != PUBLIC_KEY_TAG || header.limbs != moduli.len() {
        return Err(Error::format("not a public key for these parameters"));
    }
    let half = n * moduli.len() * 8;
    if body.len() != 2 * half {
        return Err(Error::format(format!("public key body has {} bytes, expected {}", body.len(), 2 * half)));
    }
    let b = read_limbs(&body[..half], n, moduli)?;
    let a = read_limbs(&body[half..], n, moduli)?;
    Ok(PublicKey::from_parts(b, a, params))
}

pub fn serialize_secret_key(sk: &SecretKey) -> Vec<u8> {
    let n = sk.s.len();
    let mut out = Vec::new();
    write_header(&mut out, &Header { ring_degree: n, limbs: sk.moduli.len(), level: SECRET_KEY_TAG, scale: 0.0 });
    let limbs: Vec<Vec<u64>> = sk.moduli.iter().map(|&q| to_limb(&sk.s, q)).collect();
    write_limbs(&mut out, &limbs);
    out
}

pub fn deserialize_secret_key(bytes: &[u8], params: &HeParams) -> Result<SecretKey> {
    let (header, body) = read_header(bytes, params)?;
    let n = params.ring_degree();
    let moduli = params.moduli();
    if header.level != SECRET_KEY_TAG || header.limbs != moduli.len() {
        return Err(Error::format("not a secret key for these parameters"));
    }
    if body.len() != n * moduli.len() * 8 {
        return Err(Error::format("secret key body has the wrong length"));
    }
    let limbs = read_limbs(body, n, moduli)?;
    let q0 = moduli[0];
    let s = limbs[0]
        .iter()
        .map(|&c| match c {
            0 => Ok(0),
            1 => Ok(1),
            c if c == q0 - 1 => Ok(-1),
            _ => Err(Error::format("secret key coefficient is not ternary")),
        })
        .collect::<Result<Vec<i64>>>()?;
    let key = SecretKey::from_coeffs(s, params);
    for (i, &q) in moduli.iter().enumerate() {
        if to_limb(&key.s, q) != limbs[i] {
            return Err(Error::format("secret key limbs disagree"));
        }
    }
    Ok(key)
}

/// `b + a·s` per limb; should be the small error `e`.
#[cfg(test)]
pub(crate) fn public_key_residual(kp: &KeyPair, params: &HeParams, limb: usize) -> Vec<i64> {
    let q = params.moduli()[limb];
    let ring = params.ring(limb);
    let as_ = ring.finish(ring.mul_prepared(&kp.public_key.a_prepared[limb], &kp.secret_key.prepared[limb]));
    kp.public_key.b[limb]
        .iter()
        .zip(&as_)
        .map(|(&b, &x)| {
            let r = add_mod(b, x, q);
            if r > q / 2 {
                r as i64 - q as i64
            } else {
                r as i64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::params::HeConfig;

    fn params(n: usize) -> HeParams {
        HeParams::new(&HeConfig { ring_degree: n, ..HeConfig::default() }).unwrap()
    }

    #[test]
    fn keygen_is_deterministic() {
        let p = params(1024);
        assert_eq!(keygen(&p, 5).unwrap(), keygen(&p, 5).unwrap());
    }

    #[test]
    fn different_seeds_give_different_public_keys() {
        let p = params(1024);
        let a = serialize_public_key(&keygen(&p, 1).unwrap().public_key);
        let b = serialize_public_key(&keygen(&p, 2).unwrap().public_key);
        assert_eq!(a.len(), b.len());
        assert_ne!(a, b);
    }

    #[test]
    fn public_key_relation_holds() {
        for n in [16, 1024] {
            let p = params(n);
            let kp = keygen(&p, 9).unwrap();
            for limb in 0..p.moduli().len() {
                let r = public_key_residual(&kp, &p, limb);
                assert!(r.iter().all(|v| v.abs() <= 20), "n = {n}");
            }
        }
    }

    #[test]
    fn key_files_roundtrip() {
        let p = params(64);
        let kp = keygen(&p, 3).unwrap();
        let pk_bytes = serialize_public_key(&kp.public_key);
        assert_eq!(pk_bytes.len(), 18 + 2 * 64 * 2 * 8);
        assert_eq!(deserialize_public_key(&pk_bytes, &p).unwrap(), kp.public_key);
        let sk_bytes = serialize_secret_key(&kp.secret_key);
        assert_eq!(deserialize_secret_key(&sk_bytes, &p).unwrap(), kp.secret_key);
        assert!(deserialize_secret_key(&pk_bytes, &p).is_err());
        assert!(deserialize_public_key(&pk_bytes[..pk_bytes.len() - 1], &p).is_err());
    }

    #[test]
    fn ternary_distribution() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let s = sample_ternary(40_000, &mut rng);
        let zeros = s.iter().filter(|&&v| v == 0).count() as f64 / 40_000.0;
        assert!((zeros - 0.5).abs() < 0.02);
        assert!(s.iter().all(|v| (-1..=1).contains(v)));
    }
}
