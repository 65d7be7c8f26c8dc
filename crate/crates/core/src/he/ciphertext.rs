use std::cell::Cell;

use rand::Rng;

use super::arith::{add_mod, inv_mod, mul_shoup, reduce_i128, reduce_i64, shoup_precompute, sub_mod};
use super::encoding::{decode, encode, Plaintext};
use super::keys::{sample_error, sample_ternary, to_limb, PublicKey, SecretKey};
use super::params::HeParams;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FHE1";
/// magic, ring_degree u32, moduli count u8, level u8, scale f64
pub const HEADER_BYTES: usize = 4 + 4 + 1 + 1 + 8;

thread_local! {
    static DECRYPT_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`decrypt`] calls made on the current thread.
pub fn decrypt_call_count() -> u64 {
    DECRYPT_CALLS.with(|c| c.get())
}

/// RNS ciphertext `(c0, c1)` in coefficient form; `c0[i]` is the residue
/// polynomial modulo prime `i`, for `i ∈ [0, level]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ciphertext {
    pub(crate) params: HeParams,
    pub(crate) c0: Vec<Vec<u64>>,
    pub(crate) c1: Vec<Vec<u64>>,
    pub scale: f64,
    pub level: usize,
}

impl Ciphertext {
    pub fn ring_degree(&self) -> usize {
        self.c0[0].len()
    }

    pub fn slot_count(&self) -> usize {
        self.ring_degree() / 2
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_BYTES + 2 * self.ring_degree() * (self.level + 1) * 8
    }
}

pub(crate) struct Header {
    pub ring_degree: usize,
    pub limbs: usize,
    pub level: u8,
    pub scale: f64,
}

pub(crate) fn write_header(out: &mut Vec<u8>, h: &Header) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h.ring_degree as u32).to_le_bytes());
    out.push(h.limbs as u8);
    out.push(h.level);
    out.extend_from_slice(&h.scale.to_le_bytes());
}

pub(crate) fn read_header<'a>(bytes: &'a [u8], params: &HeParams) -> Result<(Header, &'a [u8])> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::format(format!("buffer of {} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("bad magic, expected FHE1"));
    }
    let ring_degree = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if ring_degree != params.ring_degree() {
        return Err(Error::format(format!(
            "ring degree {ring_degree} does not match parameters ({})",
            params.ring_degree()
        )));
    }
    let header = Header {
        ring_degree,
        limbs: bytes[8] as usize,
        level: bytes[9],
        scale: f64::from_le_bytes(bytes[10..18].try_into().unwrap()),
    };
    Ok((header, &bytes[HEADER_BYTES..]))
}

pub fn encrypt<R: Rng + ?Sized>(pt: &Plaintext, pk: &PublicKey, params: &HeParams, rng: &mut R) -> Result<Ciphertext> {
    pk.check(params)?;
    let n = params.ring_degree();
    if pt.coeffs.len() != n {
        return Err(Error::crypto("plaintext does not match the ring degree"));
    }
    let u = sample_ternary(n, rng);
    let e0 = sample_error(n, rng);
    let e1 = sample_error(n, rng);
    let level = params.max_level();
    let mut c0 = Vec::with_capacity(level + 1);
    let mut c1 = Vec::with_capacity(level + 1);
    for (i, &q) in params.moduli().iter().enumerate() {
        let ring = params.ring(i);
        let u_prep = ring.prepare(&to_limb(&u, q));
        let mut b_u = ring.finish(ring.mul_fixed(&u_prep, &pk.b_prepared[i], &pk.b_shoup[i]));
        for ((x, &e), &m) in b_u.iter_mut().zip(&e0).zip(&pt.coeffs) {
            *x = add_mod(add_mod(*x, reduce_i64(e, q), q), reduce_i128(m, q), q);
        }
        let mut a_u = ring.finish(ring.mul_fixed(&u_prep, &pk.a_prepared[i], &pk.a_shoup[i]));
        for (x, &e) in a_u.iter_mut().zip(&e1) {
            *x = add_mod(*x, reduce_i64(e, q), q);
        }
        c0.push(b_u);
        c1.push(a_u);
    }
    Ok(Ciphertext { params: params.clone(), c0, c1, scale: pt.scale, level })
}

fn check_ciphertext(ct: &Ciphertext, params: &HeParams) -> Result<()> {
    let n = params.ring_degree();
    if ct.params != *params
        || ct.level > params.max_level()
        || ct.c0.len() != ct.level + 1
        || ct.c1.len() != ct.level + 1
        || ct.c0.iter().chain(&ct.c1).any(|p| p.len() != n)
    {
        return Err(Error::crypto("ciphertext does not match the parameters"));
    }
    Ok(())
}

/// `c0 + c1·s`, recombined across limbs and centred.
pub fn decrypt(ct: &Ciphertext, sk: &SecretKey, params: &HeParams) -> Result<Plaintext> {
    sk.check(params)?;
    check_ciphertext(ct, params)?;
    DECRYPT_CALLS.with(|c| c.set(c.get() + 1));
    let moduli = &params.moduli()[..=ct.level];
    let residues: Vec<Vec<u64>> = moduli
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let ring = params.ring(i);
            let mut m = ring.finish(ring.mul_fixed(&ring.prepare(&ct.c1[i]), &sk.prepared[i], &sk.prepared_shoup[i]));
            for (x, &c) in m.iter_mut().zip(&ct.c0[i]) {
                *x = add_mod(*x, c, q);
            }
            m
        })
        .collect();
    // Garner: x = r0 + q0·(t1 + q1·(t2 + ...))
    let mut prefix: Vec<u128> = vec![1];
    let mut garner_inv = vec![(0u64, 0u64)];
    for i in 1..moduli.len() {
        let p = prefix[i - 1] * moduli[i - 1] as u128;
        prefix.push(p);
        let g = inv_mod((p % moduli[i] as u128) as u64, moduli[i]);
        garner_inv.push((g, shoup_precompute(g, moduli[i])));
    }
    let big_q = prefix[moduli.len() - 1] * moduli[moduli.len() - 1] as u128;
    let coeffs = (0..params.ring_degree())
        .map(|k| {
            let mut x: u128 = residues[0][k] as u128;
            for i in 1..moduli.len() {
                let q = moduli[i];
                let x_mod = if x < q as u128 { x as u64 } else { (x % q as u128) as u64 };
                let diff = sub_mod(residues[i][k], x_mod, q);
                let (g, gs) = garner_inv[i];
                let t = mul_shoup(diff, g, gs, q);
                x += prefix[i] * t as u128;
            }
            if x > big_q / 2 {
                -((big_q - x) as i128)
            } else {
                x as i128
            }
        })
        .collect();
    Ok(Plaintext { coeffs, scale: ct.scale })
}

pub fn ct_add(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    if a.params != b.params || a.level != b.level || a.scale != b.scale {
        return Err(Error::crypto(format!(
            "ct_add operands differ: level {} vs {}, scale {} vs {}",
            a.level, b.level, a.scale, b.scale
        )));
    }
    let add = |x: &[Vec<u64>], y: &[Vec<u64>]| -> Vec<Vec<u64>> {
        x.iter()
            .zip(y)
            .zip(a.params.moduli())
            .map(|((p, r), &q)| p.iter().zip(r).map(|(&u, &v)| add_mod(u, v, q)).collect())
            .collect()
    };
    Ok(Ciphertext {
        params: a.params.clone(),
        c0: add(&a.c0, &b.c0),
        c1: add(&a.c1, &b.c1),
        scale: a.scale,
        level: a.level,
    })
}

/// Sum of a non-empty list, folded left to right.
pub fn ct_sum(cts: &[Ciphertext]) -> Result<Ciphertext> {
    let (first, rest) = cts.split_first().ok_or_else(|| Error::crypto("ct_sum of an empty list"))?;
    rest.iter().try_fold(first.clone(), |acc, ct| ct_add(&acc, ct))
}

/// Multiplies by a real scalar and rescales, consuming one level. The
/// output scale equals the input scale.
pub fn ct_mul_plain(ct: &Ciphertext, scalar: f64) -> Result<Ciphertext> {
    let params = &ct.params;
    if !(scalar.abs() <= params.value_bound()) {
        return Err(Error::precondition(format!(
            "scalar {scalar} exceeds the value bound {}",
            params.value_bound()
        )));
    }
    if ct.level == 0 {
        return Err(Error::crypto("level exhausted: ct_mul_plain needs a ciphertext above level 0"));
    }
    let top = ct.level;
    let q_top = params.moduli()[top];
    let c = (scalar * q_top as f64).round() as i128;
    let rescale = |poly: &[Vec<u64>]| -> Vec<Vec<u64>> {
        let last: Vec<i64> = {
            let cm = reduce_i128(c, q_top);
            let cs = shoup_precompute(cm, q_top);
            poly[top]
                .iter()
                .map(|&x| {
                    let r = mul_shoup(x, cm, cs, q_top);
                    if r > q_top / 2 {
                        r as i64 - q_top as i64
                    } else {
                        r as i64
                    }
                })
                .collect()
        };
        (0..top)
            .map(|i| {
                let q = params.moduli()[i];
                let cm = reduce_i128(c, q);
                let cs = shoup_precompute(cm, q);
                let inv = params.rescale_inv(top, i);
                let is = shoup_precompute(inv, q);
                poly[i]
                    .iter()
                    .zip(&last)
                    .map(|(&x, &r)| mul_shoup(sub_mod(mul_shoup(x, cm, cs, q), reduce_i64(r, q), q), inv, is, q))
                    .collect()
            })
            .collect()
    };
    Ok(Ciphertext {
        params: params.clone(),
        c0: rescale(&ct.c0),
        c1: rescale(&ct.c1),
        scale: ct.scale,
        level: top - 1,
    })
}

pub fn serialize(ct: &Ciphertext) -> Vec<u8> {
    let mut out = Vec::with_capacity(ct.serialized_len());
    write_ciphertext(ct, &mut out).expect("writing to a Vec cannot fail");
    out
}

/// Streams the wire form: header, then `c0` limbs `0..=level`, then `c1`
/// limbs, each coefficient as little-endian u64.
pub fn write_ciphertext<W: std::io::Write>(ct: &Ciphertext, w: &mut W) -> std::io::Result<()> {
    let mut header = Vec::with_capacity(HEADER_BYTES);
    write_header(
        &mut header,
        &Header { ring_degree: ct.ring_degree(), limbs: ct.level + 1, level: ct.level as u8, scale: ct.scale },
    );
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(ct.ring_degree() * 8);
    for poly in ct.c0.iter().chain(&ct.c1) {
        buf.clear();
        for &c in poly {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn deserialize(bytes: &[u8], params: &HeParams) -> Result<Ciphertext> {
    let (h, body) = read_header(bytes, params)?;
    let level = h.level as usize;
    if h.limbs == 0 || h.limbs > params.moduli().len() || level + 1 != h.limbs {
        return Err(Error::format(format!("invalid limb count {} / level {}", h.limbs, h.level)));
    }
    if !(h.scale.is_finite() && h.scale > 0.0) {
        return Err(Error::format(format!("invalid scale {}", h.scale)));
    }
    let n = params.ring_degree();
    let expected = 2 * n * h.limbs * 8;
    if body.len() != expected {
        return Err(Error::format(format!("ciphertext body has {} bytes, expected {expected}", body.len())));
    }
    let mut words = body.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()));
    let mut read_poly = |q: u64| -> Result<Vec<u64>> {
        let p: Vec<u64> = words.by_ref().take(n).collect();
        if let Some(c) = p.iter().find(|&&c| c >= q) {
            return Err(Error::format(format!("coefficient {c} not reduced mod {q}")));
        }
        Ok(p)
    };
    let moduli = &params.moduli()[..h.limbs];
    let c0 = moduli.iter().map(|&q| read_poly(q)).collect::<Result<Vec<_>>>()?;
    let c1 = moduli.iter().map(|&q| read_poly(q)).collect::<Result<Vec<_>>>()?;
    Ok(Ciphertext { params: params.clone(), c0, c1, scale: h.scale, level })
}

/// Encrypts `values` in consecutive blocks of `slot_count`.
pub fn chunk_encrypt<R: Rng + ?Sized>(
    values: &[f32],
    pk: &PublicKey,
    params: &HeParams,
    rng: &mut R,
) -> Result<Vec<Ciphertext>> {
    values
        .chunks(params.slot_count())
        .map(|chunk| {
            let v: Vec<f64> = chunk.iter().map(|&x| x as f64).collect();
            encrypt(&encode(&v, params)?, pk, params, rng)
        })
        .collect()
}

pub fn chunk_count(len: usize, params: &HeParams) -> usize {
    len.div_ceil(params.slot_count())
}

pub fn chunk_decrypt(
    cts: &[Ciphertext],
    sk: &SecretKey,
    params: &HeParams,
    original_length: usize,
) -> Result<Vec<f32>> {
    let expected = chunk_count(original_length, params);
    if cts.len() != expected {
        return Err(Error::precondition(format!(
            "{} ciphertexts cannot hold {original_length} values (expected {expected})",
            cts.len()
        )));
    }
    let mut out = Vec::with_capacity(original_length);
    for ct in cts {
        let slots = decode(&decrypt(ct, sk, params)?, params)?;
        let take = (original_length - out.len()).min(slots.len());
        out.extend(slots[..take].iter().map(|&v| v as f32));
    }
    Ok(out)
}
