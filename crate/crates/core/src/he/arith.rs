//! Word-sized modular arithmetic for moduli below 2^62.

#[inline]
pub fn add_mod(a: u64, b: u64, q: u64) -> u64 {
    // Branch-free: residues are effectively random, so branches mispredict.
    let s = a + b;
    s - (q & 0u64.wrapping_sub((s >= q) as u64))
}

#[inline]
pub fn sub_mod(a: u64, b: u64, q: u64) -> u64 {
    a.wrapping_sub(b).wrapping_add(q & 0u64.wrapping_sub((a < b) as u64))
}

#[inline]
pub fn neg_mod(a: u64, q: u64) -> u64 {
    if a == 0 {
        0
    } else {
        q - a
    }
}

#[inline]
pub fn mul_mod(a: u64, b: u64, q: u64) -> u64 {
    ((a as u128 * b as u128) % q as u128) as u64
}

pub fn pow_mod(mut base: u64, mut exp: u64, q: u64) -> u64 {
    let mut acc = 1 % q;
    base %= q;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, q);
        }
        base = mul_mod(base, base, q);
        exp >>= 1;
    }
    acc
}

/// Inverse modulo a prime.
pub fn inv_mod(a: u64, q: u64) -> u64 {
    pow_mod(a, q - 2, q)
}

/// Reduces a signed value into `[0, q)`.
#[inline]
pub fn reduce_i64(v: i64, q: u64) -> u64 {
    let mag = v.unsigned_abs();
    if mag < q {
        if v >= 0 {
            mag
        } else {
            neg_mod(mag, q)
        }
    } else {
        v.rem_euclid(q as i64) as u64
    }
}

#[inline]
pub fn reduce_i128(v: i128, q: u64) -> u64 {
    match i64::try_from(v) {
        Ok(small) => reduce_i64(small, q),
        Err(_) => v.rem_euclid(q as i128) as u64,
    }
}

/// Precomputed `floor(w · 2^64 / q)` for Shoup multiplication by a fixed `w`.
#[inline]
pub fn shoup_precompute(w: u64, q: u64) -> u64 {
    (((w as u128) << 64) / q as u128) as u64
}

/// `a · w mod q` up to one extra `q`: result in `[0, 2q)` for any `a`, given
/// `q < 2^62`.
#[inline]
pub fn mul_shoup_lazy(a: u64, w: u64, w_shoup: u64, q: u64) -> u64 {
    let qhat = ((a as u128 * w_shoup as u128) >> 64) as u64;
    a.wrapping_mul(w).wrapping_sub(qhat.wrapping_mul(q))
}

/// `a · w mod q` for `a < q < 2^62` using the Shoup companion of `w`.
#[inline]
pub fn mul_shoup(a: u64, w: u64, w_shoup: u64, q: u64) -> u64 {
    let qhat = ((a as u128 * w_shoup as u128) >> 64) as u64;
    let r = a.wrapping_mul(w).wrapping_sub(qhat.wrapping_mul(q));
    r - (q & 0u64.wrapping_sub((r >= q) as u64))
}

/// Deterministic Miller–Rabin for 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for p in BASES {
        if n % p == 0 {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'witness: for a in BASES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Largest primes `q < 2^bits` with `q ≡ 1 (mod 2·ring_degree)`, one per entry
/// of `bits`, all distinct.
pub fn ntt_primes(bits: &[u32], ring_degree: usize) -> Option<Vec<u64>> {
    let step = 2 * ring_degree as u64;
    let mut out: Vec<u64> = Vec::with_capacity(bits.len());
    for &b in bits {
        if !(10..=61).contains(&b) {
            return None;
        }
        let top = (1u64 << b) - 1;
        let mut q = top - (top - 1) % step;
        loop {
            if q <= step {
                return None;
            }
            if is_prime(q) && !out.contains(&q) {
                out.push(q);
                break;
            }
            q -= step;
        }
    }
    Some(out)
}

/// Smallest-base primitive `2n`-th root of unity modulo `q`.
pub fn primitive_root_2n(n: usize, q: u64) -> Option<u64> {
    let order = 2 * n as u64;
    if (q - 1) % order != 0 {
        return None;
    }
    let cofactor = (q - 1) / order;
    (2..q.min(1 << 20))
        .map(|x| pow_mod(x, cofactor, q))
        .find(|&g| pow_mod(g, n as u64, q) == q - 1)
}
