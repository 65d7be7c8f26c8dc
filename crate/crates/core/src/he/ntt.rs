//! Negacyclic polynomial multiplication in `Z_q[X]/(X^N + 1)`.

use super::arith::{
    add_mod, inv_mod, mul_mod, mul_shoup, mul_shoup_lazy, pow_mod, primitive_root_2n,
    shoup_precompute, sub_mod,
};

/// Rings at least this large multiply through the NTT; smaller ones use the
/// schoolbook product.
pub const NTT_THRESHOLD: usize = 512;

fn bit_reverse(mut x: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (x & 1);
        x >>= 1;
    }
    r
}

/// Twiddle tables for the merged (ψ-twisted) negacyclic NTT.
#[derive(Debug, Clone)]
pub struct NttTable {
    n: usize,
    q: u64,
    psi_rev: Vec<u64>,
    psi_rev_shoup: Vec<u64>,
    psi_inv_rev: Vec<u64>,
    psi_inv_rev_shoup: Vec<u64>,
    n_inv: u64,
    n_inv_shoup: u64,
}

impl NttTable {
    pub fn new(n: usize, q: u64) -> Option<Self> {
        if !n.is_power_of_two() || n < 2 {
            return None;
        }
        let psi = primitive_root_2n(n, q)?;
        let psi_inv = inv_mod(psi, q);
        let bits = n.trailing_zeros();
        let mut psi_rev = vec![0; n];
        let mut psi_inv_rev = vec![0; n];
        for i in 0..n {
            let r = bit_reverse(i, bits) as u64;
            psi_rev[i] = pow_mod(psi, r, q);
            psi_inv_rev[i] = pow_mod(psi_inv, r, q);
        }
        let psi_rev_shoup = psi_rev.iter().map(|&w| shoup_precompute(w, q)).collect();
        let psi_inv_rev_shoup = psi_inv_rev.iter().map(|&w| shoup_precompute(w, q)).collect();
        let n_inv = inv_mod(n as u64, q);
        Some(Self {
            n,
            q,
            psi_rev,
            psi_rev_shoup,
            psi_inv_rev,
            psi_inv_rev_shoup,
            n_inv,
            n_inv_shoup: shoup_precompute(n_inv, q),
        })
    }

    /// In-place forward transform (Cooley–Tukey, bit-reversed output).
    /// Butterflies are lazy: values stay in `[0, 4q)` until a final
    /// correction, which needs `q < 2^62`.
    pub fn forward(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = self.q;
        let two_q = 2 * q;
        let mut t = self.n;
        let mut m = 1;
        while m < self.n {
            t >>= 1;
            let ws = &self.psi_rev[m..2 * m];
            let wss = &self.psi_rev_shoup[m..2 * m];
            for ((block, &w), &w_shoup) in a.chunks_exact_mut(2 * t).zip(ws).zip(wss) {
                let (lo, hi) = block.split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let mut u = *x;
                    if u >= two_q {
                        u -= two_q;
                    }
                    let v = mul_shoup_lazy(*y, w, w_shoup, q);
                    *x = u + v;
                    *y = u + two_q - v;
                }
            }
            m <<= 1;
        }
        for x in a.iter_mut() {
            let mut v = *x;
            if v >= two_q {
                v -= two_q;
            }
            if v >= q {
                v -= q;
            }
            *x = v;
        }
    }

    /// In-place inverse transform (Gentleman–Sande), including the 1/N factor.
    /// Lazy in `[0, 2q)` between stages.
    pub fn inverse(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = self.q;
        let two_q = 2 * q;
        let mut t = 1;
        let mut m = self.n;
        while m > 1 {
            let h = m >> 1;
            let ws = &self.psi_inv_rev[h..m];
            let wss = &self.psi_inv_rev_shoup[h..m];
            for ((block, &w), &w_shoup) in a.chunks_exact_mut(2 * t).zip(ws).zip(wss) {
                let (lo, hi) = block.split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let (u, v) = (*x, *y);
                    let mut s = u + v;
                    if s >= two_q {
                        s -= two_q;
                    }
                    *x = s;
                    *y = mul_shoup_lazy(u + two_q - v, w, w_shoup, q);
                }
            }
            t <<= 1;
            m = h;
        }
        for v in a.iter_mut() {
            *v = mul_shoup(*v, self.n_inv, self.n_inv_shoup, q);
        }
    }
}

/// Direct `O(N²)` negacyclic product.
pub fn schoolbook_negacyclic(a: &[u64], b: &[u64], q: u64) -> Vec<u64> {
    let n = a.len();
    let mut out = vec![0u64; n];
    for i in 0..n {
        if a[i] == 0 {
            continue;
        }
        for j in 0..n {
            let p = mul_mod(a[i], b[j], q);
            let k = i + j;
            if k < n {
                out[k] = add_mod(out[k], p, q);
            } else {
                out[k - n] = sub_mod(out[k - n], p, q);
            }
        }
    }
    out
}

/// Ring multiplication for one RNS limb. Operands are first *prepared*
/// (transformed to the evaluation domain when the NTT is in use), multiplied
/// in prepared form, then *finished* back to coefficients.
#[derive(Debug, Clone)]
pub enum RingMul {
    Ntt(NttTable),
    Schoolbook { q: u64 },
}

impl RingMul {
    pub fn new(n: usize, q: u64) -> Option<Self> {
        if n >= NTT_THRESHOLD {
            NttTable::new(n, q).map(RingMul::Ntt)
        } else {
            Some(RingMul::Schoolbook { q })
        }
    }

    pub fn prepare(&self, coeffs: &[u64]) -> Vec<u64> {
        let mut v = coeffs.to_vec();
        if let RingMul::Ntt(t) = self {
            t.forward(&mut v);
        }
        v
    }

    pub fn mul_prepared(&self, a: &[u64], b: &[u64]) -> Vec<u64> {
        match self {
            RingMul::Ntt(t) => a.iter().zip(b).map(|(&x, &y)| mul_mod(x, y, t.q)).collect(),
            RingMul::Schoolbook { q } => schoolbook_negacyclic(a, b, *q),
        }
    }

    /// Shoup companions of a prepared operand that will be reused many times
    /// (keys). Empty for the schoolbook ring.
    pub fn companion(&self, prepared: &[u64]) -> Vec<u64> {
        match self {
            RingMul::Ntt(t) => prepared.iter().map(|&w| shoup_precompute(w, t.q)).collect(),
            RingMul::Schoolbook { .. } => Vec::new(),
        }
    }

    /// `mul_prepared(a, fixed)` where `fixed_shoup = companion(fixed)`.
    pub fn mul_fixed(&self, a: &[u64], fixed: &[u64], fixed_shoup: &[u64]) -> Vec<u64> {
        match self {
            RingMul::Ntt(t) => a
                .iter()
                .zip(fixed)
                .zip(fixed_shoup)
                .map(|((&x, &w), &ws)| mul_shoup(x, w, ws, t.q))
                .collect(),
            RingMul::Schoolbook { q } => schoolbook_negacyclic(a, fixed, *q),
        }
    }

    pub fn finish(&self, mut v: Vec<u64>) -> Vec<u64> {
        if let RingMul::Ntt(t) = self {
            t.inverse(&mut v);
        }
        v
    }

    #[cfg(test)]
    pub fn multiply(&self, a: &[u64], b: &[u64]) -> Vec<u64> {
        self.finish(self.mul_prepared(&self.prepare(a), &self.prepare(b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::arith::ntt_primes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_inverse_roundtrip() {
        let n = 1024;
        let q = ntt_primes(&[50], n).unwrap()[0];
        let table = NttTable::new(n, q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let orig: Vec<u64> = (0..n).map(|_| rng.random_range(0..q)).collect();
        let mut v = orig.clone();
        table.forward(&mut v);
        assert_ne!(v, orig);
        table.inverse(&mut v);
        assert_eq!(v, orig);
    }

    #[test]
    fn ntt_product_matches_schoolbook() {
        for (n, bits) in [(8usize, 45), (64, 61), (512, 45), (1024, 61)] {
            let q = ntt_primes(&[bits], n).unwrap()[0];
            let table = RingMul::Ntt(NttTable::new(n, q).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let a: Vec<u64> = (0..n).map(|_| rng.random_range(0..q)).collect();
            let b: Vec<u64> = (0..n).map(|_| rng.random_range(0..q)).collect();
            assert_eq!(table.multiply(&a, &b), schoolbook_negacyclic(&a, &b, q), "n = {n}");
            let (pa, pb) = (table.prepare(&a), table.prepare(&b));
            assert_eq!(table.mul_fixed(&pa, &pb, &table.companion(&pb)), table.mul_prepared(&pa, &pb));
        }
    }

    #[test]
    fn schoolbook_wraps_negatively() {
        // X^(n-1) * X = X^n = -1
        let q = 97;
        let mut a = vec![0; 4];
        a[3] = 1;
        let mut b = vec![0; 4];
        b[1] = 1;
        assert_eq!(schoolbook_negacyclic(&a, &b, q), vec![96, 0, 0, 0]);
    }

    #[test]
    fn small_rings_use_schoolbook() {
        assert!(matches!(RingMul::new(256, 7681).unwrap(), RingMul::Schoolbook { .. }));
        let q = ntt_primes(&[40], 512).unwrap()[0];
        assert!(matches!(RingMul::new(512, q).unwrap(), RingMul::Ntt(_)));
    }
}
