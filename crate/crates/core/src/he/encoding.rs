//! Canonical-embedding slot packing: a vector of `N/2` reals becomes an
//! integer polynomial whose evaluations at the primitive roots `ζ^(5^j)`
//! equal `scale · v_j`.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::params::HeParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    n: usize,
    /// `5^j mod 2N`
    rot_group: Vec<usize>,
    /// `exp(2πi·k / 2N)` for `k ∈ [0, 2N]`
    ksi: Vec<Complex64>,
}

fn bit_reverse_permute(v: &mut [Complex64]) {
    let n = v.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            v.swap(i, j);
        }
    }
}

impl Encoder {
    pub(crate) fn new(n: usize) -> Self {
        let m = 2 * n;
        let slots = n / 2;
        let mut rot_group = Vec::with_capacity(slots);
        let mut g = 1;
        for _ in 0..slots {
            rot_group.push(g);
            g = g * 5 % m;
        }
        let ksi = (0..=m).map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / m as f64)).collect();
        Self { n, rot_group, ksi }
    }

    /// Slot values → complex coefficient pairs (inverse of [`Self::embed`]).
    fn project(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        let m = 2 * self.n;
        let mut len = size;
        while len >= 1 {
            let lenh = len >> 1;
            let lenq = len << 2;
            let gap = m / lenq;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (lenq - (self.rot_group[j] & (lenq - 1))) * gap;
                    let u = vals[i + j] + vals[i + j + lenh];
                    let v = (vals[i + j] - vals[i + j + lenh]) * self.ksi[idx];
                    vals[i + j] = u;
                    vals[i + j + lenh] = v;
                }
            }
            len >>= 1;
        }
        bit_reverse_permute(vals);
        let inv = 1.0 / size as f64;
        vals.iter_mut().for_each(|v| *v *= inv);
    }

    /// Complex coefficient pairs → slot values.
    fn embed(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        let m = 2 * self.n;
        bit_reverse_permute(vals);
        let mut len = 2;
        while len <= size {
            let lenh = len >> 1;
            let lenq = len << 2;
            let gap = m / lenq;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (self.rot_group[j] & (lenq - 1)) * gap;
                    let u = vals[i + j];
                    let v = vals[i + j + lenh] * self.ksi[idx];
                    vals[i + j] = u + v;
                    vals[i + j + lenh] = u - v;
                }
            }
            len <<= 1;
        }
    }
}

/// An encoded (or decrypted) message: signed polynomial coefficients at a scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Plaintext {
    pub coeffs: Vec<i128>,
    pub scale: f64,
}

/// Packs up to `slot_count` reals; unused slots are zero.
pub fn encode(values: &[f64], params: &HeParams) -> Result<Plaintext> {
    let slots = params.slot_count();
    if values.len() > slots {
        return Err(Error::precondition(format!(
            "cannot encode {} values into {slots} slots",
            values.len()
        )));
    }
    let bound = params.value_bound();
    if let Some(v) = values.iter().find(|v| !(v.abs() <= bound)) {
        return Err(Error::precondition(format!("value {v} exceeds the encoding bound {bound}")));
    }
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(slots, Complex64::new(0.0, 0.0));
    params.encoder().project(&mut buf);
    let scale = params.scale();
    let mut coeffs = vec![0i128; params.ring_degree()];
    for (j, z) in buf.iter().enumerate() {
        coeffs[j] = (z.re * scale).round() as i128;
        coeffs[j + slots] = (z.im * scale).round() as i128;
    }
    Ok(Plaintext { coeffs, scale: params.scale() })
}

/// All `slot_count` slot values (real parts).
pub fn decode(pt: &Plaintext, params: &HeParams) -> Result<Vec<f64>> {
    let n = params.ring_degree();
    if pt.coeffs.len() != n {
        return Err(Error::precondition(format!(
            "plaintext has {} coefficients, ring degree is {n}",
            pt.coeffs.len()
        )));
    }
    let slots = n / 2;
    let mut buf: Vec<Complex64> = (0..slots)
        .map(|j| Complex64::new(pt.coeffs[j] as f64 / pt.scale, pt.coeffs[j + slots] as f64 / pt.scale))
        .collect();
    params.encoder().embed(&mut buf);
    Ok(buf.into_iter().map(|z| z.re).collect())
}
