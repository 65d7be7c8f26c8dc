//! Timing helpers for the benchmark subcommands.

use std::time::Instant;

use fednca::he::{self, HeParams, KeyPair};
use fednca::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// One encrypt-then-decrypt pass over a vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeRun {
    pub ciphertexts: usize,
    pub bytes: u64,
    pub encrypt_s: f64,
    pub decrypt_s: f64,
    pub max_abs_error: f64,
}

/// Encrypts and decrypts `values` one ciphertext at a time, so memory stays
/// at a single ciphertext regardless of the vector length. Only the
/// encode+encrypt and decrypt+decode calls are timed.
pub fn he_stream(values: &[f32], params: &HeParams, keys: &KeyPair, seed: u64) -> Result<HeRun> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut run = HeRun { ciphertexts: 0, bytes: 0, encrypt_s: 0.0, decrypt_s: 0.0, max_abs_error: 0.0 };
    for chunk in values.chunks(params.slot_count()) {
        let t = Instant::now();
        let cts = he::chunk_encrypt(chunk, &keys.public_key, params, &mut rng)?;
        run.encrypt_s += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let back = he::chunk_decrypt(&cts, &keys.secret_key, params, chunk.len())?;
        run.decrypt_s += t.elapsed().as_secs_f64();
        run.ciphertexts += cts.len();
        run.bytes += cts.iter().map(|c| c.serialized_len() as u64).sum::<u64>();
        for (a, b) in chunk.iter().zip(&back) {
            run.max_abs_error = run.max_abs_error.max((a - b).abs() as f64);
        }
    }
    Ok(run)
}

/// Median encrypt and decrypt seconds over `repeats` streamed passes, plus
/// the last pass's counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeTiming {
    pub ciphertexts: usize,
    pub bytes: u64,
    pub encrypt_s: f64,
    pub decrypt_s: f64,
    pub total_s: f64,
    pub max_abs_error: f64,
}

pub fn he_timing(values: &[f32], params: &HeParams, keys: &KeyPair, repeats: usize, seed: u64) -> Result<HeTiming> {
    let mut enc = Vec::with_capacity(repeats);
    let mut dec = Vec::with_capacity(repeats);
    let mut total = Vec::with_capacity(repeats);
    let mut last = None;
    for r in 0..repeats.max(1) {
        let run = he_stream(values, params, keys, seed.wrapping_add(r as u64))?;
        enc.push(run.encrypt_s);
        dec.push(run.decrypt_s);
        total.push(run.encrypt_s + run.decrypt_s);
        last = Some(run);
    }
    let last = last.expect("at least one repeat");
    Ok(HeTiming {
        ciphertexts: last.ciphertexts,
        bytes: last.bytes,
        encrypt_s: median(&mut enc),
        decrypt_s: median(&mut dec),
        total_s: median(&mut total),
        max_abs_error: last.max_abs_error,
    })
}
