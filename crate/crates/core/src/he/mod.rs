//! CKKS-style approximate homomorphic encryption over real vectors.
//!
//! Only what federated averaging needs: public-key encryption, ciphertext
//! addition and multiplication by a plaintext scalar (with one rescale).
//! Ciphertexts are RNS polynomials in `Z_Q[X]/(X^N + 1)` kept in coefficient
//! form.
//!
//! The default parameters are sized for experiments and carry no security
//! claim; see [`SecurityGrade`].

mod arith;
mod ciphertext;
mod encoding;
mod keys;
mod ntt;
mod params;

pub use ciphertext::{
    chunk_count, chunk_decrypt, chunk_encrypt, ct_add, ct_mul_plain, ct_sum, decrypt,
    decrypt_call_count, deserialize, encrypt, serialize, write_ciphertext, Ciphertext,
    HEADER_BYTES,
};
pub use encoding::{decode, encode, Plaintext};
pub use keys::{
    deserialize_public_key, deserialize_secret_key, keygen, serialize_public_key,
    serialize_secret_key, KeyPair, PublicKey, SecretKey, NOISE_STDDEV,
};
pub use ntt::NTT_THRESHOLD;
pub use params::{
    HeConfig, HeParams, SecurityGrade, DEFAULT_DECRYPT_TOLERANCE, DEFAULT_ENCODE_TOLERANCE,
};
