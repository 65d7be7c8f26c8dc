//! Payload sizes of large baseline models, produced by running the real codecs
//! and serializer on a random weight blob of the baseline's size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compression::{quantize_4bit, topk_sparsify};
use crate::error::{Error, Result};
use crate::nca::{flatten, ModelConfig, SegmentLayout, TwoStageModel};
use crate::payload::Payload;

pub const BYTES_PER_PARAM: usize = 4;

/// A model that is never trained here, only sized. The default counts are
/// stand-ins, not measurements of any particular published network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub name: String,
    pub params: usize,
}

impl BaselineSpec {
    pub fn unet() -> Self {
        Self { name: "unet".into(), params: 31_000_000 }
    }

    pub fn transunet() -> Self {
        Self { name: "transunet".into(), params: 105_000_000 }
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::unet(), Self::transunet()]
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.params == 0 || self.params > u32::MAX as usize {
            return Err(Error::config(format!("{path}.params must be in [1, 2^32)")));
        }
        if self.name.is_empty() {
            return Err(Error::config(format!("{path}.name must not be empty")));
        }
        Ok(())
    }

    pub fn dense_bytes_nominal(&self) -> usize {
        self.params * BYTES_PER_PARAM
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    Dense,
    Quant4,
    #[serde(rename = "topk")]
    TopK,
}

impl Codec {
    pub const ALL: [Codec; 3] = [Codec::Dense, Codec::Quant4, Codec::TopK];

    pub fn name(self) -> &'static str {
        match self {
            Codec::Dense => "dense",
            Codec::Quant4 => "quant4",
            Codec::TopK => "topk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub model: String,
    pub codec: Codec,
    pub params: usize,
    pub bytes: u64,
    pub mib: f64,
    /// `bytes` over the dense NCA payload.
    pub ratio_vs_nca: f64,
    /// Largest absolute reconstruction error of the codec on the blob.
    pub max_abs_error: f64,
}

/// Serialized size of the dense payload of a freshly initialised NCA.
pub fn nca_dense_bytes(config: &ModelConfig) -> u64 {
    Payload::Dense(flatten(&TwoStageModel::<f32>::init(config.clone(), 0))).serialized_len()
}

/// Seeded weights in `[-0.1, 0.1)`.
pub fn random_blob(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.1f32..0.1)).collect()
}

/// Sizes `payload` and reports it against the NCA reference.
fn row(model: &str, codec: Codec, params: usize, payload: &Payload, nca_bytes: u64, err: f64) -> CostRow {
    let bytes = payload.serialized_len();
    CostRow {
        model: model.to_string(),
        codec,
        params,
        bytes,
        mib: bytes as f64 / crate::netsim::MIB,
        ratio_vs_nca: bytes as f64 / nca_bytes as f64,
        max_abs_error: err,
    }
}

/// Runs `codecs` over one weight vector. Quantization treats the vector as a
/// single segment unless `layout` says otherwise; top-k measures change
/// against an all-zero previous model.
pub fn codec_costs(
    model: &str,
    weights: &[f32],
    layout: Option<&SegmentLayout>,
    codecs: &[Codec],
    k_percent: f64,
    nca_bytes: u64,
) -> Result<Vec<CostRow>> {
    let mut rows = Vec::with_capacity(codecs.len());
    for &codec in codecs {
        let r = match codec {
            Codec::Dense => {
                let p = Payload::Dense(weights.to_vec());
                row(model, codec, weights.len(), &p, nca_bytes, 0.0)
            }
            Codec::Quant4 => {
                let single = SegmentLayout::single(weights.len());
                let q = quantize_4bit(weights, layout.unwrap_or(&single))?;
                let back = crate::compression::dequantize(&q);
                let err = max_abs_diff(weights, &back);
                drop(back);
                row(model, codec, weights.len(), &Payload::Quantized(q), nca_bytes, err)
            }
            Codec::TopK => {
                let reference = vec![0.0f32; weights.len()];
                let s = topk_sparsify(weights, &reference, k_percent, 0)?;
                drop(reference);
                let err = sparse_error(weights, &s);
                row(model, codec, weights.len(), &Payload::Sparse(s), nca_bytes, err)
            }
        };
        rows.push(r);
    }
    Ok(rows)
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

/// Error of reconstructing `weights` from the sparse payload on a zero base,
/// without materialising the dense reconstruction.
fn sparse_error(weights: &[f32], s: &crate::compression::SparsePayload) -> f64 {
    let mut kept = s.indices.iter().peekable();
    let mut worst = 0.0f64;
    for (i, &w) in weights.iter().enumerate() {
        if kept.peek().is_some_and(|&&k| k as usize == i) {
            kept.next();
        } else {
            worst = worst.max((w as f64).abs());
        }
    }
    worst
}

/// Cost table of every baseline under every codec, plus the NCA itself.
/// Each baseline blob is generated, measured and dropped before the next.
pub fn simulate_baseline_costs(
    baselines: &[BaselineSpec],
    codecs: &[Codec],
    k_percent: f64,
    nca: &ModelConfig,
    seed: u64,
) -> Result<Vec<CostRow>> {
    let nca_bytes = nca_dense_bytes(nca);
    let nca_weights = flatten(&TwoStageModel::<f32>::init(nca.clone(), 0));
    let mut rows = codec_costs("nca", &nca_weights, Some(&SegmentLayout::for_model(nca)), codecs, k_percent, nca_bytes)?;
    for (i, spec) in baselines.iter().enumerate() {
        spec.validate(&format!("baselines[{i}]"))?;
        let blob = random_blob(spec.params, seed.wrapping_add(i as u64));
        rows.extend(codec_costs(&spec.name, &blob, None, codecs, k_percent, nca_bytes)?);
    }
    Ok(rows)
}
