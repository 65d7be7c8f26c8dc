//! Synchronous federated averaging over the simulated network.
//!
//! Every round: the server's current global payload is broadcast to the
//! participating clients, each client decodes it, trains locally and sends an
//! update in the mode's encoding, and the server aggregates the updates in
//! client-id order. All messages cross [`Network::deliver`] as framed bytes
//! and are parsed back on arrival, so the ledger counts exactly what the
//! receiver decodes.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{apply_sparse_update, dequantize, quantize_4bit, topk_sparsify};
use crate::config::ExperimentConfig;
use crate::data::{generate_dataset, partition, SegSample};
use crate::error::{Error, Result};
use crate::he::{self, HeParams, KeyPair};
use crate::metrics::DiceSummary;
use crate::nca::{flatten, unflatten, ModelConfig, SegmentLayout, TwoStageModel};
use crate::netsim::{Direction, Network, TransferLedger, MIB};
use crate::payload::{EncryptedPayload, Payload, PayloadTag};
use crate::training::{evaluate, mix_seed, train_local, TrainConfig};

pub const ROUND_REPORT_SCHEMA: &str = "# schema: round_report/1";
pub const THREADS_ENV: &str = "FEDNCA_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Plain,
    Encrypted,
    Quantized,
    Sparse,
}

impl AggregationMode {
    pub fn upstream_tag(self) -> PayloadTag {
        match self {
            AggregationMode::Plain => PayloadTag::Dense,
            AggregationMode::Encrypted => PayloadTag::Encrypted,
            AggregationMode::Quantized => PayloadTag::Quantized,
            AggregationMode::Sparse => PayloadTag::Sparse,
        }
    }
}

/// Where the `1/n` of the encrypted mean is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncryptedAveraging {
    /// The server multiplies the ciphertext sum by `1/n` (one level).
    #[default]
    ServerScale,
    /// The server only sums; clients divide after decryption.
    ClientDivide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    /// Weights proportional to each participant's shard size.
    BySamples,
}

/// Knobs that are fixed for the whole run and shared by every client.
#[derive(Debug, Clone)]
pub struct ClientSettings {
    pub mode: AggregationMode,
    pub train: TrainConfig,
    pub k_percent: f64,
    pub residual_feedback: bool,
    pub averaging: EncryptedAveraging,
    pub seed: u64,
}

/// Public facts about the round every participant knows: its number and how
/// many updates went into the global model being broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundInfo {
    pub round: u32,
    pub aggregated_over: usize,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: Vec<SegSample>,
    pub model: TwoStageModel<f32>,
    pub last_global: Vec<f32>,
    pub settings: ClientSettings,
    keys: Option<(HeParams, Arc<KeyPair>)>,
    residual: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub payload: Payload,
    /// Mean training loss of the last local epoch (NaN with zero epochs).
    pub loss: f64,
    pub samples_trained: usize,
}

impl ClientState {
    pub fn new(
        client_id: usize,
        shard: Vec<SegSample>,
        config: ModelConfig,
        settings: ClientSettings,
        keys: Option<(HeParams, Arc<KeyPair>)>,
    ) -> Result<Self> {
        if settings.mode == AggregationMode::Encrypted && keys.is_none() {
            return Err(Error::config("encrypted mode needs client key material"));
        }
        let model = TwoStageModel::init(config, 0);
        let last_global = flatten(&model);
        Ok(Self { client_id, shard, model, last_global, settings, keys, residual: None })
    }

    fn decode_incoming(&self, incoming: &Payload, info: RoundInfo) -> Result<Vec<f32>> {
        let n = self.model.config.param_count();
        let weights = match incoming {
            Payload::Dense(v) => v.clone(),
            Payload::Encrypted(e) => {
                let (params, keys) = self
                    .keys
                    .as_ref()
                    .ok_or_else(|| Error::protocol("received an encrypted payload outside encrypted mode"))?;
                let mut v = he::chunk_decrypt(&e.ciphertexts, &keys.secret_key, params, e.len)?;
                if self.settings.averaging == EncryptedAveraging::ClientDivide && info.aggregated_over > 1 {
                    let inv = 1.0 / info.aggregated_over as f64;
                    v.iter_mut().for_each(|x| *x = (*x as f64 * inv) as f32);
                }
                v
            }
            other => {
                return Err(Error::protocol(format!(
                    "clients only accept dense or encrypted broadcasts, got {}",
                    other.tag().name()
                )))
            }
        };
        if weights.len() != n {
            return Err(Error::protocol(format!("broadcast carries {} weights, model has {n}", weights.len())));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::protocol(format!("broadcast weight {i} is not finite (decryption integrity failure)")));
        }
        Ok(weights)
    }

    /// Decode, train, re-encode.
    pub fn client_update(&mut self, incoming: &Payload, info: RoundInfo) -> Result<ClientUpdate> {
        let global = self.decode_incoming(incoming, info)?;
        self.model = unflatten(&global, &self.model.config)?;
        self.last_global = global;
        let seed = mix_seed(&[self.settings.seed, 0x7A11, info.round as u64, self.client_id as u64]);
        let loss = train_local(&mut self.model, &self.shard, &self.settings.train, seed)?;
        let current = flatten(&self.model);

        let payload = match self.settings.mode {
            AggregationMode::Plain => Payload::Dense(current),
            AggregationMode::Quantized => {
                Payload::Quantized(quantize_4bit(&current, &SegmentLayout::for_model(&self.model.config))?)
            }
            AggregationMode::Sparse => self.sparsify(&current, info.round)?,
            AggregationMode::Encrypted => {
                let (params, keys) = self.keys.as_ref().expect("checked at construction");
                let mut rng =
                    ChaCha20Rng::seed_from_u64(mix_seed(&[self.settings.seed, 0xE4C, info.round as u64, self.client_id as u64]));
                let ciphertexts = he::chunk_encrypt(&current, &keys.public_key, params, &mut rng)?;
                Payload::Encrypted(EncryptedPayload { len: current.len(), ciphertexts })
            }
        };
        let samples_trained = self.shard.len() * self.settings.train.local_epochs;
        Ok(ClientUpdate { payload, loss, samples_trained })
    }

    fn sparsify(&mut self, current: &[f32], round: u32) -> Result<Payload> {
        if !self.settings.residual_feedback {
            let s = topk_sparsify(current, &self.last_global, self.settings.k_percent, round)?;
            return Ok(Payload::sparse_or_dense(s, current));
        }
        let residual = self.residual.get_or_insert_with(|| vec![0.0; current.len()]);
        let effective: Vec<f32> = current.iter().zip(residual.iter()).map(|(c, r)| c + r).collect();
        let s = topk_sparsify(&effective, &self.last_global, self.settings.k_percent, round)?;
        let payload = Payload::sparse_or_dense(s, &effective);
        match &payload {
            Payload::Sparse(s) => {
                for (i, r) in residual.iter_mut().enumerate() {
                    *r = effective[i] - self.last_global[i];
                }
                for &i in &s.indices {
                    residual[i as usize] = 0.0;
                }
            }
            _ => residual.iter_mut().for_each(|r| *r = 0.0),
        }
        Ok(payload)
    }
}

/// Who takes part in an aggregation, in ascending client-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct Roster {
    pub client_ids: Vec<usize>,
    /// Shard sizes, used only by [`Weighting::BySamples`].
    pub sample_counts: Vec<usize>,
}

/// Server side of the protocol. Holds public HE parameters at most; there is
/// no field that could carry a secret key.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: u32,
    pub mode: AggregationMode,
    pub weighting: Weighting,
    pub averaging: EncryptedAveraging,
    /// What the next broadcast sends.
    pub global: Payload,
    /// Number of updates that produced `global` (0 for the initial model).
    pub aggregated_over: usize,
    /// Plaintext global model, kept in the non-encrypted modes to densify
    /// sparse updates.
    reference: Option<Vec<f32>>,
    he_params: Option<HeParams>,
}

impl ServerState {
    pub fn new(
        initial: Vec<f32>,
        mode: AggregationMode,
        weighting: Weighting,
        averaging: EncryptedAveraging,
        he_params: Option<HeParams>,
    ) -> Result<Self> {
        if mode == AggregationMode::Encrypted && he_params.is_none() {
            return Err(Error::config("encrypted mode needs public HE parameters on the server"));
        }
        Ok(Self {
            round: 0,
            mode,
            weighting,
            averaging,
            global: Payload::Dense(initial.clone()),
            aggregated_over: 0,
            reference: (mode != AggregationMode::Encrypted).then_some(initial),
            he_params,
        })
    }

    pub fn he_params(&self) -> Option<&HeParams> {
        self.he_params.as_ref()
    }

    fn weights(&self, roster: &Roster) -> Result<Vec<f64>> {
        let n = roster.client_ids.len();
        match self.weighting {
            Weighting::Uniform => Ok(vec![1.0 / n as f64; n]),
            Weighting::BySamples => {
                if roster.sample_counts.len() != n {
                    return Err(Error::protocol("roster sample counts do not match its clients"));
                }
                let total: usize = roster.sample_counts.iter().sum();
                if total == 0 {
                    return Err(Error::protocol("weighted averaging over zero samples"));
                }
                Ok(roster.sample_counts.iter().map(|&c| c as f64 / total as f64).collect())
            }
        }
    }

    /// Aggregates one update per roster client into the next global payload.
    /// Updates must be in roster order.
    pub fn server_update(&self, updates: &[(usize, Payload)], roster: &Roster) -> Result<Payload> {
        if updates.is_empty() {
            return Err(Error::protocol("no updates to aggregate"));
        }
        let ids: Vec<usize> = updates.iter().map(|(id, _)| *id).collect();
        if ids != roster.client_ids {
            return Err(Error::protocol(format!("updates from {ids:?} do not match the roster {:?}", roster.client_ids)));
        }
        let expected = self.mode.upstream_tag();
        // A sparse-mode client falls back to dense when that is smaller.
        let accepted = |t: PayloadTag| t == expected || (expected == PayloadTag::Sparse && t == PayloadTag::Dense);
        if let Some((id, p)) = updates.iter().find(|(_, p)| !accepted(p.tag())) {
            return Err(Error::protocol(format!(
                "client {id} sent a {} update in {} mode",
                p.tag().name(),
                expected.name()
            )));
        }
        let weights = self.weights(roster)?;

        if self.mode == AggregationMode::Encrypted {
            return self.aggregate_encrypted(updates, &weights);
        }

        let reference = self.reference.as_ref().expect("plaintext modes keep a reference");
        let mut acc = vec![0.0f64; reference.len()];
        for ((id, p), &w) in updates.iter().zip(&weights) {
            let dense = match p {
                Payload::Dense(v) => std::borrow::Cow::Borrowed(v.as_slice()),
                Payload::Quantized(q) => std::borrow::Cow::Owned(dequantize(q)),
                Payload::Sparse(s) => {
                    if s.reference_round != self.round {
                        return Err(Error::protocol(format!(
                            "client {id} diffed against round {}, server is at round {}",
                            s.reference_round, self.round
                        )));
                    }
                    std::borrow::Cow::Owned(apply_sparse_update(reference, s)?)
                }
                Payload::Encrypted(_) => unreachable!("tags checked above"),
            };
            if dense.len() != acc.len() {
                return Err(Error::protocol(format!("client {id} sent {} weights, expected {}", dense.len(), acc.len())));
            }
            for (a, &x) in acc.iter_mut().zip(dense.iter()) {
                *a += w * x as f64;
            }
        }
        Ok(Payload::Dense(acc.into_iter().map(|x| x as f32).collect()))
    }

    fn aggregate_encrypted(&self, updates: &[(usize, Payload)], weights: &[f64]) -> Result<Payload> {
        let parts: Vec<&EncryptedPayload> = updates
            .iter()
            .map(|(_, p)| match p {
                Payload::Encrypted(e) => e,
                _ => unreachable!("tags checked by the caller"),
            })
            .collect();
        let len = parts[0].len;
        let chunks = parts[0].ciphertexts.len();
        if parts.iter().any(|e| e.len != len || e.ciphertexts.len() != chunks) {
            return Err(Error::protocol("encrypted updates differ in length"));
        }
        let uniform = self.weighting == Weighting::Uniform;
        let mut out = Vec::with_capacity(chunks);
        for j in 0..chunks {
            let column: Vec<he::Ciphertext> = if uniform {
                parts.iter().map(|e| e.ciphertexts[j].clone()).collect()
            } else {
                parts
                    .iter()
                    .zip(weights)
                    .map(|(e, &w)| he::ct_mul_plain(&e.ciphertexts[j], w))
                    .collect::<Result<_>>()?
            };
            let sum = he::ct_sum(&column)?;
            out.push(match (uniform, self.averaging) {
                (true, EncryptedAveraging::ServerScale) => he::ct_mul_plain(&sum, weights[0])?,
                _ => sum,
            });
        }
        Ok(Payload::Encrypted(EncryptedPayload { len, ciphertexts: out }))
    }

    /// Installs an aggregate as the next global model.
    pub fn advance(&mut self, global: Payload, aggregated_over: usize) {
        if let (Some(r), Payload::Dense(v)) = (self.reference.as_mut(), &global) {
            r.clone_from(v);
        }
        self.global = global;
        self.aggregated_over = aggregated_over;
        self.round += 1;
    }
}

/// Measured (not simulated) time spent in each phase. Never written to the
/// CSVs, which must be reproducible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseTimings {
    pub broadcast_s: f64,
    pub client_s: f64,
    pub upload_s: f64,
    pub aggregate_s: f64,
    pub evaluate_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub participants: Vec<usize>,
    /// Per participant, in `participants` order.
    pub train_loss: Vec<f64>,
    pub up_bytes: Vec<u64>,
    pub down_bytes: Vec<u64>,
    pub test_dice: f64,
    pub test_dice_per_class: Vec<f64>,
    /// Simulated synchronous round time.
    pub virtual_seconds: f64,
    pub timings: PhaseTimings,
}

impl RoundReport {
    pub fn total_up_bytes(&self) -> u64 {
        self.up_bytes.iter().sum()
    }

    pub fn total_down_bytes(&self) -> u64 {
        self.down_bytes.iter().sum()
    }

    pub fn mean_train_loss(&self) -> f64 {
        self.train_loss.iter().sum::<f64>() / self.train_loss.len().max(1) as f64
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

pub const ROUND_REPORT_COLUMNS: [&str; 12] = [
    "round",
    "participants",
    "mean_train_loss",
    "test_dice",
    "up_bytes",
    "down_bytes",
    "up_mib",
    "down_mib",
    "virtual_seconds",
    "client_train_loss",
    "client_up_bytes",
    "test_dice_per_class",
];

pub fn write_round_reports<W: Write>(mut w: W, reports: &[RoundReport]) -> Result<()> {
    writeln!(w, "{ROUND_REPORT_SCHEMA}")?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(ROUND_REPORT_COLUMNS)?;
    for r in reports {
        csv.write_record([
            r.round.to_string(),
            join(&r.participants),
            r.mean_train_loss().to_string(),
            r.test_dice.to_string(),
            r.total_up_bytes().to_string(),
            r.total_down_bytes().to_string(),
            (r.total_up_bytes() as f64 / MIB).to_string(),
            (r.total_down_bytes() as f64 / MIB).to_string(),
            r.virtual_seconds.to_string(),
            join(&r.train_loss),
            join(&r.up_bytes),
            join(&r.test_dice_per_class),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn save_round_reports(path: &Path, reports: &[RoundReport]) -> Result<()> {
    let mut buf = Vec::new();
    write_round_reports(&mut buf, reports)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Worker count: `FEDNCA_THREADS` if set, else the machine's parallelism,
/// capped by `configured`.
pub fn worker_threads(configured: Option<usize>) -> usize {
    let env = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0);
    let base = env.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    configured.map_or(base, |c| c.min(base)).max(1)
}

/// A configured federation: server, clients, held-out data and the network.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub test: Vec<SegSample>,
    network: Network,
    /// Key material of the evaluation harness, which scores the global model
    /// the way a client would see it.
    evaluator_keys: Option<(HeParams, Arc<KeyPair>)>,
    pool: rayon::ThreadPool,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let data = generate_dataset(&config.dataset, mix_seed(&[seed, 0xDA7A]))?;
        let part = partition(
            &data,
            config.protocol.clients,
            config.partition.strategy,
            config.partition.test_fraction,
            mix_seed(&[seed, 0x5917]),
        )?;
        let keys = if config.protocol.mode == AggregationMode::Encrypted {
            let params = HeParams::new(&config.he)?;
            let kp = Arc::new(he::keygen(&params, mix_seed(&[seed, 0x4E75]))?);
            Some((params, kp))
        } else {
            None
        };
        let settings = ClientSettings {
            mode: config.protocol.mode,
            train: config.train.clone(),
            k_percent: config.compression.k_percent,
            residual_feedback: config.compression.residual_feedback,
            averaging: config.protocol.encrypted_averaging,
            seed,
        };
        let clients = part
            .shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| ClientState::new(id, shard, config.model.clone(), settings.clone(), keys.clone()))
            .collect::<Result<Vec<_>>>()?;
        let initial = flatten(&TwoStageModel::<f32>::init(config.model.clone(), mix_seed(&[seed, 0x1417])));
        let server = ServerState::new(
            initial,
            config.protocol.mode,
            config.protocol.weighting,
            config.protocol.encrypted_averaging,
            keys.as_ref().map(|(p, _)| p.clone()),
        )?;
        let network = Network::new(config.netsim.clone(), mix_seed(&[seed, 0x0E7]))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(worker_threads(config.protocol.threads))
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        Ok(Self { config, server, clients, test: part.test, network, evaluator_keys: keys, pool })
    }

    pub fn round(&self) -> u32 {
        self.server.round
    }

    pub fn ledger(&self) -> &TransferLedger {
        self.network.ledger()
    }

    fn roster(&self, round: u32) -> Roster {
        let n = self.clients.len();
        let mut client_ids: Vec<usize> = match self.config.protocol.clients_per_round {
            Some(k) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, 0x5A3F, round as u64]));
                sample(&mut rng, n, k).into_vec()
            }
            _ => (0..n).collect(),
        };
        client_ids.sort_unstable();
        let sample_counts = client_ids.iter().map(|&c| self.clients[c].shard.len()).collect();
        Roster { client_ids, sample_counts }
    }

    /// The plaintext global model as any client would decode it.
    pub fn global_weights(&self) -> Result<Vec<f32>> {
        match &self.server.global {
            Payload::Dense(v) => Ok(v.clone()),
            Payload::Encrypted(e) => {
                let (params, kp) = self.evaluator_keys.as_ref().expect("encrypted mode has keys");
                let mut v = he::chunk_decrypt(&e.ciphertexts, &kp.secret_key, params, e.len)?;
                if self.server.averaging == EncryptedAveraging::ClientDivide && self.server.aggregated_over > 1 {
                    let inv = 1.0 / self.server.aggregated_over as f64;
                    v.iter_mut().for_each(|x| *x = (*x as f64 * inv) as f32);
                }
                Ok(v)
            }
            other => Err(Error::protocol(format!("unexpected {} global payload", other.tag().name()))),
        }
    }

    pub fn global_model(&self) -> Result<TwoStageModel<f32>> {
        unflatten(&self.global_weights()?, &self.config.model)
    }

    pub fn evaluate_global(&self) -> Result<DiceSummary> {
        let model = self.global_model()?;
        evaluate(&model, &self.test, mix_seed(&[self.config.seed, 0xE7A1]), self.config.train.deterministic)
    }

    /// One synchronous round: broadcast, local training, upload, aggregation,
    /// evaluation.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.server.round;
        let roster = self.roster(round);
        let info = RoundInfo { round, aggregated_over: self.server.aggregated_over };
        let he_params = self.server.he_params().cloned();
        let mut timings = PhaseTimings::default();

        let t = Instant::now();
        let frame = self.server.global.to_bytes();
        let mut incoming = Vec::with_capacity(roster.client_ids.len());
        let mut down_bytes = Vec::with_capacity(roster.client_ids.len());
        for &id in &roster.client_ids {
            down_bytes.push(frame.len() as u64);
            let received = self.network.deliver(round, Direction::Down, id, frame.clone())?;
            incoming.push(Payload::from_bytes(&received, he_params.as_ref())?);
        }
        drop(frame);
        timings.broadcast_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let mut participants: Vec<&mut ClientState> =
            self.clients.iter_mut().filter(|c| roster.client_ids.contains(&c.client_id)).collect();
        let results: Vec<Result<ClientUpdate>> = self.pool.install(|| {
            participants
                .par_iter_mut()
                .zip(incoming.par_iter())
                .map(|(client, payload)| client.client_update(payload, info))
                .collect()
        });
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        timings.client_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let mut updates = Vec::with_capacity(results.len());
        let mut up_bytes = Vec::with_capacity(results.len());
        let mut compute = vec![0.0; self.clients.len()];
        for (&id, r) in roster.client_ids.iter().zip(&results) {
            let frame = r.payload.to_bytes();
            up_bytes.push(frame.len() as u64);
            compute[id] = r.samples_trained as f64 * self.config.netsim.compute_seconds_per_sample;
            let received = self.network.deliver(round, Direction::Up, id, frame)?;
            updates.push((id, Payload::from_bytes(&received, he_params.as_ref())?));
        }
        timings.upload_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let global = self.server.server_update(&updates, &roster)?;
        drop(updates);
        self.server.advance(global, roster.client_ids.len());
        timings.aggregate_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let dice = self.evaluate_global()?;
        timings.evaluate_s = t.elapsed().as_secs_f64();

        let cost = self.network.ledger().round_cost(round, &compute);
        Ok(RoundReport {
            round,
            participants: roster.client_ids,
            train_loss: results.iter().map(|r| r.loss).collect(),
            up_bytes,
            down_bytes,
            test_dice: dice.mean_foreground,
            test_dice_per_class: dice.per_class,
            virtual_seconds: cost.wall_seconds,
            timings,
        })
    }

    pub fn into_ledger(self) -> TransferLedger {
        self.network.into_ledger()
    }
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub reports: Vec<RoundReport>,
    pub ledger: TransferLedger,
    pub final_model: TwoStageModel<f32>,
}

/// Runs `config.protocol.rounds` rounds. With zero rounds the output is the
/// initial model and no reports.
pub fn run_experiment(config: ExperimentConfig) -> Result<ExperimentOutput> {
    run_experiment_with(config, |_| {})
}

/// As [`run_experiment`], calling `on_round` after every round.
pub fn run_experiment_with(config: ExperimentConfig, mut on_round: impl FnMut(&RoundReport)) -> Result<ExperimentOutput> {
    let rounds = config.protocol.rounds;
    let mut exp = Experiment::new(config)?;
    let mut reports = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let r = exp.run_round()?;
        on_round(&r);
        reports.push(r);
    }
    let final_model = exp.global_model()?;
    Ok(ExperimentOutput { reports, ledger: exp.into_ledger(), final_model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;

    fn tiny_config(mode: AggregationMode) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.model = ModelConfig { channels: 4, hidden_units: 6, t0: 2, t1: 2, eta: 0.05, ..ModelConfig::default() };
        c.dataset = DatasetSpec { samples: 8, height: 16, width: 16, ..DatasetSpec::default() };
        c.partition.test_fraction = 0.25;
        c.protocol.clients = 3;
        c.protocol.rounds = 2;
        c.protocol.mode = mode;
        c.train.grad_clip = Some(1.0);
        c.he.ring_degree = 64;
        c
    }

    fn plain_server(initial: Vec<f32>) -> ServerState {
        ServerState::new(initial, AggregationMode::Plain, Weighting::Uniform, EncryptedAveraging::ServerScale, None).unwrap()
    }

    fn roster(n: usize) -> Roster {
        Roster { client_ids: (0..n).collect(), sample_counts: vec![1; n] }
    }

    #[test]
    fn plain_mean_of_two() {
        let server = plain_server(vec![0.0; 3]);
        let a = vec![1.0f32, 2.0, -4.0];
        let b = vec![3.0f32, 0.5, 4.0];
        let out = server.server_update(&[(0, Payload::Dense(a)), (1, Payload::Dense(b))], &roster(2)).unwrap();
        assert_eq!(out, Payload::Dense(vec![2.0, 1.25, 0.0]));
    }

    #[test]
    fn single_update_passes_through() {
        let server = plain_server(vec![0.0; 3]);
        let v = vec![0.1f32, -0.7, 3.3];
        let out = server.server_update(&[(0, Payload::Dense(v.clone()))], &roster(1)).unwrap();
        assert_eq!(out, Payload::Dense(v));
    }

    #[test]
    fn rejects_mixed_tags_and_roster_mismatch() {
        let server = plain_server(vec![0.0; 2]);
        let sparse = Payload::Sparse(topk_sparsify(&[1.0, 2.0], &[0.0, 0.0], 50.0, 0).unwrap());
        assert!(server.server_update(&[(0, Payload::Dense(vec![0.0; 2])), (1, sparse)], &roster(2)).is_err());
        assert!(server.server_update(&[(0, Payload::Dense(vec![0.0; 2]))], &roster(2)).is_err());
        assert!(server.server_update(&[], &roster(0)).is_err());
    }

    #[test]
    fn weighted_mean_uses_sample_counts() {
        let server =
            ServerState::new(vec![0.0; 1], AggregationMode::Plain, Weighting::BySamples, EncryptedAveraging::ServerScale, None)
                .unwrap();
        let r = Roster { client_ids: vec![0, 1], sample_counts: vec![3, 1] };
        let out = server.server_update(&[(0, Payload::Dense(vec![4.0])), (1, Payload::Dense(vec![8.0]))], &r).unwrap();
        assert_eq!(out, Payload::Dense(vec![5.0]));
    }

    #[test]
    fn sparse_updates_are_densified_against_the_reference() {
        let server = ServerState::new(
            vec![1.0, 1.0, 1.0, 1.0],
            AggregationMode::Sparse,
            Weighting::Uniform,
            EncryptedAveraging::ServerScale,
            None,
        )
        .unwrap();
        let s0 = topk_sparsify(&[5.0, 1.0, 1.0, 1.0], &[1.0; 4], 25.0, 0).unwrap();
        let s1 = topk_sparsify(&[1.0, 1.0, 1.0, 3.0], &[1.0; 4], 25.0, 0).unwrap();
        let out = server.server_update(&[(0, Payload::Sparse(s0)), (1, Payload::Sparse(s1))], &roster(2)).unwrap();
        assert_eq!(out, Payload::Dense(vec![3.0, 1.0, 1.0, 2.0]));
        let stale = topk_sparsify(&[5.0, 1.0, 1.0, 1.0], &[1.0; 4], 25.0, 4).unwrap();
        assert!(server.server_update(&[(0, Payload::Sparse(stale))], &roster(1)).is_err());
    }

    #[test]
    fn zero_epochs_return_incoming_weights() {
        let mut c = tiny_config(AggregationMode::Plain);
        c.train.local_epochs = 0;
        let mut exp = Experiment::new(c).unwrap();
        let before = exp.global_weights().unwrap();
        exp.run_round().unwrap();
        assert_eq!(exp.global_weights().unwrap(), before);
    }

    #[test]
    fn residual_feedback_carries_unsent_deltas() {
        let settings = ClientSettings {
            mode: AggregationMode::Sparse,
            train: TrainConfig::default(),
            k_percent: 10.0,
            residual_feedback: true,
            averaging: EncryptedAveraging::ServerScale,
            seed: 0,
        };
        let config = ModelConfig { channels: 4, hidden_units: 1, ..ModelConfig::default() };
        let mut client = ClientState::new(0, Vec::new(), config, settings, None).unwrap();
        let n = client.last_global.len();
        client.last_global = vec![0.0; n];
        let mut current = vec![0.0f32; n];
        current[0] = 1.0;
        current[1] = 0.5;
        let Payload::Sparse(p) = client.sparsify(&current, 0).unwrap() else { panic!("sparse expected") };
        assert!(p.indices.contains(&0));
        let r = client.residual.as_ref().unwrap();
        assert_eq!(r[0], 0.0);
        let sent: Vec<usize> = p.indices.iter().map(|&i| i as usize).collect();
        if !sent.contains(&1) {
            assert_eq!(r[1], 0.5);
        }
    }

    #[test]
    fn report_csv_has_schema_line() {
        let exp = run_experiment(tiny_config(AggregationMode::Quantized)).unwrap();
        assert_eq!(exp.reports.len(), 2);
        let mut buf = Vec::new();
        write_round_reports(&mut buf, &exp.reports).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(ROUND_REPORT_SCHEMA));
        assert_eq!(lines.next().unwrap(), ROUND_REPORT_COLUMNS.join(","));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn encrypted_round_matches_plain() {
        let plain = run_experiment(tiny_config(AggregationMode::Plain)).unwrap();
        let enc = run_experiment(tiny_config(AggregationMode::Encrypted)).unwrap();
        let (a, b) = (flatten(&plain.final_model), flatten(&enc.final_model));
        let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn worker_threads_respects_cap() {
        assert_eq!(worker_threads(Some(1)), 1);
        assert!(worker_threads(None) >= 1);
    }
}
