//! Star-topology link model and byte ledger.
//!
//! Time is virtual: a transfer takes `latency + 8·bytes / bandwidth` seconds.
//! Every message crosses [`Network::deliver`], which records it and returns
//! the bytes the receiver sees (optionally after a real loopback TCP hop).

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::payload::PayloadTag;
use crate::training::mix_seed;

pub const MIB: f64 = 1024.0 * 1024.0;
pub const LEDGER_SCHEMA: &str = "# schema: ledger/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Down,
    Up,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkProfile {
    /// bits per second
    pub bandwidth_up: f64,
    /// bits per second
    pub bandwidth_down: f64,
    /// seconds
    pub latency: f64,
}

impl Default for LinkProfile {
    fn default() -> Self {
        Self { bandwidth_up: 1e6, bandwidth_down: 1e7, latency: 0.05 }
    }
}

impl LinkProfile {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.bandwidth_up > 0.0 && self.bandwidth_up.is_finite()) {
            return Err(Error::config(format!("{path}.bandwidth_up must be > 0")));
        }
        if !(self.bandwidth_down > 0.0 && self.bandwidth_down.is_finite()) {
            return Err(Error::config(format!("{path}.bandwidth_down must be > 0")));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(Error::config(format!("{path}.latency must be >= 0")));
        }
        Ok(())
    }

    pub fn bandwidth(&self, direction: Direction) -> f64 {
        match direction {
            Direction::Up => self.bandwidth_up,
            Direction::Down => self.bandwidth_down,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub link: LinkProfile,
    /// Per-client overrides; client `i` uses `client_links[i]` when present.
    pub client_links: Vec<LinkProfile>,
    /// Probability that a single transfer is lost. A lost transfer fails the round.
    pub drop_probability: f64,
    /// Push every message through a loopback TCP socket as well.
    pub loopback: bool,
    /// Virtual compute time charged per local training sample, in seconds.
    pub compute_seconds_per_sample: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            link: LinkProfile::default(),
            client_links: Vec::new(),
            drop_probability: 0.0,
            loopback: false,
            compute_seconds_per_sample: 0.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.link.validate("netsim.link")?;
        for (i, l) in self.client_links.iter().enumerate() {
            l.validate(&format!("netsim.client_links[{i}]"))?;
        }
        if !(0.0..1.0).contains(&self.drop_probability) {
            return Err(Error::config("netsim.drop_probability must be in [0, 1)"));
        }
        if !(self.compute_seconds_per_sample >= 0.0 && self.compute_seconds_per_sample.is_finite()) {
            return Err(Error::config("netsim.compute_seconds_per_sample must be >= 0"));
        }
        Ok(())
    }

    pub fn link_for(&self, client_id: usize) -> &LinkProfile {
        self.client_links.get(client_id).unwrap_or(&self.link)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRecord {
    pub round: u32,
    pub direction: Direction,
    pub client_id: usize,
    pub tag: PayloadTag,
    pub bytes: u64,
    pub seconds: f64,
}

pub fn transfer_seconds(bytes: u64, direction: Direction, link: &LinkProfile) -> f64 {
    link.latency + 8.0 * bytes as f64 / link.bandwidth(direction)
}

/// Prices one message on `link`.
pub fn transfer(
    round: u32,
    direction: Direction,
    client_id: usize,
    tag: PayloadTag,
    bytes: u64,
    link: &LinkProfile,
) -> TransferRecord {
    TransferRecord { round, direction, client_id, tag, bytes, seconds: transfer_seconds(bytes, direction, link) }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoundCost {
    pub up_bytes: u64,
    pub down_bytes: u64,
    pub wall_seconds: f64,
}

impl RoundCost {
    pub fn up_mib(&self) -> f64 {
        self.up_bytes as f64 / MIB
    }

    pub fn down_mib(&self) -> f64 {
        self.down_bytes as f64 / MIB
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferLedger {
    records: Vec<TransferRecord>,
}

impl TransferLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: TransferRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[TransferRecord] {
        &self.records
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.bytes).sum()
    }

    /// Byte totals of `round`, and its synchronous wall time: the slowest
    /// client's `down + compute + up`. `compute_seconds[c]` is client `c`'s
    /// local work (missing entries count as zero).
    pub fn round_cost(&self, round: u32, compute_seconds: &[f64]) -> RoundCost {
        let mut cost = RoundCost::default();
        let mut per_client: Vec<f64> = compute_seconds.to_vec();
        for r in self.records.iter().filter(|r| r.round == round) {
            match r.direction {
                Direction::Up => cost.up_bytes += r.bytes,
                Direction::Down => cost.down_bytes += r.bytes,
            }
            if per_client.len() <= r.client_id {
                per_client.resize(r.client_id + 1, 0.0);
            }
            per_client[r.client_id] += r.seconds;
        }
        if self.records.iter().any(|r| r.round == round) {
            cost.wall_seconds = per_client.into_iter().fold(0.0, f64::max);
        }
        cost
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{LEDGER_SCHEMA}")?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["round", "direction", "client_id", "tag", "bytes", "seconds"])?;
        for r in &self.records {
            csv.write_record([
                r.round.to_string(),
                r.direction.as_str().to_string(),
                r.client_id.to_string(),
                r.tag.name().to_string(),
                r.bytes.to_string(),
                r.seconds.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// The simulated star network: prices, logs and (optionally) physically moves
/// each message.
#[derive(Debug)]
pub struct Network {
    config: NetConfig,
    seed: u64,
    ledger: TransferLedger,
}

impl Network {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, seed, ledger: TransferLedger::new() })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn ledger(&self) -> &TransferLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> TransferLedger {
        self.ledger
    }

    /// Sends one framed payload. Returns the bytes as received, or a network
    /// error when the drop knob loses the message.
    pub fn deliver(&mut self, round: u32, direction: Direction, client_id: usize, frame: Vec<u8>) -> Result<Vec<u8>> {
        let tag = PayloadTag::from_byte(*frame.first().ok_or_else(|| Error::format("empty frame"))?)?;
        let record = transfer(round, direction, client_id, tag, frame.len() as u64, self.config.link_for(client_id));
        self.ledger.push(record);
        if self.config.drop_probability > 0.0 {
            let key = mix_seed(&[self.seed, round as u64, direction as u64, client_id as u64]);
            if ChaCha8Rng::seed_from_u64(key).random::<f64>() < self.config.drop_probability {
                return Err(Error::Network(format!(
                    "round {round}: {} transfer for client {client_id} was dropped",
                    direction.as_str()
                )));
            }
        }
        if self.config.loopback {
            let received = loopback_roundtrip(&frame).map_err(|e| Error::Network(format!("loopback: {e}")))?;
            if received != frame {
                return Err(Error::Network("loopback transfer corrupted the frame".into()));
            }
            return Ok(received);
        }
        Ok(frame)
    }
}

/// Writes `frame` to a fresh loopback TCP connection and reads it back on the
/// other end.
pub fn loopback_roundtrip(frame: &[u8]) -> std::io::Result<Vec<u8>> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let receiver = std::thread::spawn(move || -> std::io::Result<Vec<u8>> {
        let (mut stream, _) = listener.accept()?;
        let mut len = [0u8; 8];
        stream.read_exact(&mut len)?;
        let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
        stream.read_exact(&mut buf)?;
        Ok(buf)
    });
    let mut stream = TcpStream::connect(addr)?;
    stream.write_all(&(frame.len() as u64).to_le_bytes())?;
    stream.write_all(frame)?;
    drop(stream);
    receiver.join().map_err(|_| std::io::Error::other("loopback receiver panicked"))?
}
