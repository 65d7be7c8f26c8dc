use std::sync::Arc;

use fednca::config::ExperimentConfig;
use fednca::data::{generate_dataset, DatasetSpec};
use fednca::he::{self, HeConfig, HeParams, DEFAULT_DECRYPT_TOLERANCE};
use fednca::nca::{backward_bptt, cross_entropy_loss, flatten, forward, sgd_step, ModelConfig, TwoStageModel};
use fednca::payload::{EncryptedPayload, Payload, FRAME_HEADER_BYTES};
use fednca::protocol::{
    run_experiment, write_round_reports, AggregationMode, ClientSettings, ClientState, EncryptedAveraging, Experiment,
    RoundInfo, Roster, ServerState, Weighting,
};
use fednca::training::{sample_image, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(mode: AggregationMode, clients: usize, rounds: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 3;
    c.model = ModelConfig { channels: 5, hidden_units: 8, t0: 3, t1: 3, eta: 0.05, ..ModelConfig::default() };
    c.dataset = DatasetSpec { samples: 2 * clients + 2, height: 16, width: 16, ..DatasetSpec::default() };
    c.partition.test_fraction = 2.0 / (2 * clients + 2) as f64;
    c.protocol.clients = clients;
    c.protocol.rounds = rounds;
    c.protocol.mode = mode;
    c.train.grad_clip = Some(1.0);
    c
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn settings(mode: AggregationMode, train: TrainConfig) -> ClientSettings {
    ClientSettings {
        mode,
        train,
        k_percent: 10.0,
        residual_feedback: false,
        averaging: EncryptedAveraging::ServerScale,
        seed: 0,
    }
}

#[test]
fn encrypted_rounds_track_plain_rounds() {
    for clients in [1, 4, 8] {
        let mut plain = Experiment::new(small(AggregationMode::Plain, clients, 3)).unwrap();
        let mut enc = Experiment::new(small(AggregationMode::Encrypted, clients, 3)).unwrap();
        for round in 0..3 {
            plain.run_round().unwrap();
            enc.run_round().unwrap();
            let d = max_diff(&plain.global_weights().unwrap(), &enc.global_weights().unwrap());
            assert!(d <= 1e-3, "{clients} clients, round {round}: {d}");
        }
    }
}

#[test]
fn client_divide_matches_server_scale() {
    let mut a = small(AggregationMode::Encrypted, 3, 2);
    let mut b = a.clone();
    a.protocol.encrypted_averaging = EncryptedAveraging::ServerScale;
    b.protocol.encrypted_averaging = EncryptedAveraging::ClientDivide;
    let (ra, rb) = (run_experiment(a).unwrap(), run_experiment(b).unwrap());
    let d = max_diff(&flatten(&ra.final_model), &flatten(&rb.final_model));
    assert!(d <= 1e-3, "{d}");
}

#[test]
fn plain_aggregate_equals_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 7;
    let len = 257;
    let vecs: Vec<Vec<f32>> = (0..n).map(|_| (0..len).map(|_| rng.random_range(-2.0f32..2.0)).collect()).collect();
    let server =
        ServerState::new(vec![0.0; len], AggregationMode::Plain, Weighting::Uniform, EncryptedAveraging::ServerScale, None)
            .unwrap();
    let updates: Vec<(usize, Payload)> = vecs.iter().cloned().map(Payload::Dense).enumerate().collect();
    let roster = Roster { client_ids: (0..n).collect(), sample_counts: vec![1; n] };
    let out = server.server_update(&updates, &roster).unwrap();

    let mut oracle = vec![0.0f64; len];
    for v in &vecs {
        for i in 0..len {
            oracle[i] += (1.0 / n as f64) * v[i] as f64;
        }
    }
    let oracle: Vec<f32> = oracle.into_iter().map(|x| x as f32).collect();
    match out {
        Payload::Dense(v) => assert!(v.iter().zip(&oracle).all(|(a, b)| a.to_bits() == b.to_bits())),
        other => panic!("unexpected {:?}", other.tag()),
    }
}

#[test]
fn roster_must_be_complete_and_ordered() {
    let server =
        ServerState::new(vec![0.0; 2], AggregationMode::Plain, Weighting::Uniform, EncryptedAveraging::ServerScale, None)
            .unwrap();
    let roster = Roster { client_ids: vec![0, 1, 2], sample_counts: vec![1; 3] };
    let u = |id| (id, Payload::Dense(vec![1.0, 2.0]));
    assert!(server.server_update(&[u(0), u(1)], &roster).is_err());
    assert!(server.server_update(&[u(1), u(0), u(2)], &roster).is_err());
    assert!(server.server_update(&[u(0), u(1), u(2)], &roster).is_ok());
}

#[test]
fn five_encrypted_updates_average_within_tolerance() {
    let params = HeParams::new(&HeConfig::default()).unwrap();
    let keys = he::keygen(&params, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let len = 5000;
    let vecs: Vec<Vec<f32>> = (0..5).map(|_| (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
    let updates: Vec<(usize, Payload)> = vecs
        .iter()
        .enumerate()
        .map(|(id, v)| {
            let cts = he::chunk_encrypt(v, &keys.public_key, &params, &mut rng).unwrap();
            (id, Payload::Encrypted(EncryptedPayload { len, ciphertexts: cts }))
        })
        .collect();
    let server = ServerState::new(
        vec![0.0; len],
        AggregationMode::Encrypted,
        Weighting::Uniform,
        EncryptedAveraging::ServerScale,
        Some(params.clone()),
    )
    .unwrap();
    let roster = Roster { client_ids: (0..5).collect(), sample_counts: vec![1; 5] };

    let before = he::decrypt_call_count();
    let out = server.server_update(&updates, &roster).unwrap();
    assert_eq!(he::decrypt_call_count(), before, "the server path must never decrypt");

    let Payload::Encrypted(e) = out else { panic!("expected an encrypted aggregate") };
    let mean = he::chunk_decrypt(&e.ciphertexts, &keys.secret_key, &params, len).unwrap();
    for i in 0..len {
        let expect = vecs.iter().map(|v| v[i] as f64).sum::<f64>() / 5.0;
        assert!((mean[i] as f64 - expect).abs() <= 1e-3, "slot {i}");
    }
}

#[test]
fn one_epoch_matches_scripted_training_loop() {
    let model_cfg = ModelConfig { channels: 5, hidden_units: 7, t0: 2, t1: 3, eta: 0.1, ..ModelConfig::default() };
    let sample = generate_dataset(&DatasetSpec { samples: 1, height: 16, width: 16, ..DatasetSpec::default() }, 2)
        .unwrap()
        .remove(0);
    let train = TrainConfig { local_epochs: 1, batch_size: 1, deterministic: true, grad_clip: None };
    let mut client =
        ClientState::new(0, vec![sample.clone()], model_cfg.clone(), settings(AggregationMode::Plain, train), None).unwrap();
    let start = TwoStageModel::<f32>::init(model_cfg.clone(), 77);
    let update = client
        .client_update(&Payload::Dense(flatten(&start)), RoundInfo { round: 0, aggregated_over: 0 })
        .unwrap();

    let image = sample_image::<f32>(&sample).unwrap();
    let (logits, tape) = forward(&start, &image, 12345, true).unwrap();
    let (_, dlogits) = cross_entropy_loss(&logits, &sample.mask).unwrap();
    let grads = backward_bptt(&start, &tape, &dlogits).unwrap();
    let eta = model_cfg.eta as f32;
    let expected = TwoStageModel {
        theta: sgd_step(&start.theta, &grads.theta, eta),
        omega: sgd_step(&start.omega, &grads.omega, eta),
        config: model_cfg,
    };
    assert_eq!(update.payload, Payload::Dense(flatten(&expected)));
    assert_eq!(client.last_global, flatten(&start));
}

#[test]
fn encrypted_noop_client_preserves_weights() {
    let params = HeParams::new(&HeConfig::default()).unwrap();
    let keys = Arc::new(he::keygen(&params, 5).unwrap());
    let model_cfg = ModelConfig { channels: 6, hidden_units: 10, ..ModelConfig::default() };
    let train = TrainConfig { local_epochs: 0, ..TrainConfig::default() };
    let mut client = ClientState::new(
        0,
        Vec::new(),
        model_cfg.clone(),
        settings(AggregationMode::Encrypted, train),
        Some((params.clone(), keys.clone())),
    )
    .unwrap();
    let w = flatten(&TwoStageModel::<f32>::init(model_cfg, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cts = he::chunk_encrypt(&w, &keys.public_key, &params, &mut rng).unwrap();
    let incoming = Payload::Encrypted(EncryptedPayload { len: w.len(), ciphertexts: cts.clone() });
    let out = client.client_update(&incoming, RoundInfo { round: 1, aggregated_over: 1 }).unwrap();
    let Payload::Encrypted(e) = out.payload else { panic!("expected ciphertexts") };
    let a = he::chunk_decrypt(&cts, &keys.secret_key, &params, w.len()).unwrap();
    let b = he::chunk_decrypt(&e.ciphertexts, &keys.secret_key, &params, w.len()).unwrap();
    assert!(max_diff(&a, &b) as f64 <= 2.0 * DEFAULT_DECRYPT_TOLERANCE);
}

#[test]
fn plain_client_rejects_ciphertexts() {
    let params = HeParams::new(&HeConfig { ring_degree: 64, ..HeConfig::default() }).unwrap();
    let keys = he::keygen(&params, 5).unwrap();
    let cfg = ModelConfig { channels: 4, hidden_units: 2, ..ModelConfig::default() };
    let mut client = ClientState::new(0, Vec::new(), cfg.clone(), settings(AggregationMode::Plain, TrainConfig::default()), None).unwrap();
    let w = flatten(&TwoStageModel::<f32>::init(cfg, 0));
    let cts = he::chunk_encrypt(&w, &keys.public_key, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let p = Payload::Encrypted(EncryptedPayload { len: w.len(), ciphertexts: cts });
    assert!(client.client_update(&p, RoundInfo { round: 1, aggregated_over: 1 }).is_err());
}

#[test]
fn zero_rounds_give_initial_model() {
    let out = run_experiment(small(AggregationMode::Plain, 2, 0)).unwrap();
    assert!(out.reports.is_empty());
    assert!(out.ledger.records().is_empty());
    let exp = Experiment::new(small(AggregationMode::Plain, 2, 0)).unwrap();
    assert_eq!(out.final_model, exp.global_model().unwrap());
}

#[test]
fn reruns_are_identical() {
    for mode in [AggregationMode::Plain, AggregationMode::Sparse, AggregationMode::Encrypted] {
        let csv = |c: ExperimentConfig| {
            let out = run_experiment(c).unwrap();
            let mut reports = Vec::new();
            write_round_reports(&mut reports, &out.reports).unwrap();
            let mut ledger = Vec::new();
            out.ledger.write_csv(&mut ledger).unwrap();
            (reports, ledger, flatten(&out.final_model))
        };
        assert_eq!(csv(small(mode, 3, 2)), csv(small(mode, 3, 2)), "{mode:?}");
    }
}

#[test]
fn zero_local_epochs_keep_global_weights() {
    for mode in [AggregationMode::Plain, AggregationMode::Sparse] {
        let mut c = small(mode, 3, 1);
        c.train.local_epochs = 0;
        let mut exp = Experiment::new(c).unwrap();
        let before = exp.global_weights().unwrap();
        exp.run_round().unwrap();
        assert_eq!(exp.global_weights().unwrap(), before, "{mode:?}");
    }
}

#[test]
fn ledger_matches_reports_and_size_formulas() {
    let c = small(AggregationMode::Encrypted, 3, 2);
    let params = HeParams::new(&c.he).unwrap();
    let n = c.model.param_count();
    let out = run_experiment(c).unwrap();
    for r in &out.reports {
        let cost = out.ledger.round_cost(r.round, &[]);
        assert_eq!(cost.up_bytes, r.total_up_bytes());
        assert_eq!(cost.down_bytes, r.total_down_bytes());
        let count = he::chunk_count(n, &params);
        let expected_up = (FRAME_HEADER_BYTES + 8 + count * (4 + params.ciphertext_bytes(params.max_level()))) as u64;
        assert!(r.up_bytes.iter().all(|&b| b == expected_up));
    }
    // Round 0 broadcasts the initial model in the clear.
    assert!(out.reports[0].down_bytes.iter().all(|&b| b == (FRAME_HEADER_BYTES + 4 + 4 * n) as u64));
    let total: u64 = out.reports.iter().map(|r| r.total_up_bytes() + r.total_down_bytes()).sum();
    assert_eq!(total, out.ledger.total_bytes());
}

#[test]
fn upstream_cost_grows_with_k() {
    let mut last = 0;
    for k in [1.0, 5.0, 10.0, 30.0, 50.0, 100.0] {
        let mut c = small(AggregationMode::Sparse, 2, 1);
        c.compression.k_percent = k;
        let up = run_experiment(c).unwrap().reports[0].total_up_bytes();
        assert!(up >= last, "k = {k}");
        last = up;
    }
}

#[test]
fn partial_participation_draws_subsets() {
    let mut c = small(AggregationMode::Quantized, 5, 4);
    c.protocol.clients_per_round = Some(2);
    let out = run_experiment(c).unwrap();
    for r in &out.reports {
        assert_eq!(r.participants.len(), 2);
        assert!(r.participants.windows(2).all(|w| w[0] < w[1]));
    }
    assert!(out.reports.iter().any(|r| r.participants != out.reports[0].participants));
}

#[test]
fn weighted_encrypted_matches_weighted_plain() {
    let mut p = small(AggregationMode::Plain, 3, 2);
    p.protocol.weighting = Weighting::BySamples;
    p.dataset.samples = 11;
    p.partition.test_fraction = 0.2;
    let mut e = p.clone();
    e.protocol.mode = AggregationMode::Encrypted;
    let (rp, re) = (run_experiment(p).unwrap(), run_experiment(e).unwrap());
    assert!(max_diff(&flatten(&rp.final_model), &flatten(&re.final_model)) <= 1e-3);
}

#[test]
fn loopback_transport_changes_nothing() {
    let a = small(AggregationMode::Quantized, 2, 2);
    let mut b = a.clone();
    b.netsim.loopback = true;
    let (ra, rb) = (run_experiment(a).unwrap(), run_experiment(b).unwrap());
    assert_eq!(ra.ledger, rb.ledger);
    assert_eq!(ra.final_model, rb.final_model);
}

#[test]
fn dropped_transfer_fails_the_round() {
    let mut c = small(AggregationMode::Plain, 5, 5);
    c.netsim.drop_probability = 0.5;
    let err = run_experiment(c).unwrap_err();
    assert!(matches!(err, fednca::Error::Network(_)), "{err}");
}
