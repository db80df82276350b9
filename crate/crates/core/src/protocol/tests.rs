use std::collections::HashMap;
use std::net::TcpListener;
use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::nn::{encode_inputs, Architecture, Arith, CentralModel, Fixed, Hyperparams, NoiseBounds, Tensor};
use crate::phe::{keygen, PrivateKey, PublicKey};
use crate::transport::{Channel, TcpChannel};

fn key() -> &'static (PublicKey, PrivateKey) {
    static KEY: OnceLock<(PublicKey, PrivateKey)> = OnceLock::new();
    KEY.get_or_init(|| keygen(512, &mut ChaCha20Rng::seed_from_u64(17)).unwrap())
}

fn arch() -> Architecture {
    Architecture { input_dim: 4, hidden: vec![6, 5], classes: 3, bias: true }
}

fn hp(frac_bits: u32) -> Hyperparams {
    Hyperparams { lr: 0.2, batch_size: 2, epochs: 1, seed: 3, frac_bits, noise: NoiseBounds::default() }
}

struct Data {
    x: Tensor<f64>,
    labels: Vec<usize>,
}

fn data(n: usize) -> Data {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let x: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..3)).collect();
    Data { x: Tensor::matrix(n, 4, x).unwrap(), labels }
}

fn label_map(d: &Data) -> HashMap<u64, usize> {
    d.labels.iter().enumerate().map(|(i, &l)| (i as u64, l)).collect()
}

fn local(h: &Hyperparams, noise: NoiseConfig, d: &Data) -> LocalSession {
    let active = ActiveParty::new(key().1.clone(), &arch(), h, noise, Some(1)).unwrap();
    let config = active.session_config();
    let passive = PassiveParty::new(key().0.clone(), &config, h.seed, noise.seed, Some(2), label_map(d)).unwrap();
    LocalSession::new(active, passive).unwrap()
}

fn batches(n: usize, b: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(b).map(|c| c.to_vec()).collect()
}

fn ids(idx: &[usize]) -> Vec<u64> {
    idx.iter().map(|&i| i as u64).collect()
}

fn onehot(labels: &[usize], idx: &[usize]) -> Tensor<f64> {
    let mut t = vec![0.0; idx.len() * 3];
    for (b, &i) in idx.iter().enumerate() {
        t[b * 3 + labels[i]] = 1.0;
    }
    Tensor::matrix(idx.len(), 3, t).unwrap()
}

/// Recovered weights `W̃2 - ε_acc`.
fn recovered_head(s: &LocalSession) -> Vec<i128> {
    let noisy = s.passive().noisy_weights();
    let ledger = s.active().ledger();
    noisy.data().iter().zip(ledger.data()).map(|(a, b)| a - b).collect()
}

#[test]
fn protocol_matches_fixed_point_oracle_bit_for_bit() {
    let h = hp(24);
    let d = data(6);
    let mut s = local(&h, NoiseConfig::seeded(NoiseBounds::default(), 5), &d);
    let fx = Fixed::new(h.frac_bits).unwrap();
    let mut oracle = CentralModel::init(fx, &arch(), h.seed).unwrap();
    let lr = fx.from_real(h.lr, 1).unwrap();
    for idx in batches(6, 2) {
        let x = d.x.gather_rows(&idx);
        s.train_step(&ids(&idx), &x).unwrap();
        oracle.train_batch(&encode_inputs(&fx, &x).unwrap(), &onehot(&d.labels, &idx), lr).unwrap();
        assert_eq!(recovered_head(&s), oracle.head.w.data());
        assert_eq!(s.active().extractor(), &oracle.extractor);
    }
    assert!(s.active().ledger().data().iter().any(|&v| v != 0));
    assert_eq!(s.active().in_flight(), 0);
    assert_eq!(s.passive().in_flight(), 0);
}

#[test]
fn noise_does_not_change_predictions_or_weights() {
    let h = hp(20);
    let d = data(6);
    let mut on = local(&h, NoiseConfig::seeded(NoiseBounds::default(), 11), &d);
    let mut off = local(&h, NoiseConfig::off(), &d);
    for idx in batches(6, 3) {
        let x = d.x.gather_rows(&idx);
        on.train_step(&ids(&idx), &x).unwrap();
        off.train_step(&ids(&idx), &x).unwrap();
    }
    let all: Vec<usize> = (0..6).collect();
    on.infer(&ids(&all), &d.x).unwrap();
    off.infer(&ids(&all), &d.x).unwrap();
    assert_eq!(on.passive().predictions(), off.passive().predictions());
    assert_eq!(recovered_head(&on), off.passive().noisy_weights().data());
    assert!(off.active().ledger().data().iter().all(|&v| v == 0));
    assert_ne!(on.passive().noisy_weights(), off.passive().noisy_weights());
}

#[test]
fn phase_metrics_count_samples() {
    let h = hp(16);
    let d = data(4);
    let mut s = local(&h, NoiseConfig::off(), &d);
    let all: Vec<usize> = (0..4).collect();
    let out = s.train_step(&ids(&all), &d.x).unwrap();
    assert_eq!((out.samples, out.messages, out.step), (4, 6, 0));
    let m = s.end_phase(0, Mode::Train).unwrap();
    assert_eq!(m.count, 4);
    assert!(m.mean_loss() > 0.0);
    let out = s.infer(&ids(&all), &d.x).unwrap();
    assert_eq!(out.messages, 3);
    let m = s.end_phase(0, Mode::Infer).unwrap();
    assert_eq!(m.count, 4);
    assert!(m.correct <= 4);
    assert_eq!(s.end_phase(1, Mode::Infer).unwrap().count, 0);
}

#[test]
fn failed_step_rolls_back_both_parties() {
    let h = hp(16);
    let d = data(4);
    let mut s = local(&h, NoiseConfig::seeded(NoiseBounds::default(), 2), &d);
    let before = (s.passive().noisy_weights(), s.active().extractor().clone());
    let err = s.train_step(&[0, 99], &d.x.gather_rows(&[0, 1])).unwrap_err();
    assert!(matches!(err, ProtocolError::MissingLabel(99)), "{err}");
    assert_eq!(before, (s.passive().noisy_weights(), s.active().extractor().clone()));
    assert_eq!(s.active().in_flight(), 0);
    s.train_step(&[0, 1], &d.x.gather_rows(&[0, 1])).unwrap();
}

#[test]
fn out_of_order_messages_are_rejected() {
    let h = hp(16);
    let d = data(2);
    let active = ActiveParty::new(key().1.clone(), &arch(), &h, NoiseConfig::off(), Some(1)).unwrap();
    let mut passive = PassiveParty::new(key().0.clone(), &active.session_config(), h.seed, Some(0), Some(2), label_map(&d)).unwrap();
    let mut active = active;
    let first = active.forward(7, 0, &[0, 1], &d.x, Mode::Train).unwrap();
    assert!(matches!(active.forward(7, 0, &[0, 1], &d.x, Mode::Train), Err(ProtocolError::DuplicateBatch(7))));
    let sums = passive.handle(&first).unwrap().unwrap();
    // Replaying the activation for the same batch is refused.
    assert!(matches!(passive.handle(&first), Err(ProtocolError::DuplicateBatch(7))));
    let denoised = active.handle(&sums).unwrap().unwrap();
    // The key holder now waits for ENC_WGRAD, not another weighted sum.
    assert!(matches!(active.handle(&sums), Err(ProtocolError::OutOfOrder { id: 7, .. })));
    let stray = ProtocolMessage::new(8, 0, denoised.body.clone());
    assert!(matches!(passive.handle(&stray), Err(ProtocolError::MissingCache(8))));
    assert!(passive.handle(&denoised).unwrap().is_some());
}

#[test]
fn handshake_refuses_mismatched_configuration() {
    let h = hp(16);
    let d = data(2);
    let active = ActiveParty::new(key().1.clone(), &arch(), &h, NoiseConfig::off(), Some(1)).unwrap();
    let mut config = active.session_config();
    config.lr = 0.5;
    config.classes = 4;
    let passive = PassiveParty::new(key().0.clone(), &config, h.seed, Some(0), Some(2), HashMap::new()).unwrap();
    let err = LocalSession::new(active, passive).err().unwrap().to_string();
    assert!(err.contains("lr: 0.2 vs 0.5"), "{err}");
    assert!(err.contains("classes: 3 vs 4"), "{err}");
    drop(d);
}

#[test]
fn remote_session_over_tcp_matches_local() {
    let h = hp(20);
    let d = data(4);
    let noise = NoiseConfig::seeded(NoiseBounds::default(), 4);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let labels = label_map(&d);
    let active = ActiveParty::new(key().1.clone(), &arch(), &h, noise, Some(1)).unwrap();
    let config = active.session_config();
    let passive_config = config.clone();
    let seed = h.seed;
    let server = thread::spawn(move || {
        let mut ch = TcpChannel::accept(&listener).unwrap();
        run_passive(&mut ch, &passive_config, |pk| PassiveParty::new(pk, &passive_config, seed, noise.seed, Some(2), labels)).unwrap()
    });
    let ch = TcpChannel::connect(addr, Duration::from_secs(5)).unwrap();
    let mut remote = RemoteSession::connect(active, ch).unwrap();
    let mut loc = local(&h, noise, &d);
    for idx in batches(4, 2) {
        let x = d.x.gather_rows(&idx);
        remote.train_step(&ids(&idx), &x).unwrap();
        loc.train_step(&ids(&idx), &x).unwrap();
    }
    let metrics = remote.end_phase(0, Mode::Train).unwrap();
    assert_eq!(metrics, loc.end_phase(0, Mode::Train).unwrap());
    remote.infer(&[0, 1, 2, 3], &d.x).unwrap();
    remote.shutdown().unwrap();
    let passive = server.join().unwrap();
    assert_eq!(remote.active().extractor(), loc.active().extractor());
    assert_eq!(remote.active().ledger(), loc.active().ledger());
    assert_eq!(passive.noisy_weights(), loc.passive().noisy_weights());
    assert_eq!(passive.predictions().len(), 4);
}

#[test]
fn replayed_hello_ends_the_passive_loop() {
    let h = hp(16);
    let active = ActiveParty::new(key().1.clone(), &arch(), &h, NoiseConfig::off(), Some(1)).unwrap();
    let config = active.session_config();
    let (mut a, mut p) = crate::transport::duplex();
    let pk = key().0.clone();
    let hello = ProtocolMessage::new(0, 0, Body::Control(Control::Hello { version: config.version, public_key: pk.clone(), config: config.clone() }));
    a.send(&hello).unwrap();
    a.send(&hello).unwrap();
    let cfg = config.clone();
    let err = run_passive(&mut p, &config, |pk| PassiveParty::new(pk, &cfg, 0, Some(0), Some(0), HashMap::new())).unwrap_err();
    assert!(matches!(err, ProtocolError::UnexpectedControl(_)), "{err}");
}
