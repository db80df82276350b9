use std::net::TcpListener;
use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::codec::{CipherTensor, Evaluator, PlainTensor};
use crate::phe::{keygen, PrivateKey, PublicKey};
use crate::protocol::message::{Body, Control, DecodeContext, Metrics, Mode, ProtocolMessage, SessionConfig, Tag, PROTOCOL_VERSION};

fn key() -> &'static (PublicKey, PrivateKey) {
    static KEY: OnceLock<(PublicKey, PrivateKey)> = OnceLock::new();
    KEY.get_or_init(|| keygen(512, &mut ChaCha20Rng::seed_from_u64(23)).unwrap())
}

fn ctx() -> DecodeContext {
    DecodeContext { public_key: Some(key().0.clone()), operand_bits: 20 }
}

fn config() -> SessionConfig {
    SessionConfig {
        version: PROTOCOL_VERSION,
        frac_bits: 16,
        operand_bits: 20,
        lr: 0.05,
        hidden_dim: 4,
        classes: 3,
        batch_size: 2,
        noise_blind: 1024.0,
        noise_weight: 64.0,
        rerandomize: true,
    }
}

fn cipher(rng: &mut ChaCha20Rng, dims: Vec<usize>, scale: u32) -> CipherTensor {
    let ev = Evaluator::new(key().0.clone(), 16).unwrap();
    let len = dims.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-(1i128 << 30)..(1i128 << 30))).collect();
    ev.encrypt(&PlainTensor::new(dims, scale, data).unwrap(), rng).unwrap()
}

fn plain(rng: &mut ChaCha20Rng, dims: Vec<usize>, scale: u32) -> PlainTensor {
    let len = dims.iter().product();
    PlainTensor::new(dims, scale, (0..len).map(|_| rng.gen::<i128>() >> 8).collect()).unwrap()
}

fn message(kind: u8, seed: u64) -> ProtocolMessage {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (b, c) = (rng.gen_range(1..3), rng.gen_range(1..4));
    let body = match kind {
        0 => {
            let mode = if rng.gen() { Mode::Train } else { Mode::Infer };
            let sample_ids = (0..b).map(|_| rng.gen()).collect();
            Body::EncActivation { mode, sample_ids, acts: cipher(&mut rng, vec![b, c], 16) }
        }
        1 => Body::NoisyWsum { sums: cipher(&mut rng, vec![b, c], 48) },
        2 => Body::DenoisedWsum { sums: plain(&mut rng, vec![b, c], 48) },
        3 => Body::EncWgrad { grad: cipher(&mut rng, vec![c, 2], 32) },
        4 => Body::BlindedWgrad { grad: plain(&mut rng, vec![c, 2], 32), acc_noise: cipher(&mut rng, vec![c, 2], 32) },
        5 => Body::EncActGrad { grad: cipher(&mut rng, vec![b, 2], 48) },
        6 => Body::Control(Control::Hello { version: PROTOCOL_VERSION, public_key: key().0.clone(), config: config() }),
        7 => Body::Control(Control::Refuse { reason: format!("nope {}", rng.gen::<u16>()) }),
        8 => Body::Control(Control::PhaseEnd { epoch: rng.gen(), mode: Mode::Infer }),
        9 => Body::Control(Control::Metrics(Metrics { loss_sum: rng.gen(), correct: rng.gen(), count: rng.gen() })),
        10 => Body::Control(Control::Accept),
        _ => Body::Control(Control::Shutdown),
    };
    ProtocolMessage::new(rng.gen(), rng.gen(), body)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn messages_roundtrip(kind in 0u8..12, seed in any::<u64>()) {
        let msg = message(kind, seed);
        let frame = Frame::new(msg.tag() as u8, msg.encode_payload());
        let (parsed, used) = Frame::parse(&frame.to_bytes(), MAX_FRAME_BYTES).unwrap();
        prop_assert_eq!(used, frame.encoded_len());
        let back = ProtocolMessage::decode(parsed.tag, &parsed.payload, &ctx()).unwrap();
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn truncated_payloads_are_malformed(kind in 0u8..12, seed in any::<u64>(), cut in 1usize..64) {
        let msg = message(kind, seed);
        let payload = msg.encode_payload();
        let cut = cut.min(payload.len());
        let res = ProtocolMessage::decode(msg.tag() as u8, &payload[..payload.len() - cut], &ctx());
        prop_assert!(res.is_err());
    }
}

#[test]
fn unknown_tag_and_missing_key() {
    let msg = message(1, 3);
    let payload = msg.encode_payload();
    assert!(matches!(ProtocolMessage::decode(0x42, &payload, &ctx()), Err(MessageError::UnknownTag(0x42))));
    let no_key = DecodeContext { public_key: None, operand_bits: 20 };
    assert!(matches!(ProtocolMessage::decode(Tag::NoisyWsum as u8, &payload, &no_key), Err(MessageError::NoKey { .. })));
    let mut trailing = payload.clone();
    trailing.push(0);
    assert!(ProtocolMessage::decode(Tag::NoisyWsum as u8, &trailing, &ctx()).is_err());
}

#[test]
fn ciphertexts_outside_the_group_are_rejected() {
    let msg = message(3, 5);
    let mut payload = msg.encode_payload();
    // The first ciphertext's bytes start after id, step, rank, dims, scale and its length prefix.
    let offset = 8 + 4 + 4 + 2 * 4 + 2 + 4;
    for b in &mut payload[offset..offset + 8] {
        *b = 0xff;
    }
    assert!(matches!(ProtocolMessage::decode(Tag::EncWgrad as u8, &payload, &ctx()), Err(MessageError::Malformed { .. })));
}

fn exchange<A: Channel, B: Channel>(a: &mut A, b: &mut B, msgs: &[ProtocolMessage]) {
    for m in msgs {
        a.send(m).unwrap();
        assert_eq!(&b.recv(&ctx()).unwrap(), m);
        b.send(m).unwrap();
        assert_eq!(&a.recv(&ctx()).unwrap(), m);
    }
}

#[test]
fn in_process_and_tcp_carry_identical_bytes() {
    let msgs: Vec<ProtocolMessage> = (0..12).map(|k| message(k, 40 + k as u64)).collect();

    let (a, b) = duplex();
    let local = Transcript::new();
    let (mut a, mut b) = (Recording::new(a, local.clone()), b);
    exchange(&mut a, &mut b, &msgs);

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || TcpChannel::accept(&listener).unwrap());
    let client = TcpChannel::connect(addr, Duration::from_secs(5)).unwrap();
    let mut server = server.join().unwrap();
    let remote = Transcript::new();
    let mut client = Recording::new(client, remote.clone());
    for m in &msgs {
        client.send(m).unwrap();
        let got = server.recv(&ctx()).unwrap();
        assert_eq!(&got, m);
        server.send(&got).unwrap();
        assert_eq!(&client.recv(&ctx()).unwrap(), m);
    }
    assert_eq!(local.to_bytes(), remote.to_bytes());
    assert_eq!(local.frames().unwrap().len(), 24);
}

#[test]
fn oversized_frames_fail_on_both_transports() {
    let (a, b) = duplex();
    let (mut a, mut b) = (a.with_max_frame(32), b.with_max_frame(32));
    let big = Frame::new(Tag::Control as u8, vec![0; 33]);
    assert!(matches!(a.send_frame(&big), Err(TransportError::FrameTooLarge { len: 33, max: 32 })));
    a.send_frame(&Frame::new(7, vec![1])).unwrap();
    assert_eq!(b.recv_frame().unwrap(), Frame::new(7, vec![1]));

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let mut ch = TcpChannel::accept(&listener).unwrap().with_max_frame(32);
        ch.recv_frame()
    });
    let mut client = TcpChannel::connect(addr, Duration::from_secs(5)).unwrap();
    client.send_frame(&big).unwrap();
    assert!(matches!(server.join().unwrap(), Err(TransportError::FrameTooLarge { len: 33, max: 32 })));
}

#[test]
fn in_process_timeout_and_close() {
    let (a, b) = duplex();
    let mut a = a.with_timeout(Duration::from_millis(20));
    assert!(matches!(a.recv_frame(), Err(TransportError::Timeout)));
    drop(b);
    assert!(matches!(a.recv_frame(), Err(TransportError::Closed)));
    assert!(matches!(a.send_frame(&Frame::new(1, vec![])), Err(TransportError::Closed)));
}

#[test]
fn handshake_accepts_matching_and_names_mismatches() {
    let pk = key().0.clone();
    let (mut a, mut b) = duplex();
    let cfg = config();
    let t = {
        let cfg = cfg.clone();
        thread::spawn(move || accept_handshake(&mut b, &cfg).map(|o| o.config))
    };
    initiate_handshake(&mut a, &pk, &cfg).unwrap();
    assert_eq!(t.join().unwrap().unwrap(), cfg);

    let (mut a, mut b) = duplex();
    let mut other = cfg.clone();
    other.frac_bits = 24;
    other.rerandomize = false;
    let t = thread::spawn(move || accept_handshake(&mut b, &other).map(|_| ()));
    let err = initiate_handshake(&mut a, &pk, &cfg).unwrap_err().to_string();
    assert!(err.contains("frac_bits: 16 vs 24"), "{err}");
    assert!(err.contains("rerandomize"), "{err}");
    assert!(matches!(t.join().unwrap(), Err(TransportError::Refused(_))));
}
