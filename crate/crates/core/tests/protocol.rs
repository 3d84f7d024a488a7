mod common;

use std::io::Write;
use std::thread;

use num_bigint::BigInt;
use num_traits::Zero;
use paillier_cnn::model::{argmax, infer_plain_fixed, infer_plain_fixed_with, load_model, pixels_to_raw, StageOp};
use paillier_cnn::paillier::{keygen, PrivateKey};
use paillier_cnn::protocol::frame::{encode, read_message, write_message};
use paillier_cnn::protocol::pipe::duplex;
use paillier_cnn::protocol::{
    client_start, server_handle_session, Direction, ErrorCode, FrameError, Message, ModelRegistry,
    ProtocolError, DEFAULT_MAX_FRAME,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn key(seed: u64) -> PrivateKey {
    keygen(512, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()
}

fn toy_registry() -> ModelRegistry {
    let mut r = ModelRegistry::new();
    r.insert("toy", load_model(&common::fixture("toy_model.json"), None).unwrap());
    r.insert("toy_overflow", load_model(&common::fixture("toy_overflow.json"), None).unwrap());
    r
}

#[test]
fn pipe_session_matches_oracle() {
    let registry = toy_registry();
    let spec = registry.get("toy").unwrap();
    let sk = key(1);
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    for _ in 0..5 {
        let pixels = common::random_image(&mut rng, 64);
        let (mut client, mut server) = duplex();
        let outcome = thread::scope(|s| {
            let reg = &registry;
            let h = s.spawn(move || {
                server_handle_session(&mut server, reg, &mut ChaCha20Rng::seed_from_u64(9), DEFAULT_MAX_FRAME)
            });
            let out = client_start(&mut client, &sk, &spec, "toy", &pixels, &mut rng, true, DEFAULT_MAX_FRAME)
                .unwrap();
            let summary = h.join().unwrap().unwrap();
            assert_eq!(summary.rounds, out.rounds);
            out
        });
        let oracle = infer_plain_fixed(&spec, &pixels_to_raw(&pixels)).unwrap();
        assert_eq!(outcome.logits, oracle.logits);
        assert_eq!(outcome.class, argmax(&oracle.logits).unwrap());
        assert_eq!(outcome.rounds, vec![72]);
        let transcript = outcome.transcript.unwrap();
        let names: Vec<_> = transcript.iter().map(|(d, m)| (*d, m.name())).collect();
        assert_eq!(
            names,
            vec![
                (Direction::Sent, "HELLO"),
                (Direction::Sent, "INFER_REQUEST"),
                (Direction::Received, "SIGN_REQUEST"),
                (Direction::Sent, "SIGN_RESPONSE"),
                (Direction::Received, "RESULT"),
            ]
        );
    }
}

/// Plays the client by hand over a pipe, returning what the server sent.
fn scripted(
    registry: &ModelRegistry,
    sk: &PrivateKey,
    model_id: &str,
    pixels: &[u8],
    mut answer: impl FnMut(&[num_bigint::BigUint]) -> Vec<bool>,
) -> (Vec<Message>, Result<paillier_cnn::protocol::SessionSummary, ProtocolError>) {
    let (mut client, mut server) = duplex();
    thread::scope(|s| {
        let h = s.spawn(move || {
            server_handle_session(&mut server, registry, &mut ChaCha20Rng::seed_from_u64(4), DEFAULT_MAX_FRAME)
        });
        let pk = sk.public();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let cells = pixels
            .iter()
            .map(|&p| pk.encrypt_signed(&BigInt::from(p), &mut rng).unwrap().into_value())
            .collect();
        write_message(&mut client, &Message::Hello { model_id: model_id.into(), n: pk.n().clone(), g: pk.g().clone() })
            .unwrap();
        write_message(&mut client, &Message::InferRequest { shape: vec![1, 8, 8], cells }).unwrap();
        let mut received = Vec::new();
        loop {
            match read_message(&mut client, DEFAULT_MAX_FRAME) {
                Ok(Message::SignRequest { cells }) => {
                    let bits = answer(&cells);
                    received.push(Message::SignRequest { cells });
                    let _ = write_message(&mut client, &Message::SignResponse { bits });
                }
                Ok(m) => received.push(m),
                Err(FrameError::Closed) => break,
                Err(e) => panic!("{e}"),
            }
        }
        (received, h.join().unwrap())
    })
}

#[test]
fn all_zero_masks_give_bias_only_logits() {
    let registry = toy_registry();
    let spec = registry.get("toy").unwrap();
    let sk = key(2);
    let pixels = common::random_image(&mut ChaCha20Rng::seed_from_u64(8), 64);
    let (received, result) = scripted(&registry, &sk, "toy", &pixels, |cells| vec![false; cells.len()]);
    result.unwrap();
    let Some(Message::Result { cells, scale }) = received.last() else { panic!("{received:?}") };
    let logits: Vec<BigInt> = cells
        .iter()
        .map(|c| sk.decrypt_signed(&paillier_cnn::paillier::Ciphertext::from_raw(c.clone())).unwrap())
        .collect();
    let forced =
        infer_plain_fixed_with(&spec, &pixels_to_raw(&pixels), None, &mut |_, v| vec![false; v.len()]).unwrap();
    assert_eq!(logits, forced.logits);
    let StageOp::Dense(d) = &spec.stages()[4].op else { panic!() };
    assert_eq!(logits, d.bias);
    assert_eq!(scale, &spec.final_scale().total().to_string());
}

#[test]
fn short_sign_response_is_bad_response() {
    let registry = toy_registry();
    let sk = key(3);
    let (received, result) = scripted(&registry, &sk, "toy", &[7; 64], |cells| vec![true; cells.len() - 1]);
    assert!(matches!(received.last(), Some(Message::Error { code: ErrorCode::BadResponse, .. })));
    assert_eq!(result.unwrap_err().code(), ErrorCode::BadResponse);
}

#[test]
fn unknown_model_and_overflow_config() {
    let registry = toy_registry();
    let sk = key(4);
    let (received, result) = scripted(&registry, &sk, "lenet", &[0; 64], |_| unreachable!());
    assert_eq!(received.len(), 1);
    assert!(matches!(&received[0], Message::Error { code: ErrorCode::UnknownModel, .. }));
    assert_eq!(result.unwrap_err().code(), ErrorCode::UnknownModel);

    let (received, result) = scripted(&registry, &sk, "toy_overflow", &[0; 64], |_| unreachable!());
    assert!(matches!(&received[0], Message::Error { code: ErrorCode::OverflowConfig, .. }), "{received:?}");
    assert_eq!(result.unwrap_err().code(), ErrorCode::OverflowConfig);
}

#[test]
fn client_rejects_wrong_size_before_io() {
    let registry = toy_registry();
    let spec = registry.get("toy").unwrap();
    let sk = key(5);
    let (mut client, server) = duplex();
    drop(server);
    let err = client_start(&mut client, &sk, &spec, "toy", &[0; 63], &mut ChaCha20Rng::seed_from_u64(0), false, DEFAULT_MAX_FRAME)
        .unwrap_err();
    assert!(matches!(err, ProtocolError::Input(_)), "{err}");
}

#[test]
fn truncated_server_reply_aborts_client() {
    let registry = toy_registry();
    let spec = registry.get("toy").unwrap();
    let sk = key(6);
    let (mut client, mut server) = duplex();
    let fake = thread::spawn(move || {
        read_message(&mut server, DEFAULT_MAX_FRAME).unwrap();
        read_message(&mut server, DEFAULT_MAX_FRAME).unwrap();
        let frame = encode(&Message::SignRequest { cells: vec![num_bigint::BigUint::from(12345u32); 72] });
        server.write_all(&frame[..frame.len() / 2]).unwrap();
    });
    let err = client_start(&mut client, &sk, &spec, "toy", &[1; 64], &mut ChaCha20Rng::seed_from_u64(0), false, DEFAULT_MAX_FRAME)
        .unwrap_err();
    fake.join().unwrap();
    assert!(matches!(err, ProtocolError::Frame(FrameError::Incomplete { .. })), "{err}");
}

#[test]
fn server_error_surfaces_at_client() {
    let registry = toy_registry();
    let spec = registry.get("toy").unwrap();
    let sk = key(7);
    let (mut client, mut server) = duplex();
    thread::scope(|s| {
        let reg = &registry;
        s.spawn(move || server_handle_session(&mut server, reg, &mut ChaCha20Rng::seed_from_u64(0), DEFAULT_MAX_FRAME));
        let err = client_start(&mut client, &sk, &spec, "missing", &[1; 64], &mut ChaCha20Rng::seed_from_u64(0), false, DEFAULT_MAX_FRAME)
            .unwrap_err();
        assert!(matches!(err, ProtocolError::Remote { code: ErrorCode::UnknownModel, .. }), "{err}");
    });
}

#[test]
fn transcripts_differ_but_decrypt_alike() {
    let registry = toy_registry();
    let spec = registry.get("toy").unwrap();
    let sk = key(8);
    let pixels = common::random_image(&mut ChaCha20Rng::seed_from_u64(1), 64);
    let run = |seed: u64| {
        let (mut client, mut server) = duplex();
        thread::scope(|s| {
            let reg = &registry;
            s.spawn(move || server_handle_session(&mut server, reg, &mut ChaCha20Rng::seed_from_u64(seed), DEFAULT_MAX_FRAME));
            client_start(&mut client, &sk, &spec, "toy", &pixels, &mut ChaCha20Rng::seed_from_u64(seed), true, DEFAULT_MAX_FRAME)
                .unwrap()
        })
    };
    let (a, b) = (run(10), run(11));
    assert_eq!(a.logits, b.logits);
    let (ta, tb) = (a.transcript.unwrap(), b.transcript.unwrap());
    for ((_, ma), (_, mb)) in ta.iter().zip(&tb) {
        let cells = |m: &Message| match m {
            Message::InferRequest { cells, .. } | Message::SignRequest { cells } | Message::Result { cells, .. } => {
                cells.clone()
            }
            _ => Vec::new(),
        };
        for (ca, cb) in cells(ma).iter().zip(cells(mb)) {
            assert_ne!(ca, &cb);
        }
    }
}

#[test]
fn sign_bits_match_oracle_signs() {
    let registry = toy_registry();
    let spec = registry.get("toy").unwrap();
    let sk = key(9);
    let pixels = common::random_image(&mut ChaCha20Rng::seed_from_u64(2), 64);
    let mut seen = Vec::new();
    infer_plain_fixed_with(&spec, &pixels_to_raw(&pixels), None, &mut |_, v| {
        let bits: Vec<bool> = v.iter().map(|x| x >= &BigInt::zero()).collect();
        seen.push(bits.clone());
        bits
    })
    .unwrap();
    let mut answered = Vec::new();
    let (_, result) = scripted(&registry, &sk, "toy", &pixels, |cells| {
        let bits = paillier_cnn::protocol::sign_oracle(&sk, cells).unwrap();
        answered.push(bits.clone());
        bits
    });
    result.unwrap();
    assert_eq!(answered, seen);
}

#[test]
fn tcp_concurrent_clients() {
    let registry = toy_registry();
    let spec = registry.get("toy").unwrap();
    let server = paillier_cnn::protocol::Server::bind("127.0.0.1:0", registry, [3; 32]).unwrap();
    let addr = server.local_addr().unwrap();
    let sk = key(10);
    thread::scope(|s| {
        s.spawn(|| server.serve(Some(2), &|_, _, r| assert!(r.is_ok(), "{r:?}")).unwrap());
        let clients: Vec<_> = (0..2u64)
            .map(|i| {
                let (sk, spec) = (&sk, &spec);
                s.spawn(move || {
                    let mut rng = ChaCha20Rng::seed_from_u64(100 + i);
                    let pixels = common::random_image(&mut rng, 64);
                    let mut conn = std::net::TcpStream::connect(addr).unwrap();
                    let out = client_start(&mut conn, sk, spec, "toy", &pixels, &mut rng, false, DEFAULT_MAX_FRAME)
                        .unwrap();
                    let oracle = infer_plain_fixed(spec, &pixels_to_raw(&pixels)).unwrap();
                    assert_eq!(out.logits, oracle.logits);
                })
            })
            .collect();
        for c in clients {
            c.join().unwrap();
        }
    });
}
