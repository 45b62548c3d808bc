use fedglomo::algorithms::{RoundStatus, SCHEMA_VERSION};
use fedglomo::harness::{parse_config, prepare};
use fedglomo::quantizer::payload_bits;

fn cfg(algorithm: &str, quantizer: &str, extra: &str) -> fedglomo::harness::RunConfig {
    parse_config(
        &format!("algorithm = \"{algorithm}\"\nseed = 3\n[problem]\nclients = 10\nfeatures = 7\n[hyper]\nrounds = 6\nclients_per_round = 4\nlocal_steps = 2\n{extra}{quantizer}"),
        None,
    )
    .unwrap()
}

#[test]
fn glomo_uplink_is_two_messages_per_client() {
    let p = prepare(&cfg("fedglomo", "[quantizer]\nbits = 2\n", "")).unwrap();
    let per = payload_bits(p.problem.dim(), &p.quantizer).exact;
    let out = p.run().unwrap();
    // Round 0 deltas are exactly zero and cost a bare norm header.
    assert_eq!(out.records[0].bits_up, 4 * (per + 32));
    for r in &out.records[1..] {
        assert_eq!(r.bits_up, 4 * 2 * per);
        assert_eq!(r.bits_down, 4 * 2 * 32 * 7);
    }
}

#[test]
fn fedpaq_uplink_is_one_message_per_client() {
    let p = prepare(&cfg("fedpaq", "[quantizer]\nbits = 3\n", "")).unwrap();
    let per = payload_bits(p.problem.dim(), &p.quantizer).exact;
    let out = p.run().unwrap();
    let mut total = 0;
    for r in &out.records {
        assert_eq!(r.bits_up, 4 * per);
        assert_eq!(r.bits_down, 4 * 32 * 7);
        total += r.bits_up;
        assert_eq!(r.cumulative_bits, total);
    }
}

#[test]
fn full_participation_at_round_zero_counts_every_client() {
    let p = prepare(&cfg("fedglomo", "", "full_participation_round0 = true\n")).unwrap();
    let out = p.run().unwrap();
    assert_eq!(out.records[0].clients, 10);
    assert!(out.records[1..].iter().all(|r| r.clients == 4));
}

#[test]
fn records_round_trip_and_are_versioned() {
    let out = prepare(&cfg("fedglomo", "[quantizer]\nbits = 2\n", "[probes]\nalpha_every = 1\nlemma_every = 1\nbcd_every = 2\n"))
        .unwrap()
        .run()
        .unwrap();
    for r in &out.records {
        assert_eq!(r.v, SCHEMA_VERSION);
        assert_eq!(r.status, RoundStatus::Ok);
        let text = serde_json::to_string(r).unwrap();
        let back: fedglomo::algorithms::RoundRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(&back, r);
        assert!(r.alpha_hat.unwrap() <= 10.0 + 1e-9);
    }
}
