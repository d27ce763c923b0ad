use polarseq_core::channel::{
    bpsk_modulate, frame_rng, llr_demodulate, transmit, ChannelKind, ChannelModel, SnrAxis,
};
use polarseq_core::code::CrcConfig;
use polarseq_core::construction::nr_sequence;
use polarseq_core::decoder::{decode, sc_decode, scl_decode, DecoderConfig, Metric};
use polarseq_core::reward::{estimate_bler, SimSetup, StopRule};
use rand::Rng;

fn setup(decoder: DecoderConfig, crc: CrcConfig) -> SimSetup {
    SimSetup {
        n: 64,
        crc,
        channel: ChannelKind::Awgn,
        axis: SnrAxis::EbN0,
        decoder,
    }
}

#[test]
fn noiseless_frames_decode_exactly() {
    let nr = nr_sequence(64).unwrap();
    let mut rng = frame_rng(1, 0);
    for k in [5, 20, 36, 64] {
        let code = nr.code(k, CrcConfig::CRC4).unwrap();
        let payload: Vec<u8> = (0..code.payload_len())
            .map(|_| rng.random_range(0..2))
            .collect();
        let llrs: Vec<f64> = bpsk_modulate(&code.encode(&payload).unwrap())
            .iter()
            .map(|s| 20.0 * s)
            .collect();
        for dec in [DecoderConfig::sc(), DecoderConfig::ca_scl(8)] {
            let out = decode(&llrs, &code, &dec).unwrap();
            assert_eq!(out.payload, payload, "K={k} {dec:?}");
            assert!(out.crc_pass);
        }
    }
}

#[test]
fn sc_path_is_in_the_list_or_worse() {
    // The SC decision is one of the 2^K paths; a wider list never keeps a
    // best path whose metric is worse than the SC path's.
    let code = nr_sequence(64).unwrap().code(32, CrcConfig::NONE).unwrap();
    let dec = DecoderConfig {
        list_size: 8,
        metric: Metric::Exact,
        crc_aided: false,
    };
    let sigma2 = SnrAxis::EbN0.sigma2(1.0, 0.5).unwrap();
    let model = ChannelModel::new(ChannelKind::Awgn, sigma2).unwrap();
    for f in 0..300 {
        let mut rng = frame_rng(2, f);
        let payload: Vec<u8> = (0..32).map(|_| rng.random_range(0..2)).collect();
        let rx = transmit(
            &bpsk_modulate(&code.encode(&payload).unwrap()),
            &model,
            &mut rng,
        );
        let llrs = llr_demodulate(&rx, sigma2);
        let sc = sc_decode(&llrs, &code, Metric::Exact).unwrap();
        let list = scl_decode(&llrs, &code, &dec).unwrap();
        assert!(list
            .windows(2)
            .all(|w| w[0].path_metric <= w[1].path_metric));
        assert!(list[0].path_metric <= sc.path_metric + 1e-9, "frame {f}");
    }
}

#[test]
fn crc_aided_list_beats_sc() {
    let nr = nr_sequence(64).unwrap();
    let info = nr.info_set(32).unwrap();
    let stop = StopRule::fixed(3000);
    let sc = estimate_bler(
        info,
        &setup(DecoderConfig::sc(), CrcConfig::CRC4),
        2.0,
        &stop,
        5,
    )
    .unwrap();
    let scl = estimate_bler(
        info,
        &setup(DecoderConfig::ca_scl(8), CrcConfig::CRC4),
        2.0,
        &stop,
        5,
    )
    .unwrap();
    assert!(
        scl.bler() < sc.bler(),
        "CA-SCL {} vs SC {}",
        scl.bler(),
        sc.bler()
    );
}

#[test]
fn bler_estimates_are_reproducible() {
    let nr = nr_sequence(64).unwrap();
    let s = setup(DecoderConfig::ca_scl(4), CrcConfig::CRC4);
    let stop = StopRule {
        target_errors: 30,
        max_frames: 5000,
    };
    let a = estimate_bler(nr.info_set(40).unwrap(), &s, 1.5, &stop, 9).unwrap();
    let b = estimate_bler(nr.info_set(40).unwrap(), &s, 1.5, &stop, 9).unwrap();
    assert_eq!(a, b);
    assert!(a.errors >= 30 || a.frames == 5000);
}
