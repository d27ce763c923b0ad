//! Frames per second for a few decoder settings.

use std::time::Instant;

use polarseq_core::channel::{ChannelKind, SnrAxis};
use polarseq_core::code::CrcConfig;
use polarseq_core::construction::nr_sequence;
use polarseq_core::decoder::DecoderConfig;
use polarseq_core::reward::{estimate_bler, SimSetup, StopRule};

fn main() {
    let cases = [
        (16, 8, CrcConfig::NONE, DecoderConfig::sc(), 3.0),
        (64, 32, CrcConfig::NONE, DecoderConfig::sc(), 3.0),
        (64, 32, CrcConfig::CRC4, DecoderConfig::ca_scl(8), 2.5),
    ];
    for (n, k, crc, decoder, snr) in cases {
        let setup = SimSetup {
            n,
            crc,
            channel: ChannelKind::Awgn,
            axis: SnrAxis::EbN0,
            decoder,
        };
        let seq = nr_sequence(n).unwrap();
        let frames = 20_000;
        let start = Instant::now();
        let est = estimate_bler(
            seq.info_set(k).unwrap(),
            &setup,
            snr,
            &StopRule::fixed(frames),
            1,
        )
        .unwrap();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "N={n} K={k} L={} crc={}: {:.0} frames/s, bler {:.4}",
            decoder.list_size,
            crc.label(),
            frames as f64 / secs,
            est.bler()
        );
    }
}
