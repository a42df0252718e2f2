//! Rebuilding a mirrored HTTP response from shuffled, duplicated segments,
//! and round-tripping them through a capture file.

use std::io::Cursor;
use std::time::Duration;

use contentnet::cache::replay::{ReplayReader, ReplayWriter};
use contentnet::cache::{extract_body, segment_stream, Reassembler, SegmentOutcome};
use contentnet::flow::FlowKey;
use contentnet::http::HttpResponse;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let body: Vec<u8> = (0..200_000u32).map(|i| (i * 31 % 251) as u8).collect();
    let stream = HttpResponse::new(200, body.clone()).to_bytes();
    let flow = FlowKey::new("10.0.0.4:80".parse()?, "10.0.0.3:8080".parse()?);

    let mut segments = segment_stream(flow, 0xfff0_0000, &stream, 1460);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dups: Vec<_> = segments.choose_multiple(&mut rng, 20).cloned().collect();
    segments.extend(dups);
    segments.shuffle(&mut rng);
    println!(
        "{} segments after shuffling and duplication",
        segments.len()
    );

    let mut capture = ReplayWriter::new(Vec::new())?;
    for s in &segments {
        capture.write(s)?;
    }
    let bytes = capture.into_inner();
    println!("capture file: {} bytes", bytes.len());

    let mut rx = Reassembler::default();
    let mut rebuilt = None;
    for seg in ReplayReader::new(Cursor::new(bytes))? {
        if let SegmentOutcome::Complete(s) = rx.observe_segment(&seg?, Duration::ZERO) {
            rebuilt = Some(s);
        }
    }
    let rebuilt = rebuilt.expect("stream completes");
    let resp = extract_body(&rebuilt)?;
    println!(
        "status {}, {} body bytes, identical: {}",
        resp.status,
        resp.body.len(),
        resp.body == body
    );

    let mut gappy = segment_stream(flow, 7, &stream, 1460);
    gappy.remove(gappy.len() / 2);
    let mut rx = Reassembler::default();
    for seg in &gappy {
        rx.observe_segment(seg, Duration::ZERO);
    }
    println!(
        "with a missing segment: {:?}",
        rx.reassemble(&flow).map(|s| s.len())
    );
    Ok(())
}
