//! Encodes each message kind, prints its frame layout, and shows that a
//! single flipped payload byte is caught by the checksum.
//!
//! Usage: `cargo run --example wire_frames`

use fednas::autodiff::ModelWeights;
use fednas::comm::{decode, decode_header, encode, RoundMessage, HEADER_BYTES, TRAILER_BYTES};
use fednas::search_space::ArchParams;
use fednas::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let weights = ModelWeights(vec![Tensor::full(&[4, 3, 3, 3], 0.25), Tensor::full(&[10], -1.0)]);
    let messages = [
        RoundMessage::Register {
            client_id: 2,
            config_hash: [7; 32],
        },
        RoundMessage::GlobalUpdate {
            round: 1,
            weights: weights.clone(),
            arch: Some(ArchParams::zeros()),
        },
        RoundMessage::LocalResult {
            round: 1,
            client_id: 2,
            n_k: 1250,
            mean_train_loss: 2.1,
            weights,
            arch: Some(ArchParams::zeros()),
        },
        RoundMessage::GlobalModelEval {
            round: 1,
            loss: 2.0,
            acc: 0.31,
        },
        RoundMessage::Shutdown { reason: "done".into() },
    ];
    for msg in &messages {
        let frame = encode(msg);
        let header = decode_header(&frame[..HEADER_BYTES])?;
        assert_eq!(&decode(&frame)?, msg);
        println!(
            "{:<16} header {HEADER_BYTES} B + payload {} B + trailer {TRAILER_BYTES} B = {} B",
            msg.kind().name(),
            header.payload_len,
            frame.len()
        );
    }

    let mut frame = encode(&messages[1]);
    frame[HEADER_BYTES + 40] ^= 0x10;
    match decode(&frame) {
        Err(e) => println!("flipped payload byte rejected: {e}"),
        Ok(_) => println!("flipped payload byte went unnoticed"),
    }
    Ok(())
}
