//! Communication cost of a federated run: model broadcasts plus the one-off
//! style bank download.
//!
//! ```text
//! cargo run --example traffic -- 400 6300000000
//! ```

use a3dfdg::federation::{format_bytes, traffic_report};
use a3dfdg::segmodel::{checkpoint_size_bytes, SegModel};

fn main() {
    let mut args = std::env::args().skip(1);
    let rounds: u64 = args.next().map(|a| a.parse().expect("rounds")).unwrap_or(400);
    let model_bytes: u64 = args
        .next()
        .map(|a| a.parse().expect("model bytes"))
        .unwrap_or_else(|| checkpoint_size_bytes(&SegModel::init(6, 0)) as u64);

    let plain = traffic_report(rounds, model_bytes, 0);
    println!("{rounds} rounds x {} = {}", format_bytes(model_bytes), format_bytes(plain.total_bytes));
    let short = traffic_report(5, model_bytes, 230_000);
    for r in 1..=5 {
        println!("  5-round run with styles, after round {r}: {}", format_bytes(short.after_round(r)));
    }
}
