//! Registers the training crops of every phantom client into a style bank,
//! serializes it and draws a few anatomically matched styles.

use a3dfdg::federation::{build_bank, Federation, FederationConfig};
use a3dfdg::phantom::{AnalyticSliceScores, PhantomSpec};
use a3dfdg::rng;
use a3dfdg::stylebank::{bank_size_bytes, deserialize_bank, serialize_bank};

fn main() -> a3dfdg::error::Result<()> {
    let spec = PhantomSpec { volumes_per_client: 5, ..PhantomSpec::default() };
    let fed = Federation::from_phantom(&spec)?;
    let cfg = FederationConfig::default();
    let (bank, reports) = build_bank(&fed, &cfg, 4, &AnalyticSliceScores)?;

    for (client, bins) in bank.entries() {
        let counts: Vec<String> = bins.iter().map(|(b, s)| format!("{b}:{}", s.len())).collect();
        println!("client {client}: bins {}", counts.join(" "));
    }
    let ids: usize = reports.iter().map(|r| r.registered.len()).sum();
    println!("{} styles from {ids} training volumes, block {:?}", bank.style_count(), bank.block_shape());

    let bytes = serialize_bank(&bank);
    assert_eq!(deserialize_bank(&bytes)?, bank);
    println!("serialized size {} bytes ({} reported)", bytes.len(), bank_size_bytes(&bank));

    let mut r = rng::stream(7, &[1]);
    for z in [25.0, 50.0, 75.0] {
        let got = bank.retrieve_style(0, z, &mut r)?;
        println!("client 0 asks for z={z}: style from client {} bin {}", got.client_id, got.bin);
    }
    Ok(())
}
