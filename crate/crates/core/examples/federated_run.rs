//! A small federated run of every augmentation arm on the phantom federation.
//!
//! ```text
//! cargo run --release --example federated_run -- 3 20
//! ```

use a3dfdg::federation::{build_default_bank, format_bytes, run_federation, Augmentation, Federation, FederationConfig};
use a3dfdg::phantom::PhantomSpec;

fn main() -> a3dfdg::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let rounds: usize = args.next().map(|a| a.parse().expect("rounds")).unwrap_or(2);
    let local_iters: usize = args.next().map(|a| a.parse().expect("local iterations")).unwrap_or(10);

    let spec = PhantomSpec { volumes_per_client: 5, out_of_federation_volumes: 2, ..PhantomSpec::default() };
    let fed = Federation::from_phantom(&spec)?;
    println!("clients {:?}, training sizes {:?}", fed.clients.iter().map(|c| c.id).collect::<Vec<_>>(), fed.data_sizes());
    let base = FederationConfig { rounds, local_iters, ..FederationConfig::default() };
    let bank = build_default_bank(&fed, &base)?;

    for arm in Augmentation::ALL {
        let cfg = FederationConfig { augmentation: arm, ..base.clone() };
        let reports = run_federation(&cfg, &fed, Some(&bank))?;
        for r in &reports {
            let losses: Vec<String> = r.client_losses.iter().map(|l| format!("{l:.3}")).collect();
            println!("{arm:32} round {} losses [{}] traffic {}", r.round, losses.join(" "), format_bytes(r.cumulative_bytes));
        }
        let last = reports.last().expect("rounds > 0");
        if let (Some(i), Some(o)) = (&last.in_fed, &last.out_of_fed) {
            println!("{arm:32} in-federation DSC {:.2}, held-out DSC {:.2}", i.global_dsc, o.global_dsc);
        }
    }
    Ok(())
}
