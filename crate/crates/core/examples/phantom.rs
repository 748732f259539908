//! Generates the phantom federation and prints what distinguishes the
//! clients: intensity, z coverage and which organs they contain.

use a3dfdg::phantom::{generate_client_dataset, make_out_of_federation_client, mean_foreground_intensity, PhantomSpec};

fn main() -> a3dfdg::error::Result<()> {
    let spec = PhantomSpec::default();
    spec.validate()?;
    let (train, val, test) = spec.split_counts();
    println!("{} clients, {train}/{val}/{test} train/val/test volumes of {:?}", spec.clients.len(), spec.shape);

    let organs = spec.organ_names();
    let report = |name: String, vols: &[a3dfdg::phantom::LabeledVolume]| {
        let mean = vols.iter().map(mean_foreground_intensity).sum::<f64>() / vols.len() as f64;
        let present: Vec<&str> = organs
            .iter()
            .filter(|(c, _)| vols.iter().any(|lv| lv.labels.iter().any(|l| l == c)))
            .map(|(_, n)| n.as_str())
            .collect();
        let z = vols[0].volume.z_extent();
        println!("{name:>6}: body mean {mean:7.1} HU, z {:4.0}..{:<4.0} organs {}", z.0, z.1, present.join(","));
    };
    for c in 0..spec.clients.len() as u32 {
        let ds = generate_client_dataset(&spec, c)?;
        report(format!("c{c}"), &ds.train);
    }
    report("ood".into(), &make_out_of_federation_client(&spec)?);
    Ok(())
}
