//! Swaps the low-frequency amplitude of one phantom crop with another
//! client's and shows how the intensities move while air stays fixed.
//!
//! ```text
//! cargo run --release --example style_transfer -- 0.5
//! ```

use a3dfdg::phantom::{generate_client_dataset, PhantomSpec};
use a3dfdg::spectral::{apply_style, block_shape, fft3, style_of, DEFAULT_BETA};
use a3dfdg::volume::crop_sub_volume;

fn body_mean(data: &ndarray::Array3<f32>) -> f64 {
    let body: Vec<f64> = data.iter().filter(|&&v| v > -200.0).map(|&v| v as f64).collect();
    body.iter().sum::<f64>() / body.len().max(1) as f64
}

fn main() -> a3dfdg::error::Result<()> {
    let alpha: f32 = std::env::args().nth(1).map(|a| a.parse().expect("alpha in [0, 1]")).unwrap_or(0.0);
    let spec = PhantomSpec { volumes_per_client: 3, ..PhantomSpec::default() };
    let src = generate_client_dataset(&spec, 0)?;
    let dst = generate_client_dataset(&spec, 4)?;
    let crop = spec.crop_size;
    let origin = [16, 16, 16];

    let sv = crop_sub_volume(&src.train[0].volume, origin, crop)?;
    let other = crop_sub_volume(&dst.train[0].volume, origin, crop)?;
    let spectrum = fft3(sv.data.view());
    let dc = spectrum.shape().map(|n| n / 2);
    println!("crop {:?}, DC amplitude {:.3e}, band block {:?}", crop, spectrum.amplitude[dc], block_shape(DEFAULT_BETA, crop)?);

    let target = style_of(other.data.view(), DEFAULT_BETA)?;
    let out = apply_style(&sv, &target, alpha, DEFAULT_BETA, -200.0)?;
    let air_kept = sv.data.iter().zip(out.data.iter()).filter(|(a, _)| **a < -200.0).all(|(a, b)| a == b);
    println!("alpha {alpha}: body mean {:.1} HU -> {:.1} HU (other client {:.1} HU)", body_mean(&sv.data), body_mean(&out.data), body_mean(&other.data));
    println!("air voxels unchanged: {air_kept}");
    Ok(())
}
