//! Dice and average surface distance between two offset spheres.

use a3dfdg::metrics::{asd, dsc};
use ndarray::Array3;

fn sphere(n: usize, center: [f32; 3], r: f32) -> Array3<bool> {
    Array3::from_shape_fn((n, n, n), |(i, j, k)| {
        let d2 = (i as f32 - center[0]).powi(2) + (j as f32 - center[1]).powi(2) + (k as f32 - center[2]).powi(2);
        d2 <= r * r
    })
}

fn main() -> a3dfdg::error::Result<()> {
    let gt = sphere(40, [20.0, 20.0, 20.0], 10.0);
    for shift in [0.0, 1.0, 2.0, 4.0] {
        let pred = sphere(40, [20.0 + shift, 20.0, 20.0], 10.0);
        println!(
            "shift {shift} vox: DSC {:.4}  ASD {:.3} mm (1 mm)  {:.3} mm (anisotropic 2x1x1)",
            dsc(pred.view(), gt.view())?,
            asd(pred.view(), gt.view(), [1.0; 3])?,
            asd(pred.view(), gt.view(), [2.0, 1.0, 1.0])?
        );
    }
    let empty = Array3::from_elem((40, 40, 40), false);
    println!("empty prediction: DSC {}, ASD {:?}", dsc(empty.view(), gt.view())?, asd(empty.view(), gt.view(), [1.0; 3]).err());
    Ok(())
}
