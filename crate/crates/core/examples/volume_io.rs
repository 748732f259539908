//! Builds a volume, respaces it and round-trips it through the on-disk format.
//!
//! ```text
//! cargo run --example volume_io
//! ```

use std::io::Cursor;

use a3dfdg::volume::{crop_slice_score, crop_sub_volume, read_volume, respace, write_volume, Volume};
use ndarray::Array3;

fn main() -> a3dfdg::error::Result<()> {
    // a ramp along z, 1 x 1 x 2.5 mm voxels
    let data = Array3::from_shape_fn((32, 32, 24), |(_, _, k)| -1000.0 + 60.0 * k as f32);
    let v = Volume::new(data, [1.0, 1.0, 2.5], (30.0, 70.0))?;

    let iso = respace(&v, [1.0, 1.0, 1.0])?;
    println!("{:?} @ {:?} mm -> {:?} @ {:?} mm", v.shape(), v.spacing(), iso.shape(), iso.spacing());

    let mut buf = Vec::new();
    write_volume(&mut buf, &iso)?;
    let back = read_volume(&mut Cursor::new(&buf))?;
    assert_eq!(back, iso);
    println!("serialized {} bytes, round trip ok", buf.len());

    let depth = iso.shape()[2];
    for d0 in [0, depth / 2 - 8, depth - 16] {
        let sv = crop_sub_volume(&iso, [8, 8, d0], [16, 16, 16])?;
        let score = crop_slice_score(iso.z_extent(), d0, 16, depth);
        println!("crop at z={d0:3}: slice score {score:5.1} (stored {:5.1})", sv.slice_score);
    }
    Ok(())
}
