//! 3D intensity volumes: physical respacing, sub-volume cropping and air masks.
//!
//! Arrays are indexed `(h, w, d)` in standard (row-major) layout, so the `d`
//! axis is contiguous. The `d` axis is the body axis: slice scores increase
//! with `d`.

mod io;

pub use io::{read_labels, read_volume, write_labels, write_volume, HEADER_LEN};

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array3, ArrayView3};

use crate::error::{invalid, Error, Result};

/// Which partition of a client's data a volume belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Data of a client that never takes part in training.
    OutOfFederation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::OutOfFederation => "ood",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "ood" => Ok(Split::OutOfFederation),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

/// Where a generated volume came from. Used by the analytic slice-score
/// provider and for auditing which volumes fed the style bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub client_id: u32,
    pub split: Split,
    pub index: u32,
    /// Slice-score window the volume was rendered over.
    pub z_window: (f32, f32),
}

impl Provenance {
    /// Stable identifier, e.g. `c2/test/001`.
    pub fn id(&self) -> String {
        format!("c{}/{}/{:03}", self.client_id, self.split, self.index)
    }
}

/// A CT-like volume in HU units with physical voxel spacing (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f32; 3],
    z_extent: (f32, f32),
    provenance: Option<Provenance>,
}

fn check_extent(z: (f32, f32)) -> Result<()> {
    let ok = z.0.is_finite()
        && z.1.is_finite()
        && (0.0..=100.0).contains(&z.0)
        && (0.0..=100.0).contains(&z.1)
        && z.0 <= z.1;
    if ok {
        Ok(())
    } else {
        Err(invalid(format!("slice-score extent {z:?} must satisfy 0 <= z_min <= z_max <= 100")))
    }
}

fn check_spacing(spacing: [f32; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(invalid(format!("spacing {spacing:?} must be positive")))
    }
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f32; 3], z_extent: (f32, f32)) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(invalid(format!("volume shape {:?} has an empty axis", data.shape())));
        }
        check_spacing(spacing)?;
        check_extent(z_extent)?;
        Ok(Volume {
            data: data.as_standard_layout().into_owned(),
            spacing,
            z_extent,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    /// Same volume with a different slice-score extent, e.g. one predicted by
    /// a [`SliceScoreProvider`](crate::stylebank::SliceScoreProvider).
    pub fn with_z_extent(mut self, z_extent: (f32, f32)) -> Result<Self> {
        check_extent(z_extent)?;
        self.z_extent = z_extent;
        Ok(self)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn z_extent(&self) -> (f32, f32) {
        self.z_extent
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }
}

/// A fixed-size block cut out of a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct SubVolume {
    pub data: Array3<f32>,
    /// Voxel offset of the block inside its parent.
    pub origin: [usize; 3],
    /// Slice score of the block's `d`-axis midpoint.
    pub slice_score: f32,
}

impl SubVolume {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

/// Voxels below the air threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AirMask {
    pub mask: Array3<bool>,
}

impl AirMask {
    pub fn from_data(data: ArrayView3<'_, f32>, tau_air: f32) -> Self {
        AirMask { mask: data.mapv(|v| v < tau_air) }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Air mask of a sub-volume: `true` where the intensity is below `tau_air`.
pub fn air_mask(sv: &SubVolume, tau_air: f32) -> AirMask {
    AirMask::from_data(sv.data.view(), tau_air)
}

fn resampled_len(n: usize, from: f32, to: f32) -> usize {
    ((n as f64 * from as f64 / to as f64).round() as usize).max(1)
}

/// Source coordinate and interpolation weight for every output index along one axis.
fn axis_samples(n_in: usize, n_out: usize, from: f32, to: f32) -> Vec<(usize, usize, f64)> {
    let ratio = to as f64 / from as f64;
    let last = (n_in - 1) as f64;
    (0..n_out)
        .map(|j| {
            let x = (j as f64 * ratio).clamp(0.0, last);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Resamples a volume to `target_spacing` with trilinear interpolation.
///
/// Output index `j` along an axis samples the input at `j * target / source`
/// voxels, clamped to the last voxel. The slice-score extent is unchanged.
pub fn respace(v: &Volume, target_spacing: [f32; 3]) -> Result<Volume> {
    check_spacing(target_spacing)?;
    if target_spacing == v.spacing {
        return Ok(v.clone());
    }
    let [h, w, d] = v.shape();
    let out_shape = [
        resampled_len(h, v.spacing[0], target_spacing[0]),
        resampled_len(w, v.spacing[1], target_spacing[1]),
        resampled_len(d, v.spacing[2], target_spacing[2]),
    ];
    let sh = axis_samples(h, out_shape[0], v.spacing[0], target_spacing[0]);
    let sw = axis_samples(w, out_shape[1], v.spacing[1], target_spacing[1]);
    let sd = axis_samples(d, out_shape[2], v.spacing[2], target_spacing[2]);
    let src = &v.data;
    let at = |i: usize, j: usize, k: usize| src[[i, j, k]] as f64;

    let data = Array3::from_shape_fn(out_shape, |(i, j, k)| {
        let (h0, h1, th) = sh[i];
        let (w0, w1, tw) = sw[j];
        let (d0, d1, td) = sd[k];
        let c00 = lerp(at(h0, w0, d0), at(h0, w0, d1), td);
        let c01 = lerp(at(h0, w1, d0), at(h0, w1, d1), td);
        let c10 = lerp(at(h1, w0, d0), at(h1, w0, d1), td);
        let c11 = lerp(at(h1, w1, d0), at(h1, w1, d1), td);
        let c0 = lerp(c00, c01, tw);
        let c1 = lerp(c10, c11, tw);
        lerp(c0, c1, th) as f32
    });
    Ok(Volume {
        data,
        spacing: target_spacing,
        z_extent: v.z_extent,
        provenance: v.provenance.clone(),
    })
}

/// Nearest-neighbour resampling for label maps, on the same grid as [`respace`].
pub fn respace_labels(labels: &Array3<u8>, spacing: [f32; 3], target_spacing: [f32; 3]) -> Result<Array3<u8>> {
    check_spacing(spacing)?;
    check_spacing(target_spacing)?;
    if spacing == target_spacing {
        return Ok(labels.clone());
    }
    let sh = labels.shape();
    let out: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let n_out = resampled_len(sh[a], spacing[a], target_spacing[a]);
            let ratio = target_spacing[a] as f64 / spacing[a] as f64;
            (0..n_out)
                .map(|j| ((j as f64 * ratio).round() as usize).min(sh[a] - 1))
                .collect()
        })
        .collect();
    Ok(Array3::from_shape_fn((out[0].len(), out[1].len(), out[2].len()), |(i, j, k)| {
        labels[[out[0][i], out[1][j], out[2][k]]]
    }))
}

/// Slice score of a crop: the `d`-axis midpoint mapped linearly into the
/// parent's extent, `z_min + (z_max - z_min) * (d0 + D/2) / D_vol`.
pub fn crop_slice_score(z_extent: (f32, f32), d0: usize, crop_d: usize, vol_d: usize) -> f32 {
    let (z_min, z_max) = (z_extent.0 as f64, z_extent.1 as f64);
    let mid = d0 as f64 + crop_d as f64 / 2.0;
    (z_min + (z_max - z_min) * mid / vol_d as f64) as f32
}

fn check_crop(shape: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if size[a] == 0 || origin[a] + size[a] > shape[a] {
            return Err(invalid(format!(
                "crop at {origin:?} of size {size:?} does not fit volume of shape {shape:?}"
            )));
        }
    }
    Ok(())
}

/// Copies the block `origin..origin+size` out of any 3D array.
pub fn crop_array<T: Clone>(data: &Array3<T>, origin: [usize; 3], size: [usize; 3]) -> Result<Array3<T>> {
    let sh = data.shape();
    check_crop([sh[0], sh[1], sh[2]], origin, size)?;
    Ok(data
        .slice(s![
            origin[0]..origin[0] + size[0],
            origin[1]..origin[1] + size[1],
            origin[2]..origin[2] + size[2]
        ])
        .to_owned())
}

/// Cuts a sub-volume and assigns it the slice score of its `d`-axis midpoint.
pub fn crop_sub_volume(v: &Volume, origin: [usize; 3], size: [usize; 3]) -> Result<SubVolume> {
    let data = crop_array(&v.data, origin, size)?;
    Ok(SubVolume {
        data,
        origin,
        slice_score: crop_slice_score(v.z_extent, origin[2], size[2], v.shape()[2]),
    })
}
