//! Synthetic multi-organ CT federations.
//!
//! A phantom is an elliptic body of soft tissue with five ellipsoidal organs.
//! The body fills the field of view up to the in-plane corners, which hold air.
//! Every client renders the body over its own slice-score window (so
//! clients see different organs) and applies its own intensity transform
//! (so clients look different). Geometry depends only on the seed and the
//! volume index, never on the client, which makes label maps comparable
//! across domains.

use ndarray::{Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::rng::{purpose, stream};
use crate::stylebank::SliceScoreProvider;
use crate::volume::{Provenance, Split, Volume};

/// HU value of the air background.
pub const AIR_HU: f32 = -1000.0;
/// Upper bound enforced on air voxels after the domain transform.
pub const AIR_CEILING: f32 = -250.0;
/// Client id used for the held-out client.
pub const OUT_OF_FEDERATION_CLIENT: u32 = 99;

/// One organ class of the catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct OrganSpec {
    pub class: u8,
    pub name: String,
    /// Canonical height in slice-score units.
    pub z_center: f32,
    /// In-plane centre `(h, w)` as a fraction of the volume size.
    pub center_hw: [f32; 2],
    /// Radius range in voxels per axis.
    pub radius: [(f32, f32); 3],
    pub base_hu: f32,
}

/// Appearance and coverage of one client.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDomain {
    pub offset: f32,
    pub contrast: f32,
    /// Gaussian blur in voxels, 0 disables.
    pub smoothing: f32,
    pub noise: f32,
    pub z_window: (f32, f32),
}

impl ClientDomain {
    pub fn identity(z_window: (f32, f32)) -> Self {
        ClientDomain { offset: 0.0, contrast: 1.0, smoothing: 0.0, noise: 0.0, z_window }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub organs: Vec<OrganSpec>,
    pub clients: Vec<ClientDomain>,
    pub out_of_federation: ClientDomain,
    pub volumes_per_client: usize,
    pub out_of_federation_volumes: usize,
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    pub crop_size: [usize; 3],
    pub body_hu: f32,
    /// Fractions of each client's volumes held out for validation and test.
    pub val_fraction: f32,
    pub test_fraction: f32,
    pub seed: u64,
}

fn organ(class: u8, name: &str, z_center: f32, center_hw: [f32; 2], radius: [(f32, f32); 3], base_hu: f32) -> OrganSpec {
    OrganSpec { class, name: name.into(), z_center, center_hw, radius, base_hu }
}

fn domain(offset: f32, contrast: f32, smoothing: f32, noise: f32, z_window: (f32, f32)) -> ClientDomain {
    ClientDomain { offset, contrast, smoothing, noise, z_window }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            organs: vec![
                organ(1, "liver", 60.0, [0.45, 0.30], [(8.0, 10.0), (7.0, 9.0), (7.0, 9.0)], 205.0),
                organ(2, "kidney", 42.0, [0.68, 0.62], [(4.0, 5.0), (3.5, 4.5), (5.0, 7.0)], 375.0),
                organ(3, "pancreas", 50.0, [0.52, 0.52], [(3.0, 4.0), (6.0, 8.0), (3.0, 4.0)], 120.0),
                organ(4, "spleen", 66.0, [0.42, 0.72], [(5.0, 6.0), (4.0, 5.0), (5.0, 6.0)], 290.0),
                organ(5, "gallbladder", 55.0, [0.28, 0.45], [(3.0, 4.0), (3.0, 4.0), (3.0, 4.0)], -60.0),
            ],
            clients: vec![
                domain(20.0, 0.94, 0.0, 10.0, (25.0, 75.0)),
                domain(40.0, 1.06, 0.6, 15.0, (30.0, 70.0)),
                domain(60.0, 1.00, 0.0, 20.0, (20.0, 58.0)),
                domain(80.0, 0.96, 0.8, 10.0, (45.0, 85.0)),
                domain(100.0, 1.04, 0.3, 15.0, (35.0, 65.0)),
            ],
            out_of_federation: domain(125.0, 1.0, 0.5, 15.0, (30.0, 80.0)),
            volumes_per_client: 10,
            out_of_federation_volumes: 6,
            shape: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            crop_size: [24, 24, 24],
            body_hu: 30.0,
            val_fraction: 0.1,
            test_fraction: 0.3,
            seed: 0,
        }
    }
}

fn check_window(w: (f32, f32), what: &str) -> Result<()> {
    if (0.0..=100.0).contains(&w.0) && (0.0..=100.0).contains(&w.1) && w.0 < w.1 {
        Ok(())
    } else {
        Err(invalid(format!("{what} z-window {w:?} must satisfy 0 <= z_min < z_max <= 100")))
    }
}

impl PhantomSpec {
    pub fn num_classes(&self) -> usize {
        self.organs.iter().map(|o| o.class as usize).max().unwrap_or(0) + 1
    }

    pub fn organ_names(&self) -> Vec<(u8, String)> {
        self.organs.iter().map(|o| (o.class, o.name.clone())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(invalid("phantom needs at least one client"));
        }
        for (a, (&n, &c)) in self.shape.iter().zip(&self.crop_size).enumerate() {
            if c == 0 || n < c {
                return Err(invalid(format!("axis {a}: shape {n} smaller than crop {c}")));
            }
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid(format!("spacing {:?} must be positive", self.spacing)));
        }
        for (i, o) in self.organs.iter().enumerate() {
            if o.class == 0 || self.organs[..i].iter().any(|p| p.class == o.class) {
                return Err(invalid(format!("organ {:?} needs a unique nonzero class", o.name)));
            }
            if !(0.0..=100.0).contains(&o.z_center) {
                return Err(invalid(format!("organ {:?} z-center {} outside [0, 100]", o.name, o.z_center)));
            }
            for a in 0..3 {
                let (lo, hi) = o.radius[a];
                if !(lo > 0.0 && lo <= hi && 2.0 * hi < self.shape[a] as f32) {
                    return Err(invalid(format!("organ {:?} radius range {:?} does not fit axis {a}", o.name, o.radius[a])));
                }
            }
        }
        for (k, d) in self.clients.iter().enumerate() {
            check_window(d.z_window, &format!("client {k}"))?;
        }
        check_window(self.out_of_federation.z_window, "out-of-federation")?;
        let max_offset = self.clients.iter().map(|d| d.offset).fold(f32::NEG_INFINITY, f32::max);
        if self.out_of_federation.offset <= max_offset {
            return Err(invalid("out-of-federation offset must exceed every training offset"));
        }
        if !(self.val_fraction >= 0.0 && self.test_fraction > 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            return Err(invalid("split fractions must leave a non-empty training split"));
        }
        Ok(())
    }

    /// Number of (train, val, test) volumes per client.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.volumes_per_client;
        let val = (n as f32 * self.val_fraction).round() as usize;
        let test = ((n as f32 * self.test_fraction).round() as usize).max(1);
        (n.saturating_sub(val + test), val, test)
    }
}

/// A volume with its voxel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub volume: Volume,
    pub labels: Array3<u8>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ClientDataset {
    pub train: Vec<LabeledVolume>,
    pub val: Vec<LabeledVolume>,
    pub test: Vec<LabeledVolume>,
}

/// Per-volume random geometry, shared by every client.
struct Geometry {
    body_radius: [f32; 2],
    organs: Vec<([f32; 2], [f32; 3])>,
}

fn draw_geometry(spec: &PhantomSpec, index: usize) -> Geometry {
    let mut rng = stream(spec.seed, &[purpose::GEOMETRY, index as u64]);
    let [h, w, _] = spec.shape;
    let body_radius = [h as f32 * rng.random_range(0.62..0.64), w as f32 * rng.random_range(0.63..0.65)];
    let organs = spec
        .organs
        .iter()
        .map(|o| {
            let jitter = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let centre = [o.center_hw[0] * h as f32 + jitter[0], o.center_hw[1] * w as f32 + jitter[1]];
            let r = [0, 1, 2].map(|a| {
                let (lo, hi) = o.radius[a];
                if lo < hi {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            });
            (centre, r)
        })
        .collect();
    Geometry { body_radius, organs }
}

/// Slice index (fractional) of slice score `z` in a volume of depth `d`
/// rendered over `window`; slice `k` covers score `z_min + (k + 0.5) * dz`.
fn slice_of(z: f32, window: (f32, f32), d: usize) -> f32 {
    (z - window.0) / (window.1 - window.0) * d as f32 - 0.5
}

fn render(spec: &PhantomSpec, geo: &Geometry, window: (f32, f32)) -> (Array3<f32>, Array3<u8>) {
    let [h, w, d] = spec.shape;
    let mut hu = Array3::from_elem((h, w, d), AIR_HU);
    let mut labels = Array3::<u8>::zeros((h, w, d));
    let (ch, cw) = (h as f32 / 2.0 - 0.5, w as f32 / 2.0 - 0.5);
    for ((i, j, _), v) in hu.indexed_iter_mut() {
        let u = (i as f32 - ch) / geo.body_radius[0];
        let t = (j as f32 - cw) / geo.body_radius[1];
        // soft edge over roughly one voxel
        let r = (u * u + t * t).sqrt();
        let edge = (r - 1.0) * geo.body_radius[0].min(geo.body_radius[1]);
        let inside = 1.0 / (1.0 + (2.0 * edge).exp());
        if inside > 0.01 {
            *v = AIR_HU + inside * (spec.body_hu - AIR_HU);
        }
    }
    for (o, (centre, r)) in spec.organs.iter().zip(&geo.organs) {
        if !(window.0..=window.1).contains(&o.z_center) {
            continue;
        }
        let cz = slice_of(o.z_center, window, d);
        let k_lo = (cz - r[2]).floor().max(0.0) as usize;
        let k_hi = ((cz + r[2]).ceil() as isize).clamp(-1, d as isize - 1);
        let i_lo = (centre[0] - r[0]).floor().max(0.0) as usize;
        let i_hi = ((centre[0] + r[0]).ceil() as usize).min(h - 1);
        let j_lo = (centre[1] - r[1]).floor().max(0.0) as usize;
        let j_hi = ((centre[1] + r[1]).ceil() as usize).min(w - 1);
        if k_hi < 0 {
            continue;
        }
        for i in i_lo..=i_hi {
            for j in j_lo..=j_hi {
                for k in k_lo..=k_hi as usize {
                    let a = (i as f32 - centre[0]) / r[0];
                    let b = (j as f32 - centre[1]) / r[1];
                    let c = (k as f32 - cz) / r[2];
                    if a * a + b * b + c * c <= 1.0 {
                        hu[[i, j, k]] = o.base_hu;
                        labels[[i, j, k]] = o.class;
                    }
                }
            }
        }
    }
    (hu, labels)
}

fn gaussian_blur(data: &mut Array3<f32>, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|x| (-(x * x) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let mut buf = Vec::new();
    for axis in 0..3 {
        for mut lane in data.lanes_mut(Axis(axis)) {
            buf.clear();
            buf.extend(lane.iter().copied());
            let n = buf.len() as isize;
            for (x, out) in lane.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    // clamp-to-edge
                    let src = (x as isize + t as isize - radius).clamp(0, n - 1);
                    acc += kv * buf[src as usize];
                }
                *out = acc;
            }
        }
    }
}

fn apply_domain(hu: &Array3<f32>, dom: &ClientDomain, seed: u64, client: u32, index: usize) -> Array3<f32> {
    let mut out = hu.mapv(|v| if v <= AIR_HU { v } else { dom.contrast * v + dom.offset });
    gaussian_blur(&mut out, dom.smoothing);
    if dom.noise > 0.0 {
        let mut rng = stream(seed, &[purpose::NOISE, client as u64, index as u64]);
        let normal = Normal::new(0.0f32, dom.noise).expect("finite sigma");
        out.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    ndarray::Zip::from(&mut out).and(hu).for_each(|o, &orig| {
        if orig < -200.0 {
            *o = o.min(AIR_CEILING);
        }
    });
    out
}

fn make_volume(spec: &PhantomSpec, dom: &ClientDomain, client: u32, split: Split, index: usize, geo_index: usize) -> Result<LabeledVolume> {
    let geo = draw_geometry(spec, geo_index);
    let (hu, labels) = render(spec, &geo, dom.z_window);
    let data = apply_domain(&hu, dom, spec.seed, client, geo_index);
    let volume = Volume::new(data, spec.spacing, dom.z_window)?.with_provenance(Provenance {
        client_id: client,
        split,
        index: index as u32,
        z_window: dom.z_window,
    });
    Ok(LabeledVolume { volume, labels })
}

fn generate(spec: &PhantomSpec, dom: &ClientDomain, client: u32, plan: &[(Split, usize)]) -> Result<Vec<LabeledVolume>> {
    plan.par_iter()
        .enumerate()
        .map(|(geo_index, &(split, index))| make_volume(spec, dom, client, split, index, geo_index))
        .collect()
}

/// Renders one training client's volumes and splits them into train, val and test.
pub fn generate_client_dataset(spec: &PhantomSpec, client_id: u32) -> Result<ClientDataset> {
    spec.validate()?;
    let dom = spec
        .clients
        .get(client_id as usize)
        .ok_or_else(|| invalid(format!("no client {client_id} in a {}-client phantom", spec.clients.len())))?;
    let (train, val, test) = spec.split_counts();
    let plan: Vec<(Split, usize)> = (0..train)
        .map(|i| (Split::Train, i))
        .chain((0..val).map(|i| (Split::Val, i)))
        .chain((0..test).map(|i| (Split::Test, i)))
        .collect();
    let mut all = generate(spec, dom, client_id, &plan)?;
    let test_set = all.split_off(train + val);
    let val_set = all.split_off(train);
    Ok(ClientDataset { train: all, val: val_set, test: test_set })
}

/// The held-out client. Its domain lies outside the training clients' range
/// and its volumes carry the out-of-federation split.
pub fn make_out_of_federation_client(spec: &PhantomSpec) -> Result<Vec<LabeledVolume>> {
    spec.validate()?;
    let plan: Vec<(Split, usize)> = (0..spec.out_of_federation_volumes).map(|i| (Split::OutOfFederation, i)).collect();
    generate(spec, &spec.out_of_federation, OUT_OF_FEDERATION_CLIENT, &plan)
}

/// The slice-score window a phantom volume was rendered over.
pub fn analytic_slice_scores(v: &Volume) -> Result<(f32, f32)> {
    v.provenance()
        .map(|p| p.z_window)
        .ok_or_else(|| Error::NotFound("volume has no provenance".into()))
}

/// [`SliceScoreProvider`] backed by phantom provenance.
#[derive(Clone, Copy, Debug, Default)]
pub struct AnalyticSliceScores;

impl SliceScoreProvider for AnalyticSliceScores {
    fn score_extent(&self, v: &Volume) -> Result<(f32, f32)> {
        analytic_slice_scores(v)
    }
}

/// Mean intensity over the body (every voxel above the air threshold).
pub fn mean_foreground_intensity(lv: &LabeledVolume) -> f64 {
    let (sum, n) = lv
        .volume
        .data()
        .iter()
        .filter(|&&v| v > -200.0)
        .fold((0.0f64, 0usize), |(s, n), &v| (s + v as f64, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
