//! The unified 3D style bank.
//!
//! Every client crops random sub-volumes from its *training* volumes, computes
//! their low-frequency amplitude styles and files them under
//! `floor(slice_score / bin_size)`. The bank is built once, shipped to all
//! clients once, and then only read. During training a client asks for a
//! style of another client at the same anatomical height as its current crop.

mod format;

pub use format::{bank_size_bytes, deserialize_bank, serialize_bank, BANK_HEADER_LEN, BANK_MAGIC, BANK_VERSION};

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::rng::{self, purpose};
use crate::spectral::{block_shape, style_of, Beta, StyleSpectrum};
use crate::volume::{crop_sub_volume, respace, Split, Volume};

pub const DEFAULT_BIN_SIZE: f32 = 10.0;
pub const DEFAULT_CROPS_PER_VOLUME: usize = 4;

/// Source of the slice-score extent `(z_min, z_max)` of a volume.
pub trait SliceScoreProvider {
    fn score_extent(&self, v: &Volume) -> Result<(f32, f32)>;
}

/// Uses the extent already recorded on the volume.
#[derive(Clone, Copy, Debug, Default)]
pub struct StoredExtent;

impl SliceScoreProvider for StoredExtent {
    fn score_extent(&self, v: &Volume) -> Result<(f32, f32)> {
        Ok(v.z_extent())
    }
}

/// A style together with the slice score of the crop it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct RegisteredStyle {
    pub slice_score: f32,
    pub style: StyleSpectrum,
}

/// Volumes that are allowed to contribute styles: training split only.
#[derive(Clone, Copy, Debug)]
pub struct TrainingVolumes<'a> {
    volumes: &'a [Volume],
}

impl<'a> TrainingVolumes<'a> {
    /// Fails unless every volume carries provenance marking it as training data.
    pub fn new(volumes: &'a [Volume]) -> Result<Self> {
        for v in volumes {
            match v.provenance() {
                Some(p) if p.split == Split::Train => {}
                Some(p) => {
                    return Err(invalid(format!("volume {} is not training data", p.id())));
                }
                None => return Err(invalid("volume without provenance cannot be registered")),
            }
        }
        Ok(TrainingVolumes { volumes })
    }

    pub fn volumes(&self) -> &'a [Volume] {
        self.volumes
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegistrationConfig {
    pub crops_per_volume: usize,
    /// Common spacing every volume is resampled to before cropping.
    pub target_spacing: [f32; 3],
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig { crops_per_volume: DEFAULT_CROPS_PER_VOLUME, target_spacing: [1.0; 3], seed: 0 }
    }
}

/// Outcome of registering one client's volumes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegistrationReport {
    /// Provenance ids of the volumes that contributed styles.
    pub registered: Vec<String>,
    /// `(volume id, reason)` for volumes that were skipped.
    pub skipped: Vec<(String, String)>,
    pub styles_added: usize,
}

/// A style picked for a requesting client.
#[derive(Clone, Copy, Debug)]
pub struct Retrieved<'b> {
    pub client_id: u32,
    pub bin: i32,
    pub style: &'b RegisteredStyle,
}

/// Map `client -> bin -> styles`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleBank {
    entries: BTreeMap<u32, BTreeMap<i32, Vec<RegisteredStyle>>>,
    bin_size: f32,
    beta: Beta,
    crop_size: [usize; 3],
}

impl StyleBank {
    pub fn new(bin_size: f32, beta: Beta, crop_size: [usize; 3]) -> Result<Self> {
        if !(bin_size.is_finite() && bin_size > 0.0) {
            return Err(invalid(format!("bin size {bin_size} must be positive")));
        }
        block_shape(beta, crop_size)?;
        Ok(StyleBank { entries: BTreeMap::new(), bin_size, beta, crop_size })
    }

    pub fn bin_size(&self) -> f32 {
        self.bin_size
    }

    pub fn beta(&self) -> Beta {
        self.beta
    }

    pub fn crop_size(&self) -> [usize; 3] {
        self.crop_size
    }

    pub fn block_shape(&self) -> [usize; 3] {
        block_shape(self.beta, self.crop_size).expect("validated at construction")
    }

    pub fn bin_index(&self, slice_score: f32) -> i32 {
        (slice_score / self.bin_size).floor() as i32
    }

    pub fn entries(&self) -> &BTreeMap<u32, BTreeMap<i32, Vec<RegisteredStyle>>> {
        &self.entries
    }

    pub fn style_count(&self) -> usize {
        self.entries.values().flat_map(|bins| bins.values()).map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.style_count() == 0
    }

    pub fn client_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    /// Makes `client_id` known to the bank without adding styles.
    pub fn add_client(&mut self, client_id: u32) {
        self.entries.entry(client_id).or_default();
    }

    /// Files a style under the bin of `slice_score`.
    pub fn insert(&mut self, client_id: u32, slice_score: f32, style: StyleSpectrum) -> Result<()> {
        if !slice_score.is_finite() {
            return Err(invalid("slice score must be finite"));
        }
        if style.source_shape != self.crop_size || style.beta != self.beta || style.block_shape() != self.block_shape() {
            return Err(invalid(format!(
                "style (shape {:?}, beta {:?}) does not match bank (crop {:?}, beta {:?})",
                style.source_shape, style.beta, self.crop_size, self.beta
            )));
        }
        let bin = self.bin_index(slice_score);
        self.entries
            .entry(client_id)
            .or_default()
            .entry(bin)
            .or_default()
            .push(RegisteredStyle { slice_score, style });
        Ok(())
    }

    /// Crops, transforms and files styles from one client's training volumes.
    ///
    /// Volumes smaller than the crop size after respacing are skipped and
    /// reported, not treated as failures.
    pub fn register_client_styles(
        &mut self,
        client_id: u32,
        train: TrainingVolumes<'_>,
        cfg: &RegistrationConfig,
        provider: &dyn SliceScoreProvider,
    ) -> Result<RegistrationReport> {
        if cfg.crops_per_volume == 0 {
            return Err(invalid("crops_per_volume must be at least 1"));
        }
        self.add_client(client_id);
        let mut report = RegistrationReport::default();
        for (vi, v) in train.volumes().iter().enumerate() {
            let id = v.provenance().map(|p| p.id()).unwrap_or_else(|| format!("volume {vi}"));
            let extent = provider.score_extent(v)?;
            let v = respace(v, cfg.target_spacing)?.with_z_extent(extent)?;
            let shape = v.shape();
            if (0..3).any(|a| shape[a] < self.crop_size[a]) {
                report.skipped.push((
                    id,
                    format!("shape {shape:?} smaller than crop {:?}", self.crop_size),
                ));
                continue;
            }
            let mut rng = rng::stream(cfg.seed, &[purpose::REGISTER, client_id as u64, vi as u64]);
            for _ in 0..cfg.crops_per_volume {
                let origin = [0, 1, 2].map(|a| rng.random_range(0..=shape[a] - self.crop_size[a]));
                let sv = crop_sub_volume(&v, origin, self.crop_size)?;
                let style = style_of(sv.data.view(), self.beta)?;
                self.insert(client_id, sv.slice_score, style)?;
                report.styles_added += 1;
            }
            report.registered.push(id);
        }
        Ok(report)
    }

    fn nonempty_bins(&self, client: u32) -> impl Iterator<Item = (i32, &Vec<RegisteredStyle>)> + '_ {
        self.entries
            .get(&client)
            .into_iter()
            .flat_map(|bins| bins.iter())
            .filter(|(_, s)| !s.is_empty())
            .map(|(b, s)| (*b, s))
    }

    /// Nearest non-empty bin of `client`, ties toward the lower index.
    fn nearest_bin(&self, client: u32, bin: i32) -> Option<(i32, &Vec<RegisteredStyle>)> {
        self.nonempty_bins(client)
            .min_by_key(|(b, _)| ((*b as i64 - bin as i64).abs(), *b))
    }

    fn pick<'b, R: Rng + ?Sized>(client_id: u32, bin: i32, styles: &'b [RegisteredStyle], rng: &mut R) -> Retrieved<'b> {
        let style = &styles[rng.random_range(0..styles.len())];
        Retrieved { client_id, bin, style }
    }

    /// Picks a style from another client at the same anatomical height.
    ///
    /// A client is drawn uniformly among the *other* clients whose bin
    /// `floor(z / bin_size)` is non-empty, then a style uniformly from that bin.
    /// If no other client has the bin, a client is drawn uniformly among the
    /// other clients that have any style and its nearest non-empty bin is used
    /// (ties toward the lower bin index). If no other client has styles, the
    /// requester's own matching (or nearest) bin is used.
    pub fn retrieve_style<R: Rng + ?Sized>(
        &self,
        requesting_client: u32,
        slice_score: f32,
        rng: &mut R,
    ) -> Result<Retrieved<'_>> {
        let bin = self.bin_index(slice_score);
        let matching: Vec<(u32, &Vec<RegisteredStyle>)> = self
            .entries
            .iter()
            .filter(|(c, _)| **c != requesting_client)
            .filter_map(|(c, bins)| bins.get(&bin).filter(|s| !s.is_empty()).map(|s| (*c, s)))
            .collect();
        if !matching.is_empty() {
            let (c, styles) = matching[rng.random_range(0..matching.len())];
            return Ok(Self::pick(c, bin, styles, rng));
        }
        let others = self.other_clients_with_styles(requesting_client);
        if !others.is_empty() {
            let c = others[rng.random_range(0..others.len())];
            let (b, styles) = self.nearest_bin(c, bin).expect("client has styles");
            return Ok(Self::pick(c, b, styles, rng));
        }
        match self.nearest_bin(requesting_client, bin) {
            Some((b, styles)) => Ok(Self::pick(requesting_client, b, styles, rng)),
            None => Err(Error::NotFound("style bank is empty".into())),
        }
    }

    /// Picks a style from another client ignoring anatomical height: a client
    /// uniformly among the others with styles, then a style uniformly among
    /// all of that client's styles.
    pub fn retrieve_style_any_bin<R: Rng + ?Sized>(&self, requesting_client: u32, rng: &mut R) -> Result<Retrieved<'_>> {
        let others = self.other_clients_with_styles(requesting_client);
        let client = if others.is_empty() {
            if self.nonempty_bins(requesting_client).next().is_none() {
                return Err(Error::NotFound("style bank is empty".into()));
            }
            requesting_client
        } else {
            others[rng.random_range(0..others.len())]
        };
        let all: Vec<(i32, &RegisteredStyle)> = self
            .nonempty_bins(client)
            .flat_map(|(b, styles)| styles.iter().map(move |s| (b, s)))
            .collect();
        let (bin, style) = all[rng.random_range(0..all.len())];
        Ok(Retrieved { client_id: client, bin, style })
    }

    fn other_clients_with_styles(&self, requesting_client: u32) -> Vec<u32> {
        self.entries
            .keys()
            .copied()
            .filter(|&c| c != requesting_client && self.nonempty_bins(c).next().is_some())
            .collect()
    }
}
