//! Federated training: local SGD with style augmentation, FedAvg and rounds.

mod report;
mod traffic;

pub use report::{read_round_csv, write_round_csv, RoundReport, RoundRow};
pub use traffic::{format_bytes, traffic_report, TrafficLedger};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array4, Axis};
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::metrics::{evaluate_model, MetricTable};
use crate::phantom::{self, LabeledVolume, PhantomSpec};
use crate::rng::{self, purpose, Rng};
use crate::segmodel::{checkpoint_size_bytes, SegModel};
use crate::spectral::{apply_style_with, Beta, DEFAULT_BETA};
use crate::stylebank::{
    bank_size_bytes, RegistrationConfig, RegistrationReport, SliceScoreProvider, StyleBank, TrainingVolumes,
    DEFAULT_BIN_SIZE, DEFAULT_CROPS_PER_VOLUME,
};
use crate::volume::{crop_array, crop_sub_volume, SubVolume};

/// Training arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Augmentation {
    None,
    A3dfdg,
    /// Styles drawn from any bin of the other client.
    NoSliceMatching,
    /// Style transfer without restoring air voxels.
    NoContourPreservation,
}

impl Augmentation {
    pub const ALL: [Augmentation; 4] =
        [Augmentation::None, Augmentation::A3dfdg, Augmentation::NoSliceMatching, Augmentation::NoContourPreservation];

    pub fn as_str(self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::A3dfdg => "a3dfdg",
            Augmentation::NoSliceMatching => "a3dfdg_no_slice_matching",
            Augmentation::NoContourPreservation => "a3dfdg_no_contour_preservation",
        }
    }

    pub fn uses_bank(self) -> bool {
        self != Augmentation::None
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Augmentation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_iters: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub alpha_range: (f32, f32),
    pub beta: Beta,
    pub z_bin: f32,
    pub tau_air: f32,
    pub augmentation: Augmentation,
    pub crop_size: [usize; 3],
    /// Evaluate every this many rounds; the last round is always evaluated.
    /// Zero evaluates the last round only.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 5,
            local_iters: 60,
            lr: 0.3,
            batch_size: 2,
            alpha_range: (0.0, 1.0),
            beta: DEFAULT_BETA,
            z_bin: DEFAULT_BIN_SIZE,
            tau_air: -200.0,
            augmentation: Augmentation::A3dfdg,
            crop_size: [24, 24, 24],
            eval_every: 0,
            seed: 0,
        }
    }
}

impl FederationConfig {
    /// Checks the invariants. `local_iters = 0` is allowed and means
    /// clients return the broadcast model unchanged.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr {} must be non-negative", self.lr)));
        }
        let (lo, hi) = self.alpha_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("alpha_range {:?} must lie within [0, 1]", self.alpha_range)));
        }
        if !(self.z_bin.is_finite() && self.z_bin > 0.0) {
            return Err(Error::Config(format!("z_bin {} must be positive", self.z_bin)));
        }
        if self.crop_size.contains(&0) {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        crate::spectral::block_shape(self.beta, self.crop_size).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    fn evaluates(&self, round: usize) -> bool {
        round == self.rounds || (self.eval_every > 0 && round.is_multiple_of(self.eval_every))
    }
}

/// One participating client.
#[derive(Clone, Debug)]
pub struct FederatedClient {
    pub id: u32,
    pub train: Vec<LabeledVolume>,
    pub test: Vec<LabeledVolume>,
}

/// Training clients plus the held-out client.
#[derive(Clone, Debug)]
pub struct Federation {
    pub clients: Vec<FederatedClient>,
    pub out_of_federation: Vec<LabeledVolume>,
    pub num_classes: usize,
}

impl Federation {
    /// Renders every client of a phantom spec.
    pub fn from_phantom(spec: &PhantomSpec) -> Result<Self> {
        let clients = (0..spec.clients.len() as u32)
            .map(|id| {
                let ds = phantom::generate_client_dataset(spec, id)?;
                Ok(FederatedClient { id, train: ds.train, test: ds.test })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Federation {
            clients,
            out_of_federation: phantom::make_out_of_federation_client(spec)?,
            num_classes: spec.num_classes(),
        })
    }

    pub fn data_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.train.len()).collect()
    }
}

/// Registers every client's training volumes into a fresh bank.
pub fn build_bank(
    fed: &Federation,
    cfg: &FederationConfig,
    crops_per_volume: usize,
    provider: &dyn SliceScoreProvider,
) -> Result<(StyleBank, Vec<RegistrationReport>)> {
    let mut bank = StyleBank::new(cfg.z_bin, cfg.beta, cfg.crop_size)?;
    let reg = RegistrationConfig { crops_per_volume, seed: cfg.seed, ..RegistrationConfig::default() };
    let mut reports = Vec::new();
    for c in &fed.clients {
        let vols: Vec<_> = c.train.iter().map(|lv| lv.volume.clone()).collect();
        reports.push(bank.register_client_styles(c.id, TrainingVolumes::new(&vols)?, &reg, provider)?);
    }
    Ok((bank, reports))
}

/// [`build_bank`] with the default crop count and phantom slice scores.
pub fn build_default_bank(fed: &Federation, cfg: &FederationConfig) -> Result<StyleBank> {
    Ok(build_bank(fed, cfg, DEFAULT_CROPS_PER_VOLUME, &phantom::AnalyticSliceScores)?.0)
}

/// Random streams of one client in one round. Crop positions and style draws
/// come from separate streams so the crops do not depend on the arm.
pub struct LocalRngs {
    pub crop: Rng,
    pub augment: Rng,
}

impl LocalRngs {
    pub fn for_round(seed: u64, client: u32, round: usize) -> Self {
        LocalRngs {
            crop: rng::stream(seed, &[purpose::CROP, client as u64, round as u64]),
            augment: rng::stream(seed, &[purpose::AUGMENT, client as u64, round as u64]),
        }
    }
}

/// A random crop of a random training volume with its labels.
pub fn sample_crop(train: &[LabeledVolume], crop: [usize; 3], rng: &mut Rng) -> Result<(SubVolume, ndarray::Array3<u8>)> {
    if train.is_empty() {
        return Err(invalid("client has no training volumes"));
    }
    let lv = &train[rng.random_range(0..train.len())];
    let shape = lv.volume.shape();
    if (0..3).any(|a| shape[a] < crop[a]) {
        return Err(invalid(format!("volume shape {shape:?} smaller than crop {crop:?}")));
    }
    let origin = [0, 1, 2].map(|a| rng.random_range(0..=shape[a] - crop[a]));
    let sv = crop_sub_volume(&lv.volume, origin, crop)?;
    let labels = crop_array(&lv.labels, origin, crop)?;
    Ok((sv, labels))
}

/// Applies the arm's augmentation to one crop.
pub fn augment(
    sv: SubVolume,
    client: u32,
    bank: Option<&StyleBank>,
    cfg: &FederationConfig,
    rng: &mut Rng,
) -> Result<SubVolume> {
    let arm = cfg.augmentation;
    if !arm.uses_bank() {
        return Ok(sv);
    }
    let bank = bank.ok_or_else(|| Error::Config(format!("arm {arm} needs a style bank")))?;
    let (lo, hi) = cfg.alpha_range;
    let alpha = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let target = match arm {
        Augmentation::NoSliceMatching => bank.retrieve_style_any_bin(client, rng)?,
        _ => bank.retrieve_style(client, sv.slice_score, rng)?,
    };
    let tau = (arm != Augmentation::NoContourPreservation).then_some(cfg.tau_air);
    apply_style_with(&sv, &target.style.style, alpha, cfg.beta, tau)
}

/// Result of one client's local training.
#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub model: SegModel,
    /// Mean training loss over the local iterations (NaN with zero iterations).
    pub mean_loss: f64,
}

/// Runs `cfg.local_iters` SGD steps of one client starting from `model`.
pub fn local_train(
    model: &SegModel,
    client: &FederatedClient,
    bank: Option<&StyleBank>,
    cfg: &FederationConfig,
    rngs: &mut LocalRngs,
) -> Result<LocalOutcome> {
    let mut m = model.clone();
    let [h, w, d] = cfg.crop_size;
    let b = cfg.batch_size;
    let mut loss_sum = 0.0;
    for _ in 0..cfg.local_iters {
        let mut x = Array4::<f32>::zeros((b, h, w, d));
        let mut y = Array4::<u8>::zeros((b, h, w, d));
        for s in 0..b {
            let (sv, labels) = sample_crop(&client.train, cfg.crop_size, &mut rngs.crop)?;
            let sv = augment(sv, client.id, bank, cfg, &mut rngs.augment)?;
            x.index_axis_mut(Axis(0), s).assign(&sv.data);
            y.index_axis_mut(Axis(0), s).assign(&labels);
        }
        let (loss, grad) = m.loss_and_grad(x.view(), y.view())?;
        loss_sum += loss.total;
        m.sgd_step_in_place(&grad, cfg.lr)?;
    }
    let mean_loss = if cfg.local_iters == 0 { f64::NAN } else { loss_sum / cfg.local_iters as f64 };
    Ok(LocalOutcome { model: m, mean_loss })
}

/// Normalised FedAvg weights `n_k / sum(n)`.
pub fn fedavg_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(invalid("no clients to aggregate"));
    }
    if sizes.contains(&0) {
        return Err(invalid("client dataset sizes must be positive"));
    }
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    Ok(sizes.iter().map(|&n| n as f64 / total).collect())
}

/// Dataset-size weighted parameter average.
pub fn fedavg(models: &[SegModel], sizes: &[usize]) -> Result<SegModel> {
    let weights = fedavg_weights(sizes)?;
    if models.len() != sizes.len() {
        return Err(invalid(format!("{} models but {} dataset sizes", models.len(), sizes.len())));
    }
    let first = &models[0];
    if models.iter().any(|m| m.num_classes() != first.num_classes()) {
        return Err(invalid("models disagree on the number of classes"));
    }
    let mut acc = vec![0.0f64; first.params().len()];
    for (m, &wk) in models.iter().zip(&weights) {
        for (a, &p) in acc.iter_mut().zip(m.params()) {
            *a += wk * p as f64;
        }
    }
    SegModel::from_params(first.num_classes(), acc.into_iter().map(|a| a as f32).collect())
}

/// Where a run starts: a fresh initialisation or a checkpoint after some round.
#[derive(Clone, Debug)]
pub struct RunState {
    pub model: SegModel,
    pub completed_rounds: usize,
}

impl RunState {
    pub fn fresh(num_classes: usize, seed: u64) -> Self {
        RunState { model: SegModel::init(num_classes, seed), completed_rounds: 0 }
    }
}

/// Metric tables of the global model on the held-out data.
pub fn evaluate_federation(model: &SegModel, fed: &Federation) -> Result<(MetricTable, MetricTable)> {
    let per_client = fed
        .clients
        .iter()
        .map(|c| evaluate_model(model, &c.test))
        .collect::<Result<Vec<_>>>()?;
    let in_fed = MetricTable::average(&per_client);
    let out_fed = evaluate_model(model, &fed.out_of_federation)?;
    Ok((in_fed, out_fed))
}

fn check_setup(cfg: &FederationConfig, fed: &Federation, bank: Option<&StyleBank>) -> Result<()> {
    cfg.validate()?;
    if fed.clients.len() < 2 {
        return Err(Error::Config("a federation needs at least two clients".into()));
    }
    if let Some(c) = fed.clients.iter().find(|c| c.train.is_empty()) {
        return Err(Error::Config(format!("client {} has no training volumes", c.id)));
    }
    if cfg.augmentation.uses_bank() {
        let bank = bank.ok_or_else(|| Error::Config(format!("arm {} needs a style bank", cfg.augmentation)))?;
        if bank.is_empty() {
            return Err(Error::Config("style bank is empty".into()));
        }
        if bank.beta() != cfg.beta || bank.crop_size() != cfg.crop_size {
            return Err(Error::Config(format!(
                "bank (beta {:?}, crop {:?}) does not match config (beta {:?}, crop {:?})",
                bank.beta(),
                bank.crop_size(),
                cfg.beta,
                cfg.crop_size
            )));
        }
    }
    Ok(())
}

/// Bytes of the bank as shipped, or zero for arms that do not use it.
pub fn style_bytes(cfg: &FederationConfig, bank: Option<&StyleBank>) -> u64 {
    match bank {
        Some(b) if cfg.augmentation.uses_bank() => bank_size_bytes(b) as u64,
        _ => 0,
    }
}

/// Runs rounds `state.completed_rounds + 1 ..= cfg.rounds`. `on_round` sees
/// every report with the aggregated model, e.g. to write checkpoints.
pub fn run_rounds(
    cfg: &FederationConfig,
    fed: &Federation,
    bank: Option<&StyleBank>,
    state: RunState,
    mut on_round: impl FnMut(&RoundReport, &SegModel) -> Result<()>,
) -> Result<(SegModel, Vec<RoundReport>)> {
    check_setup(cfg, fed, bank)?;
    if state.model.num_classes() != fed.num_classes {
        return Err(Error::Config("model and data disagree on the number of classes".into()));
    }
    let ledger = traffic_report(cfg.rounds as u64, checkpoint_size_bytes(&state.model) as u64, style_bytes(cfg, bank));
    let sizes = fed.data_sizes();
    let mut global = state.model;
    let mut reports = Vec::new();
    for round in state.completed_rounds + 1..=cfg.rounds {
        let outcomes = fed
            .clients
            .par_iter()
            .map(|c| {
                let mut rngs = LocalRngs::for_round(cfg.seed, c.id, round);
                local_train(&global, c, bank, cfg, &mut rngs)
            })
            .collect::<Result<Vec<_>>>()?;
        let models: Vec<SegModel> = outcomes.iter().map(|o| o.model.clone()).collect();
        global = fedavg(&models, &sizes)?;
        let (in_fed, out_of_fed) = if cfg.evaluates(round) {
            let (a, b) = evaluate_federation(&global, fed)?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        let report = RoundReport {
            round,
            client_losses: outcomes.iter().map(|o| o.mean_loss).collect(),
            in_fed,
            out_of_fed,
            cumulative_bytes: ledger.after_round(round as u64),
        };
        on_round(&report, &global)?;
        reports.push(report);
    }
    Ok((global, reports))
}

/// Full run from a fresh model.
pub fn run_federation(cfg: &FederationConfig, fed: &Federation, bank: Option<&StyleBank>) -> Result<Vec<RoundReport>> {
    let state = RunState::fresh(fed.num_classes, cfg.seed);
    Ok(run_rounds(cfg, fed, bank, state, |_, _| Ok(()))?.1)
}
