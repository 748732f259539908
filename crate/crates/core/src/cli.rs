//! The `a3dfdg` command-line driver: data generation, bank building,
//! federated training and report tables.
//!
//! Configuration is a flat `key = value` text file; command-line flags win
//! over file values. Exit codes: 0 success, 1 runtime failure, 2 usage or
//! configuration error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::federation::{
    read_round_csv, run_rounds, style_bytes, write_round_csv, Augmentation, FederatedClient, Federation,
    FederationConfig, RoundReport, RoundRow, RunState,
};
use crate::phantom::{self, AnalyticSliceScores, LabeledVolume, PhantomSpec};
use crate::segmodel::{read_checkpoint, write_checkpoint};
use crate::stylebank::{
    bank_size_bytes, deserialize_bank, serialize_bank, RegistrationConfig, StyleBank, TrainingVolumes,
    DEFAULT_CROPS_PER_VOLUME,
};
use crate::volume::{read_labels, read_volume, write_labels, write_volume, Provenance, Split};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const THREADS_ENV: &str = "A3DFDG_THREADS";

/// A failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or missing inputs: exit code 2.
    Usage(String),
    /// Anything that went wrong while running: exit code 1.
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "a3dfdg", version, about = "Federated segmentation with anatomically matched 3D style augmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Default)]
pub struct CommonArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory or file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Worker threads (falls back to A3DFDG_THREADS).
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the phantom federation to disk.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Register training-split styles into a bank file.
    BuildBank {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory written by gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Federated training; writes rounds.csv and per-round checkpoints.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        arm: Option<String>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Final-round comparison table of one or more training runs.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub federation: FederationConfig,
    pub crops_per_volume: usize,
    pub num_classes: usize,
    pub volumes_per_client: usize,
    pub out_of_federation_volumes: usize,
    pub volume_shape: [usize; 3],
    pub data_dir: Option<PathBuf>,
    pub bank_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = PhantomSpec::default();
        RunConfig {
            federation: FederationConfig::default(),
            crops_per_volume: DEFAULT_CROPS_PER_VOLUME,
            num_classes: spec.num_classes(),
            volumes_per_client: spec.volumes_per_client,
            out_of_federation_volumes: spec.out_of_federation_volumes,
            volume_shape: spec.shape,
            data_dir: None,
            bank_path: None,
            out_dir: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for key {key}")))
}

fn parse_list<T: std::str::FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = v.split(',').map(|s| parse_value(key, s.trim())).collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("key {key} needs {N} comma-separated values")))
}

fn list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let f = &mut self.federation;
        match key {
            "seed" => f.seed = parse_value(key, v)?,
            "rounds" => f.rounds = parse_value(key, v)?,
            "local_iters" => f.local_iters = parse_value(key, v)?,
            "lr" => f.lr = parse_value(key, v)?,
            "batch_size" => f.batch_size = parse_value(key, v)?,
            "alpha_range" => {
                let [a, b] = parse_list::<f32, 2>(key, v)?;
                f.alpha_range = (a, b);
            }
            "beta" => f.beta = parse_list(key, v)?,
            "z_bin" => f.z_bin = parse_value(key, v)?,
            "tau_air" => f.tau_air = parse_value(key, v)?,
            "arm" => f.augmentation = v.parse()?,
            "crop_size" => f.crop_size = parse_list(key, v)?,
            "eval_every" => f.eval_every = parse_value(key, v)?,
            "crops_per_volume" => self.crops_per_volume = parse_value(key, v)?,
            "num_classes" => self.num_classes = parse_value(key, v)?,
            "volumes_per_client" => self.volumes_per_client = parse_value(key, v)?,
            "ood_volumes" => self.out_of_federation_volumes = parse_value(key, v)?,
            "volume_shape" => self.volume_shape = parse_list(key, v)?,
            "data_dir" => self.data_dir = Some(v.into()),
            "bank_path" => self.bank_path = Some(v.into()),
            "out_dir" => self.out_dir = Some(v.into()),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                Ok(RunConfig::parse(&text)?)
            }
        }
    }

    /// Every key with its resolved value, in a form [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let f = &self.federation;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", f.seed.to_string());
        kv("rounds", f.rounds.to_string());
        kv("local_iters", f.local_iters.to_string());
        kv("lr", f.lr.to_string());
        kv("batch_size", f.batch_size.to_string());
        kv("alpha_range", list(&[f.alpha_range.0, f.alpha_range.1]));
        kv("beta", list(&f.beta));
        kv("z_bin", f.z_bin.to_string());
        kv("tau_air", f.tau_air.to_string());
        kv("arm", f.augmentation.to_string());
        kv("crop_size", list(&f.crop_size));
        kv("eval_every", f.eval_every.to_string());
        kv("crops_per_volume", self.crops_per_volume.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("volumes_per_client", self.volumes_per_client.to_string());
        kv("ood_volumes", self.out_of_federation_volumes.to_string());
        kv("volume_shape", list(&self.volume_shape));
        for (k, p) in [("data_dir", &self.data_dir), ("bank_path", &self.bank_path), ("out_dir", &self.out_dir)] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        s
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            seed: self.federation.seed,
            volumes_per_client: self.volumes_per_client,
            out_of_federation_volumes: self.out_of_federation_volumes,
            shape: self.volume_shape,
            crop_size: self.federation.crop_size,
            ..PhantomSpec::default()
        }
    }

    /// Organ names for report columns.
    pub fn organ_names(&self) -> Vec<(u8, String)> {
        let spec = PhantomSpec::default();
        if spec.num_classes() == self.num_classes {
            spec.organ_names()
        } else {
            (1..self.num_classes as u8).map(|c| (c, format!("class{c}"))).collect()
        }
    }
}

/// What a run read, wrote and with which settings. Written as a config file
/// whose comment lines carry the provenance, so it can be passed back via
/// `--config` to replay the run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub build: String,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            command: command.into(),
            config: config.clone(),
            build: build_id(),
            artifacts: Vec::new(),
        }
    }

    pub fn render(&self, created_unix: u64) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# command: {}", self.command);
        let _ = writeln!(s, "# build: {}", self.build);
        let _ = writeln!(s, "# created: {created_unix}");
        for a in &self.artifacts {
            let _ = writeln!(s, "# artifact: {}", a.display());
        }
        s.push_str(&self.config.to_text());
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        fs::write(dir.join(RUN_MANIFEST_FILE), self.render(now))?;
        Ok(())
    }

    /// Reads a manifest back; comment lines are parsed for command and artifacts.
    pub fn parse(text: &str) -> Result<Self> {
        let config = RunConfig::parse(text)?;
        let mut m = RunManifest::new("", &config);
        m.build.clear();
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("# command: ") {
                m.command = v.into();
            } else if let Some(v) = line.strip_prefix("# build: ") {
                m.build = v.into();
            } else if let Some(v) = line.strip_prefix("# artifact: ") {
                m.artifacts.push(v.into());
            }
        }
        Ok(m)
    }
}

pub fn build_id() -> String {
    format!("a3dfdg {}{}", env!("CARGO_PKG_VERSION"), option_env!("A3DFDG_BUILD_ID").map(|b| format!("+{b}")).unwrap_or_default())
}

/// One line of a data manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Volume file, relative to the data directory. The label file is the
    /// same path with a `.labels` extension.
    pub path: PathBuf,
    pub client: u32,
    pub split: Split,
    pub z_window: (f32, f32),
}

impl ManifestEntry {
    pub fn labels_path(&self) -> PathBuf {
        self.path.with_extension("labels")
    }

    fn line(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.path.display(), self.client, self.split, self.z_window.0, self.z_window.1)
    }
}

pub fn parse_data_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("manifest line {}: expected 5 tab-separated fields", n + 1)));
            }
            let num = |s: &str| s.parse::<f32>().map_err(|_| Error::Format(format!("manifest line {}: bad number {s:?}", n + 1)));
            Ok(ManifestEntry {
                path: f[0].into(),
                client: f[1].parse().map_err(|_| Error::Format(format!("manifest line {}: bad client", n + 1)))?,
                split: f[2].parse()?,
                z_window: (num(f[3])?, num(f[4])?),
            })
        })
        .collect()
}

fn ensure_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(Error::from)?.next().is_some();
        if non_empty && !force {
            return Err(usage(format!("{} exists and is not empty (use --force)", dir.display())));
        }
        if non_empty {
            fs::remove_dir_all(dir).map_err(Error::from)?;
        }
    }
    fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(())
}

fn write_labeled(dir: &Path, rel: &Path, lv: &LabeledVolume) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(&path)?);
    write_volume(&mut w, &lv.volume)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(path.with_extension("labels"))?);
    write_labels(&mut w, &lv.labels, &lv.volume)?;
    w.flush()?;
    Ok(())
}

fn entry_for(lv: &LabeledVolume) -> ManifestEntry {
    let p = lv.volume.provenance().expect("phantom volumes carry provenance");
    let dir = if p.split == Split::OutOfFederation { "ood".to_string() } else { format!("client{}", p.client_id) };
    ManifestEntry {
        path: PathBuf::from(dir).join(format!("{}_{:03}.a3dv", p.split, p.index)),
        client: p.client_id,
        split: p.split,
        z_window: p.z_window,
    }
}

/// Renders the phantom federation into `out` and returns the manifest entries.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, force: bool) -> CliResult<Vec<ManifestEntry>> {
    let spec = cfg.phantom_spec();
    spec.validate()?;
    ensure_out_dir(out, force)?;
    let mut entries = Vec::new();
    for client in 0..spec.clients.len() as u32 {
        let ds = phantom::generate_client_dataset(&spec, client)?;
        for lv in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            let e = entry_for(lv);
            write_labeled(out, &e.path, lv)?;
            entries.push(e);
        }
    }
    for lv in phantom::make_out_of_federation_client(&spec)? {
        let e = entry_for(&lv);
        write_labeled(out, &e.path, &lv)?;
        entries.push(e);
    }
    let text: String = entries.iter().map(|e| e.line() + "\n").collect();
    fs::write(out.join(MANIFEST_FILE), text).map_err(Error::from)?;
    let mut m = RunManifest::new("gen-data", cfg);
    m.artifacts.push(MANIFEST_FILE.into());
    m.artifacts.extend(entries.iter().map(|e| e.path.clone()));
    m.write(out)?;
    Ok(entries)
}

fn read_manifest(data: &Path) -> CliResult<Vec<ManifestEntry>> {
    let path = data.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(parse_data_manifest(&text)?)
}

fn load_entry(data: &Path, e: &ManifestEntry, index: u32) -> Result<LabeledVolume> {
    let volume = read_volume(&mut BufReader::new(File::open(data.join(&e.path))?))?;
    let labels = read_labels(&mut BufReader::new(File::open(data.join(e.labels_path()))?))?;
    if labels.shape() != volume.data().shape() {
        return Err(Error::Format(format!("labels of {} do not match the volume shape", e.path.display())));
    }
    let volume = volume.with_provenance(Provenance { client_id: e.client, split: e.split, index, z_window: e.z_window });
    Ok(LabeledVolume { volume, labels })
}

/// Loads a data directory; `wanted` filters the splits that are read.
pub fn load_federation(data: &Path, num_classes: usize, wanted: &[Split]) -> CliResult<Federation> {
    let entries = read_manifest(data)?;
    let mut clients: BTreeMap<u32, FederatedClient> = BTreeMap::new();
    let mut ood = Vec::new();
    let mut counters: BTreeMap<(u32, Split), u32> = BTreeMap::new();
    for e in &entries {
        let idx = counters.entry((e.client, e.split)).or_default();
        let index = *idx;
        *idx += 1;
        if e.split != Split::OutOfFederation {
            clients
                .entry(e.client)
                .or_insert_with(|| FederatedClient { id: e.client, train: Vec::new(), test: Vec::new() });
        }
        if !wanted.contains(&e.split) {
            continue;
        }
        let lv = load_entry(data, e, index)?;
        match e.split {
            Split::Train => clients.get_mut(&e.client).unwrap().train.push(lv),
            Split::Test => clients.get_mut(&e.client).unwrap().test.push(lv),
            Split::Val => {}
            Split::OutOfFederation => ood.push(lv),
        }
    }
    Ok(Federation { clients: clients.into_values().collect(), out_of_federation: ood, num_classes })
}

/// Registers the training split of a data directory and writes the bank.
pub fn cmd_build_bank(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> CliResult<StyleBank> {
    cfg.federation.validate()?;
    if out.exists() && !force {
        return Err(usage(format!("{} exists (use --force)", out.display())));
    }
    let fed = load_federation(data, cfg.num_classes, &[Split::Train])?;
    let f = &cfg.federation;
    let mut bank = StyleBank::new(f.z_bin, f.beta, f.crop_size)?;
    let reg = RegistrationConfig { crops_per_volume: cfg.crops_per_volume, seed: f.seed, ..RegistrationConfig::default() };
    for c in &fed.clients {
        let vols: Vec<_> = c.train.iter().map(|lv| lv.volume.clone()).collect();
        let report = bank.register_client_styles(c.id, TrainingVolumes::new(&vols)?, &reg, &AnalyticSliceScores)?;
        for (id, why) in &report.skipped {
            eprintln!("skipped {id}: {why}");
        }
    }
    let bytes = serialize_bank(&bank);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::from)?;
    }
    fs::write(out, &bytes).map_err(Error::from)?;
    println!(
        "{} styles from {} clients, block {:?}, {} bytes",
        bank.style_count(),
        fed.clients.len(),
        bank.block_shape(),
        bank_size_bytes(&bank)
    );
    Ok(bank)
}

fn checkpoint_name(round: usize) -> String {
    format!("round_{round:04}.a3dm")
}

fn latest_checkpoint(out: &Path) -> Result<Option<(usize, PathBuf)>> {
    let dir = out.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(&dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        let round = name.strip_prefix("round_").and_then(|r| r.strip_suffix(".a3dm")).and_then(|r| r.parse::<usize>().ok());
        if let Some(r) = round {
            if best.as_ref().is_none_or(|(b, _)| r > *b) {
                best = Some((r, dir.join(name)));
            }
        }
    }
    Ok(best)
}

/// Federated training into `out`: `rounds.csv`, `checkpoints/round_XXXX.a3dm`
/// and the run manifest.
pub fn cmd_train(cfg: &RunConfig, data: &Path, bank_path: Option<&Path>, out: &Path, force: bool, resume: bool) -> CliResult<Vec<RoundReport>> {
    let f = &cfg.federation;
    f.validate()?;
    let bank = if f.augmentation.uses_bank() {
        let p = bank_path.ok_or_else(|| usage(format!("arm {} needs --bank", f.augmentation)))?;
        let bytes = fs::read(p).map_err(|e| usage(format!("cannot read bank {}: {e}", p.display())))?;
        Some(deserialize_bank(&bytes)?)
    } else {
        None
    };
    let fed = load_federation(data, cfg.num_classes, &[Split::Train, Split::Test, Split::OutOfFederation])?;

    let csv_path = out.join(ROUNDS_CSV);
    let (state, mut csv_lines) = match latest_checkpoint(out)? {
        Some((round, path)) if resume => {
            let model = read_checkpoint(&mut BufReader::new(File::open(&path).map_err(Error::from)?))?;
            let text = fs::read_to_string(&csv_path).map_err(|e| usage(format!("cannot resume without {}: {e}", csv_path.display())))?;
            let lines: Vec<String> = text.lines().take(round + 1).map(str::to_string).collect();
            if lines.len() != round + 1 {
                return Err(usage(format!("{} has fewer rows than checkpoint round {round}", csv_path.display())));
            }
            (RunState { model, completed_rounds: round }, lines)
        }
        _ => {
            ensure_out_dir(out, force || resume)?;
            (RunState::fresh(cfg.num_classes, f.seed), Vec::new())
        }
    };
    fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(Error::from)?;

    let ids: Vec<u32> = fed.clients.iter().map(|c| c.id).collect();
    let organs = cfg.organ_names();
    println!(
        "arm {} rounds {} clients {} style bytes {}",
        f.augmentation,
        f.rounds,
        ids.len(),
        style_bytes(f, bank.as_ref())
    );
    let (_, reports) = run_rounds(f, &fed, bank.as_ref(), state, |report, model| {
        let mut w = BufWriter::new(File::create(out.join(CHECKPOINT_DIR).join(checkpoint_name(report.round)))?);
        write_checkpoint(&mut w, model)?;
        w.flush()?;
        let mut buf = Vec::new();
        write_round_csv(&mut buf, std::slice::from_ref(report), &ids, &organs)?;
        let text = String::from_utf8(buf).expect("csv is utf-8");
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default().to_string();
        if csv_lines.is_empty() {
            csv_lines.push(header);
        }
        csv_lines.extend(lines.map(str::to_string));
        fs::write(&csv_path, csv_lines.join("\n") + "\n")?;
        let dsc = report.in_fed.as_ref().map(|t| format!(" in-fed DSC {:.2}", t.global_dsc)).unwrap_or_default();
        println!("round {}{dsc} bytes {}", report.round, report.cumulative_bytes);
        Ok(())
    })?;
    let mut m = RunManifest::new("train", cfg);
    m.config.data_dir = Some(data.to_path_buf());
    m.config.bank_path = bank_path.map(Path::to_path_buf);
    m.artifacts.push(ROUNDS_CSV.into());
    m.artifacts.extend((1..=f.rounds).map(|r| PathBuf::from(CHECKPOINT_DIR).join(checkpoint_name(r))));
    m.write(out)?;
    Ok(reports)
}

fn final_row(run: &Path) -> CliResult<RoundRow> {
    let path = run.join(ROUNDS_CSV);
    let file = File::open(&path).map_err(|_| usage(format!("missing round CSV {}", path.display())))?;
    read_round_csv(BufReader::new(file))?
        .into_iter()
        .next_back()
        .ok_or_else(|| usage(format!("{} has no rounds", path.display())))
}

fn report_columns(row: &RoundRow) -> Vec<String> {
    let mut cols: Vec<String> = row
        .columns
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n.starts_with("in_") || n.starts_with("ood_"))
        .collect();
    cols.push("cumulative_bytes".into());
    cols
}

/// Side-by-side final-round metrics; the first run is the reference for deltas.
pub fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> CliResult<String> {
    let rows = runs.iter().map(|r| final_row(r)).collect::<CliResult<Vec<_>>>()?;
    let cols = report_columns(&rows[0]);
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());

    let mut text = String::new();
    let _ = write!(text, "{:<24}", "metric");
    for r in runs {
        let _ = write!(text, " {:>14}", r.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    }
    for r in runs.iter().skip(1) {
        let _ = write!(text, " {:>14}", format!("d({})", r.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()));
    }
    text.push('\n');
    for c in &cols {
        let _ = write!(text, "{c:<24}");
        for row in &rows {
            let _ = write!(text, " {:>14}", cell(row.get(c)));
        }
        for row in rows.iter().skip(1) {
            let d = row.get(c).zip(rows[0].get(c)).map(|(a, b)| a - b);
            let _ = write!(text, " {:>14}", cell(d));
        }
        text.push('\n');
    }

    if let Some(out) = out {
        let mut w = csv::Writer::from_path(out).map_err(|e| CliError::Runtime(Error::Io(e.into())))?;
        let mut header = vec!["run".to_string()];
        header.extend(cols.iter().cloned());
        w.write_record(&header).map_err(|e| CliError::Runtime(Error::Io(e.into())))?;
        for (run, row) in runs.iter().zip(&rows) {
            let mut rec = vec![run.display().to_string()];
            rec.extend(cols.iter().map(|c| row.get(c).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec).map_err(|e| CliError::Runtime(Error::Io(e.into())))?;
        }
        w.flush().map_err(Error::from)?;
    }
    Ok(text)
}

fn configure_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn resolve(common: &CommonArgs) -> CliResult<RunConfig> {
    configure_threads(common.threads)?;
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.federation.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn required(p: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    p.ok_or_else(|| usage(format!("missing {what}")))
}

/// Runs a parsed command line.
pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = resolve(&common)?;
            let out = required(cfg.out_dir.clone(), "--out")?;
            let entries = cmd_gen_data(&cfg, &out, common.force)?;
            println!("wrote {} volumes to {}", entries.len(), out.display());
        }
        Command::BuildBank { common, data } => {
            let cfg = resolve(&common)?;
            let data = required(data.or(cfg.data_dir.clone()), "--data")?;
            let out = required(cfg.out_dir.clone().or(cfg.bank_path.clone()), "--out")?;
            cmd_build_bank(&cfg, &data, &out, common.force)?;
        }
        Command::Train { common, data, bank, rounds, arm, resume } => {
            let mut cfg = resolve(&common)?;
            if let Some(r) = rounds {
                cfg.federation.rounds = r;
            }
            if let Some(a) = arm {
                cfg.federation.augmentation = a.parse::<Augmentation>()?;
            }
            let data = required(data.or(cfg.data_dir.clone()), "--data")?;
            let out = required(cfg.out_dir.clone(), "--out")?;
            let bank = bank.or(cfg.bank_path.clone());
            cmd_train(&cfg, &data, bank.as_deref(), &out, common.force, resume)?;
        }
        Command::Report { common, runs } => {
            configure_threads(common.threads)?;
            print!("{}", cmd_report(&runs, common.out.as_deref())?);
        }
    }
    Ok(())
}

/// Entry point used by the binary.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
