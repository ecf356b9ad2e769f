//! Experiment configuration, orchestration and report files.
//!
//! A [`Lab`] owns one [`ExperimentConfig`] and caches datasets and protocol
//! runs, so commands that need the same run (calibration and fidelity share
//! the unwatermarked runs, for example) train it once.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attacks::{self, AttackConfig, AttackError, AttackRecord, DistillConfig};
use crate::field::{check_aggregate_bound, Precision};
use crate::flsim::{self, DatasetConfig, FlError, MlpShape, OptimizerConfig, SyntheticDataset};
use crate::par;
use crate::protocol::{self, MlpTrainer, ProtocolConfig, ProtocolError, RunOutput};
use crate::seed;
use crate::setup::{self, KeyFile, SetupError, SetupResult};
use crate::sharing::{ShamirConfig, ShamirShare, SharingError};
use crate::verify::{self, CalibrationTable, Fingerprint, VerificationReport, VerifyContext, VerifyError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("config file: {0}")]
    ConfigParse(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Training(#[from] FlError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetupMode {
    #[default]
    Dealer,
    Dkg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    /// Unwatermarked runs use seeds `seed_base .. seed_base + n_models`.
    pub n_models: usize,
    pub n_keys: usize,
    pub seed_base: u64,
    /// Master seed for the random calibration keys.
    pub key_seed: u64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            n_models: 5,
            n_keys: 2000,
            seed_base: 0,
            key_seed: 7919,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalabilitySection {
    pub k_values: Vec<usize>,
    pub baseline_c: f64,
    /// Threshold as a fraction of `K` for swept client counts.
    pub t_ratio: f64,
}

impl Default for ScalabilitySection {
    fn default() -> Self {
        Self {
            k_values: vec![4, 8, 16, 32, 64, 128],
            baseline_c: 0.1,
            t_ratio: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidelitySection {
    pub c_values: Vec<f64>,
}

impl Default for FidelitySection {
    fn default() -> Self {
        Self {
            c_values: vec![0.0, 0.025, 0.05, 0.075, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSection {
    /// Seeds of the watermarked runs to attack.
    pub seeds: Vec<u64>,
    pub attacks: Vec<AttackConfig>,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            attacks: AttackConfig::default_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub z_star: f64,
    pub setup_mode: SetupMode,
    /// `protocol.seed` is replaced by the run seed.
    pub protocol: ProtocolConfig,
    /// `data.seed` and `data.k` are replaced by the run seed and client count.
    pub data: DatasetConfig,
    pub model: ModelSection,
    pub optimizer: OptimizerConfig,
    pub precision: Precision,
    pub calibration: CalibrationSection,
    pub scalability: ScalabilitySection,
    pub fidelity: FidelitySection,
    pub robustness: RobustnessSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("out"),
            z_star: verify::DEFAULT_Z_STAR,
            setup_mode: SetupMode::Dealer,
            protocol: ProtocolConfig::default(),
            data: DatasetConfig {
                sigma: 1.5,
                ..DatasetConfig::default()
            },
            model: ModelSection::default(),
            optimizer: OptimizerConfig::default(),
            precision: Precision::default(),
            calibration: CalibrationSection::default(),
            scalability: ScalabilitySection::default(),
            fidelity: FidelitySection::default(),
            robustness: RobustnessSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| ExperimentError::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Loads `path` (or defaults) and applies `section.key=value` overrides.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => Self::default().to_toml(),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| ExperimentError::ConfigParse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let text = toml::to_string(&table).map_err(|e| ExperimentError::ConfigParse(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            inputs: self.data.m,
            hidden: self.model.hidden,
            classes: self.data.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        self.protocol.validate()?;
        if self.data.n % self.protocol.k != 0 {
            return bad(format!("n = {} is not divisible by K = {}", self.data.n, self.protocol.k));
        }
        if !(self.scalability.t_ratio > 0.0 && self.scalability.t_ratio <= 1.0) {
            return bad("scalability.t_ratio must lie in (0, 1]".into());
        }
        for &k in &self.scalability.k_values {
            if k == 0 || self.data.n % k != 0 {
                return bad(format!("n = {} is not divisible by swept K = {k}", self.data.n));
            }
        }
        for a in &self.robustness.attacks {
            a.validate()?;
        }
        let d = self.shape().d();
        let k_max = self.scalability.k_values.iter().copied().chain([self.protocol.k]).max().unwrap_or(1);
        check_aggregate_bound(d, k_max, self.protocol.theta_max, self.protocol.scale_max, &self.precision)
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical TOML, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Sets `a.b.c = value` in a TOML table; the value is parsed as TOML, or taken as a string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ExperimentError::ConfigParse(format!("override '{assignment}' is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut cur = table;
    for key in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ExperimentError::ConfigParse(format!("'{key}' is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FedAvg,
    Threshold,
    Baseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::Threshold => "threshold",
            Method::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RunKey {
    pub method: Method,
    pub seed: u64,
    pub k: usize,
    c_bits: u64,
}

impl RunKey {
    pub fn new(method: Method, seed: u64, k: usize, c: f64) -> Self {
        // A zero-strength watermark run is the plain FedAvg run.
        let (method, c) = if c == 0.0 && method != Method::FedAvg { (Method::FedAvg, 0.0) } else { (method, c) };
        let c = if method == Method::FedAvg { 0.0 } else { c };
        Self { method, seed, k, c_bits: c.to_bits() }
    }

    pub fn c(&self) -> f64 {
        f64::from_bits(self.c_bits)
    }
}

pub struct RunArtifacts {
    pub key: RunKey,
    pub protocol: ProtocolConfig,
    pub output: RunOutput,
    pub setup: Option<SetupResult>,
    pub baseline_keys: Option<Vec<Vec<f64>>>,
    pub final_accuracy: f64,
    pub wall_time_s: f64,
}

/// One measurement row; `wall_time_s` is the only non-deterministic column and comes last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub method: String,
    pub k: usize,
    pub c: f64,
    pub seed: u64,
    pub step: u64,
    pub train_loss: Option<f64>,
    pub accuracy: f64,
    pub z: Option<f64>,
    pub cosine: Option<f64>,
    pub config_hash: String,
    pub wall_time_s: f64,
}

fn sort_metrics(rows: &mut [MetricsRecord]) {
    rows.sort_by(|a, b| {
        (a.experiment.as_str(), a.method.as_str(), a.k, a.seed, a.step)
            .cmp(&(b.experiment.as_str(), b.method.as_str(), b.k, b.seed, b.step))
            .then(a.c.total_cmp(&b.c))
    });
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| ExperimentError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Drops the trailing wall-time column from every line.
pub fn strip_wall_time(csv_text: &str) -> String {
    csv_text
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub name: String,
    pub seeds: Vec<u64>,
    /// Hex `nonce:digest` per seed of each threshold run (dealer mode only).
    pub commitments: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub c: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub z: f64,
    pub cosine: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummaryRow {
    pub c: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub z_mean: f64,
    pub z_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub config_hash: String,
    pub rows: Vec<FidelitySummaryRow>,
    pub z_nondecreasing: bool,
    pub z_strictly_increasing: bool,
    pub accuracy_drop_pp: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityRow {
    pub k: usize,
    pub t: usize,
    pub method: String,
    pub seed: u64,
    pub accuracy: f64,
    pub z: f64,
    pub best_client: Option<u64>,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityPoint {
    pub k: usize,
    pub threshold_z_mean: f64,
    pub threshold_z_cv: f64,
    pub baseline_z_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalabilitySummary {
    pub config_hash: String,
    pub points: Vec<ScalabilityPoint>,
    /// Least-squares slope of `ln z` against `ln K` for the baseline.
    pub baseline_exponent: f64,
    pub threshold_detects_everywhere: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub budget: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub config_hash: String,
    pub z_threshold: f64,
    pub original: Vec<(u64, f64, f64)>,
    pub frontiers: Vec<Frontier>,
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Filled by whichever caller first asks for the run; concurrent callers wait on it.
type RunSlot = Arc<Mutex<Option<Arc<RunArtifacts>>>>;

pub struct Lab {
    pub config: ExperimentConfig,
    hash: String,
    retain_debug: bool,
    datasets: Mutex<HashMap<(u64, usize), Arc<SyntheticDataset>>>,
    runs: Mutex<HashMap<RunKey, RunSlot>>,
    calibration: OnceLock<CalibrationTable>,
}

impl Lab {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            hash: config.hash(),
            config,
            retain_debug: false,
            datasets: Mutex::default(),
            runs: Mutex::default(),
            calibration: OnceLock::new(),
        })
    }

    /// Keeps plaintext keys in setups (test oracles only).
    pub fn with_debug_keys(mut self) -> Self {
        self.retain_debug = true;
        self
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn shape(&self) -> MlpShape {
        self.config.shape()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let shape = self.shape();
        Fingerprint {
            arch: shape.fingerprint(),
            d: shape.d(),
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    pub fn dataset(&self, seed_: u64, k: usize) -> Result<Arc<SyntheticDataset>> {
        if let Some(ds) = self.datasets.lock().unwrap().get(&(seed_, k)) {
            return Ok(ds.clone());
        }
        let cfg = DatasetConfig {
            seed: seed_,
            k,
            ..self.config.data.clone()
        };
        let ds = Arc::new(flsim::gen_dataset(&cfg)?);
        self.datasets.lock().unwrap().insert((seed_, k), ds.clone());
        Ok(ds)
    }

    pub fn threshold_for(&self, k: usize) -> usize {
        if k == self.config.protocol.k {
            self.config.protocol.t
        } else {
            ((k as f64 * self.config.scalability.t_ratio).round() as usize).clamp(1, k)
        }
    }

    pub fn protocol_config(&self, seed_: u64, k: usize, c: f64) -> ProtocolConfig {
        ProtocolConfig {
            k,
            t: self.threshold_for(k),
            c,
            seed: seed_,
            ..self.config.protocol.clone()
        }
    }

    pub fn setup_for(&self, seed_: u64, k: usize) -> Result<SetupResult> {
        let p = &self.config.precision;
        let cfg = ShamirConfig::new(k, self.threshold_for(k), p.modulus)?;
        let d = self.shape().d();
        Ok(match self.config.setup_mode {
            SetupMode::Dealer => {
                let mut rng = seed::stream(seed_, "dealer", &[k as u64]);
                setup::setup_trusted_dealer(&cfg, d, p, &mut rng, self.retain_debug)?
            }
            SetupMode::Dkg => setup::setup_dkg(&cfg, d, p, seed_, self.retain_debug)?,
        })
    }

    /// Runs (or fetches) one federated training run.
    pub fn run(&self, method: Method, seed_: u64, k: usize, c: f64) -> Result<Arc<RunArtifacts>> {
        let key = RunKey::new(method, seed_, k, c);
        let slot = self.runs.lock().unwrap().entry(key).or_default().clone();
        let mut slot = slot.lock().unwrap();
        if let Some(r) = slot.as_ref() {
            return Ok(r.clone());
        }
        let start = Instant::now();
        let ds = self.dataset(seed_, k)?;
        let shape = self.shape();
        let mut trainer = MlpTrainer::new(shape, &ds.shards, Some(&ds.test), seed_);
        trainer.train.optimizer = self.config.optimizer;
        let pc = self.protocol_config(seed_, k, key.c());
        let theta0 = protocol::initial_model(&shape, seed_);
        let p = &self.config.precision;
        let (output, setup, baseline_keys) = match key.method {
            Method::FedAvg => (protocol::run_fedavg(&pc, p, theta0, &trainer)?, None, None),
            Method::Threshold => {
                let setup = self.setup_for(seed_, k)?;
                (protocol::run_protocol(&pc, &setup, theta0, &trainer)?, Some(setup), None)
            }
            Method::Baseline => {
                let keys = protocol::baseline_keys(k, shape.d(), p.tau_bound, seed_);
                (protocol::run_baseline(&pc, p, &keys, theta0, &trainer)?, None, Some(keys))
            }
        };
        let final_accuracy = flsim::evaluate(&shape, &output.final_model().theta, &ds.test);
        log::info!(
            "{} seed {seed_} K {k} c {}: accuracy {final_accuracy:.4}",
            key.method.name(),
            key.c()
        );
        let art = Arc::new(RunArtifacts {
            key,
            protocol: pc,
            output,
            setup,
            baseline_keys,
            final_accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        *slot = Some(art.clone());
        Ok(art)
    }

    /// Pools unwatermarked final models into a calibration table.
    pub fn calibration(&self) -> Result<CalibrationTable> {
        if let Some(t) = self.calibration.get() {
            return Ok(t.clone());
        }
        let cal = &self.config.calibration;
        if cal.n_models < 2 {
            return Err(VerifyError::InvalidInput(format!(
                "calibration needs at least two models, got {}",
                cal.n_models
            ))
            .into());
        }
        let k = self.config.protocol.k;
        let models = (0..cal.n_models as u64)
            .map(|i| Ok(self.run(Method::FedAvg, cal.seed_base + i, k, 0.0)?.output.final_model().theta.clone()))
            .collect::<Result<Vec<_>>>()?;
        let d = self.shape().d();
        let c = verify::calibrate(&models, cal.n_keys, cal.key_seed, self.fingerprint(), setup::public_norm(d))?;
        Ok(self.calibration.get_or_init(|| c.table).clone())
    }

    /// Coalition verification with the first `t` share holders.
    pub fn verify_threshold(&self, setup: &SetupResult, theta: &[f64]) -> Result<VerificationReport> {
        let calib = self.calibration()?;
        let t = setup.config.t();
        let shares: Vec<&ShamirShare> = setup.shares.iter().take(t).collect();
        let fp = self.fingerprint();
        let ctx = VerifyContext {
            config: &setup.config,
            precision: &setup.precision,
            public_norm: setup.public_norm,
            calib: &calib,
            fingerprint: &fp,
            z_star: self.config.z_star,
            session_seed: seed::derive_key(0, "verify-session", &[]),
        };
        Ok(verify::verify_coalition(&shares, theta, &ctx)?)
    }

    /// Best per-client statistic for a baseline run; each client tests its own key.
    pub fn verify_baseline(&self, keys: &[Vec<f64>], theta: &[f64]) -> Result<(u64, VerificationReport)> {
        let calib = self.calibration()?;
        let p = &self.config.precision;
        let norm = setup::public_norm(theta.len());
        let reports = par::map_indexed(keys.len(), |i| -> Result<VerificationReport> {
            let enc = p.share_codec().encode(&keys[i]).map_err(VerifyError::from)?;
            Ok(verify::verify_direct(theta, &enc, norm, &calib, self.config.z_star, p)?)
        });
        let mut best: Option<(u64, VerificationReport)> = None;
        for (i, r) in reports.into_iter().enumerate() {
            let r = r?;
            if best.as_ref().is_none_or(|(_, b)| r.z > b.z) {
                best = Some((i as u64 + 1, r));
            }
        }
        best.ok_or_else(|| ExperimentError::InvalidConfig("baseline run without keys".into()))
    }

    /// Verifies the final model of a watermarked run through the coalition path.
    pub fn final_report(&self, art: &RunArtifacts) -> Result<VerificationReport> {
        let setup = art
            .setup
            .as_ref()
            .ok_or_else(|| ExperimentError::InvalidConfig("run has no shared key".into()))?;
        self.verify_threshold(setup, &art.output.final_model().theta)
    }

    /// Per-round metrics of one run, with the watermark statistic for threshold runs.
    pub fn round_metrics(&self, art: &RunArtifacts, experiment: &str) -> Result<Vec<MetricsRecord>> {
        let traj = &art.output.trajectory;
        let reports: Vec<Option<VerificationReport>> = match &art.setup {
            Some(setup) => par::map(traj, |g| self.verify_threshold(setup, &g.theta))
                .into_iter()
                .map(|r| r.map(Some))
                .collect::<Result<_>>()?,
            None => vec![None; traj.len()],
        };
        let shape = self.shape();
        let ds = self.dataset(art.key.seed, art.key.k)?;
        let mut rows = Vec::with_capacity(traj.len());
        for (g, rep) in traj.iter().zip(reports) {
            let (loss, acc) = if g.round == 0 {
                (None, flsim::evaluate(&shape, &g.theta, &ds.test))
            } else {
                let m = &art.output.metrics[g.round as usize - 1];
                (Some(m.mean_train_loss), m.test_accuracy.unwrap_or(f64::NAN))
            };
            rows.push(MetricsRecord {
                experiment: experiment.to_string(),
                method: art.key.method.name().to_string(),
                k: art.key.k,
                c: art.key.c(),
                seed: art.key.seed,
                step: g.round,
                train_loss: loss,
                accuracy: acc,
                z: rep.as_ref().map(|r| r.z),
                cosine: rep.as_ref().map(|r| r.cosine),
                config_hash: self.hash.clone(),
                wall_time_s: art.wall_time_s,
            });
        }
        Ok(rows)
    }

    pub fn write_manifest(&self) -> Result<Manifest> {
        let mut commitments = BTreeMap::new();
        let slots: Vec<RunSlot> = self.runs.lock().unwrap().values().cloned().collect();
        for slot in slots {
            let Some(art) = slot.lock().unwrap().clone() else { continue };
            let key = art.key;
            if let Some(c) = art.setup.as_ref().and_then(|s| s.commitment) {
                commitments.insert(
                    format!("seed{}-k{}", key.seed, key.k),
                    format!("{}:{}", hex::encode(c.nonce), hex::encode(c.digest)),
                );
            }
        }
        let m = Manifest {
            config_hash: self.hash.clone(),
            name: self.config.name.clone(),
            seeds: self.config.seeds.clone(),
            commitments,
            config: self.config.clone(),
        };
        std::fs::create_dir_all(&self.config.output_dir)?;
        std::fs::write(
            self.out("manifest.toml"),
            toml::to_string(&m).expect("manifest serializes"),
        )?;
        Ok(m)
    }

    pub fn cmd_calibrate(&self) -> Result<CalibrationTable> {
        let table = self.calibration()?;
        std::fs::create_dir_all(&self.config.output_dir)?;
        table.write_to(&self.out("calibration.toml"))?;
        self.write_manifest()?;
        Ok(table)
    }

    /// Trains the watermarked run for `seed` and writes checkpoints, key files and metrics.
    pub fn cmd_train(&self, seed_: u64) -> Result<Vec<MetricsRecord>> {
        let k = self.config.protocol.k;
        let art = self.run(Method::Threshold, seed_, k, self.config.protocol.c)?;
        let dir = self.out(&format!("train/seed{seed_}"));
        protocol::write_trajectory(&dir.join("checkpoints"), &art.output.trajectory)?;
        if let Some(setup) = &art.setup {
            std::fs::create_dir_all(dir.join("keys"))?;
            for s in &setup.shares {
                let kf = setup.key_file(s.point).expect("share exists");
                kf.write_to(&dir.join(format!("keys/client{:03}.key", s.point)))?;
            }
        }
        let mut rows = self.round_metrics(&art, "train")?;
        sort_metrics(&mut rows);
        write_csv(&dir.join("metrics.csv"), &rows)?;
        self.calibration()?.write_to(&self.out("calibration.toml"))?;
        self.write_manifest()?;
        Ok(rows)
    }

    /// Final accuracy and statistic for each `c` and seed.
    pub fn fidelity_rows(&self, c_values: &[f64], seeds: &[u64]) -> Result<Vec<FidelityRow>> {
        let k = self.config.protocol.k;
        let mut rows = Vec::new();
        for &c in c_values {
            for &s in seeds {
                let art = self.run(Method::Threshold, s, k, c)?;
                let theta = &art.output.final_model().theta;
                let rep = match &art.setup {
                    Some(setup) => self.verify_threshold(setup, theta)?,
                    // Unwatermarked rows are tested against the seed's own shared key.
                    None => self.verify_threshold(&self.setup_for(s, k)?, theta)?,
                };
                rows.push(FidelityRow {
                    c,
                    seed: s,
                    accuracy: art.final_accuracy,
                    z: rep.z,
                    cosine: rep.cosine,
                    config_hash: self.hash.clone(),
                });
            }
        }
        rows.sort_by(|a, b| a.c.total_cmp(&b.c).then(a.seed.cmp(&b.seed)));
        Ok(rows)
    }

    pub fn cmd_fidelity(&self) -> Result<FidelitySummary> {
        let rows = self.fidelity_rows(&self.config.fidelity.c_values, &self.config.seeds)?;
        write_csv(&self.out("fidelity.csv"), &rows)?;
        let mut cs: Vec<f64> = self.config.fidelity.c_values.clone();
        cs.sort_by(f64::total_cmp);
        cs.dedup();
        let summary_rows: Vec<FidelitySummaryRow> = cs
            .iter()
            .map(|&c| {
                let acc: Vec<f64> = rows.iter().filter(|r| r.c == c).map(|r| r.accuracy).collect();
                let z: Vec<f64> = rows.iter().filter(|r| r.c == c).map(|r| r.z).collect();
                let (accuracy_mean, accuracy_std) = mean_std(&acc);
                let (z_mean, z_std) = mean_std(&z);
                FidelitySummaryRow { c, accuracy_mean, accuracy_std, z_mean, z_std }
            })
            .collect();
        let zs: Vec<f64> = summary_rows.iter().map(|r| r.z_mean).collect();
        let base = summary_rows.iter().find(|r| r.c == 0.0).map(|r| r.accuracy_mean);
        let summary = FidelitySummary {
            config_hash: self.hash.clone(),
            z_nondecreasing: zs.windows(2).all(|w| w[1] >= w[0]),
            z_strictly_increasing: zs.windows(2).all(|w| w[1] > w[0]),
            accuracy_drop_pp: summary_rows
                .iter()
                .map(|r| base.map_or(f64::NAN, |b| 100.0 * (b - r.accuracy_mean)))
                .collect(),
            rows: summary_rows,
        };
        std::fs::write(self.out("fidelity_summary.toml"), toml::to_string(&summary).expect("serializes"))?;
        self.write_manifest()?;
        Ok(summary)
    }

    pub fn scalability_rows(&self, k_values: &[usize], seeds: &[u64]) -> Result<Vec<ScalabilityRow>> {
        let mut rows = Vec::new();
        for &k in k_values {
            for &s in seeds {
                let thr = self.run(Method::Threshold, s, k, self.config.protocol.c)?;
                let rep = self.final_report(&thr)?;
                rows.push(ScalabilityRow {
                    k,
                    t: thr.protocol.t,
                    method: Method::Threshold.name().into(),
                    seed: s,
                    accuracy: thr.final_accuracy,
                    z: rep.z,
                    best_client: None,
                    config_hash: self.hash.clone(),
                });
                let base = self.run(Method::Baseline, s, k, self.config.scalability.baseline_c)?;
                let keys = base.baseline_keys.as_ref().expect("baseline run keeps its keys");
                let (client, rep) = self.verify_baseline(keys, &base.output.final_model().theta)?;
                rows.push(ScalabilityRow {
                    k,
                    t: 1,
                    method: Method::Baseline.name().into(),
                    seed: s,
                    accuracy: base.final_accuracy,
                    z: rep.z,
                    best_client: Some(client),
                    config_hash: self.hash.clone(),
                });
            }
        }
        rows.sort_by(|a, b| (a.k, a.method.as_str(), a.seed).cmp(&(b.k, b.method.as_str(), b.seed)));
        Ok(rows)
    }

    pub fn scalability_summary(&self, rows: &[ScalabilityRow]) -> ScalabilitySummary {
        let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
        ks.sort_unstable();
        ks.dedup();
        let points: Vec<ScalabilityPoint> = ks
            .iter()
            .map(|&k| {
                let z_of = |m: &str| rows.iter().filter(|r| r.k == k && r.method == m).map(|r| r.z).collect::<Vec<_>>();
                let (tm, ts) = mean_std(&z_of("threshold"));
                let (bm, _) = mean_std(&z_of("baseline"));
                ScalabilityPoint {
                    k,
                    threshold_z_mean: tm,
                    threshold_z_cv: ts / tm.abs(),
                    baseline_z_mean: bm,
                }
            })
            .collect();
        let fit: Vec<(f64, f64)> = points.iter().map(|p| (p.k as f64, p.baseline_z_mean)).collect();
        ScalabilitySummary {
            config_hash: self.hash.clone(),
            baseline_exponent: loglog_slope(&fit),
            threshold_detects_everywhere: rows
                .iter()
                .filter(|r| r.method == "threshold")
                .all(|r| r.z >= self.config.z_star),
            points,
        }
    }

    pub fn cmd_scalability(&self) -> Result<ScalabilitySummary> {
        let rows = self.scalability_rows(&self.config.scalability.k_values, &self.config.seeds)?;
        write_csv(&self.out("scalability.csv"), &rows)?;
        let summary = self.scalability_summary(&rows);
        std::fs::write(self.out("scalability_summary.toml"), toml::to_string(&summary).expect("serializes"))?;
        self.write_manifest()?;
        Ok(summary)
    }

    /// Runs one attack on a model and verifies every resulting checkpoint via the coalition path.
    pub fn attack_records(
        &self,
        setup: &SetupResult,
        theta: &[f64],
        attack: &AttackConfig,
        seed_: u64,
        trajectory: &[protocol::GlobalModel],
        participants: &[usize],
    ) -> Result<Vec<AttackRecord>> {
        attack.validate()?;
        let shape = self.shape();
        let ds = self.dataset(seed_, self.config.protocol.k)?;
        let n_train = ds.train_len();
        let subset = |p: f64| attacks::attacker_subset(&ds.aux, p, n_train, seed_);
        let attack_seed = seed_.wrapping_add(0x5eed);
        let checkpoints: Vec<Vec<f64>> = match *attack {
            AttackConfig::Finetune { fraction, epochs } => {
                attacks::attack_finetune(&shape, theta, &subset(fraction)?, epochs, attack_seed)?
            }
            AttackConfig::AdaptiveFinetune { fraction, epochs, alpha, insider } => {
                let key = if insider {
                    let mut trainer = MlpTrainer::new(shape, &ds.shards, None, seed_);
                    trainer.train.optimizer = self.config.optimizer;
                    attacks::estimate_key_insider(trajectory, participants, &trainer, 1)?
                } else {
                    attacks::estimate_key(trajectory)?
                };
                attacks::attack_adaptive_finetune(&shape, theta, &subset(fraction)?, epochs, alpha, Some(&key), attack_seed)?
            }
            AttackConfig::PruneMagnitude { ratio } => vec![attacks::prune_magnitude(&shape, theta, ratio)?],
            AttackConfig::PruneStructured { ratio } => vec![attacks::prune_structured(&shape, theta, ratio)?],
            AttackConfig::Quantize { scheme } => vec![attacks::attack_quantize(&shape, theta, scheme)?],
            AttackConfig::Distill { fraction, epochs, temperature, alpha } => {
                let cfg = DistillConfig { temperature, alpha, epochs, ..DistillConfig::default() };
                vec![attacks::attack_distill(&shape, theta, &subset(fraction)?, &cfg, attack_seed)?]
            }
        };
        let reports = par::map(&checkpoints, |cp| self.verify_threshold(setup, cp));
        let mut out = Vec::with_capacity(checkpoints.len());
        for (step, (cp, rep)) in checkpoints.iter().zip(reports).enumerate() {
            let rep = rep?;
            out.push(AttackRecord {
                run_id: format!("{}-seed{seed_}", self.config.name),
                attack: attack.kind().into(),
                params: attack.params(),
                step,
                accuracy: flsim::evaluate(&shape, cp, &ds.test),
                z: rep.z,
                decision: rep.decision().into(),
                config_hash: self.hash.clone(),
            });
        }
        Ok(out)
    }

    /// Attacks the watermarked run of `seed_` with every listed attack.
    pub fn attack_run(&self, seed_: u64, grid: &[AttackConfig]) -> Result<Vec<AttackRecord>> {
        let k = self.config.protocol.k;
        let art = self.run(Method::Threshold, seed_, k, self.config.protocol.c)?;
        let setup = art.setup.as_ref().expect("threshold run has a setup");
        let theta = &art.output.final_model().theta;
        let participants: Vec<usize> = art.output.metrics.iter().map(|m| m.participants).collect();
        self.calibration()?;
        let jobs = par::map(grid, |a| {
            self.attack_records(setup, theta, a, seed_, &art.output.trajectory, &participants)
        });
        let mut rows = Vec::new();
        for j in jobs {
            rows.extend(j?);
        }
        rows.sort_by(|a, b| {
            (a.run_id.as_str(), a.attack.as_str(), a.params.as_str(), a.step)
                .cmp(&(b.run_id.as_str(), b.attack.as_str(), b.params.as_str(), b.step))
        });
        Ok(rows)
    }

    pub fn cmd_attack(&self, seed_: u64, attack: &AttackConfig) -> Result<Vec<AttackRecord>> {
        let rows = self.attack_run(seed_, std::slice::from_ref(attack))?;
        write_csv(&self.out(&format!("attack_{}_seed{seed_}.csv", attack.kind())), &rows)?;
        self.write_manifest()?;
        Ok(rows)
    }

    pub fn cmd_robustness(&self) -> Result<RobustnessSummary> {
        let mut rows = Vec::new();
        let mut original = Vec::new();
        for &s in &self.config.robustness.seeds {
            let art = self.run(Method::Threshold, s, self.config.protocol.k, self.config.protocol.c)?;
            let rep = self.final_report(&art)?;
            original.push((s, art.final_accuracy, rep.z));
            rows.extend(self.attack_run(s, &self.config.robustness.attacks)?);
        }
        write_csv(&self.out("robustness.csv"), &rows)?;
        let budgets: Vec<f64> = {
            let mut b: Vec<f64> = self.config.robustness.attacks.iter().filter_map(|a| a.data_fraction()).collect();
            b.sort_by(f64::total_cmp);
            b.dedup();
            b
        };
        let data_free = |r: &AttackRecord| !r.params.starts_with("p=");
        let budget_of = |r: &AttackRecord| -> Option<f64> {
            r.params.strip_prefix("p=")?.split(';').next()?.parse().ok()
        };
        let mut frontiers = Vec::new();
        for &p in &budgets {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| data_free(r) || budget_of(r) == Some(p))
                .map(|r| (r.accuracy, r.z))
                .collect();
            frontiers.push(Frontier {
                budget: format!("p={p}"),
                points: attacks::pareto_frontier(&pts),
            });
        }
        let data_free_pts: Vec<(f64, f64)> = rows.iter().filter(|r| data_free(r)).map(|r| (r.accuracy, r.z)).collect();
        if !data_free_pts.is_empty() {
            frontiers.push(Frontier {
                budget: "data-free".into(),
                points: attacks::pareto_frontier(&data_free_pts),
            });
        }
        let summary = RobustnessSummary {
            config_hash: self.hash.clone(),
            z_threshold: self.config.z_star,
            original,
            frontiers,
        };
        std::fs::write(self.out("robustness_summary.toml"), toml::to_string(&summary).expect("serializes"))?;
        self.write_manifest()?;
        Ok(summary)
    }
}

/// Loads a model checkpoint, key files and a calibration table and runs the coalition test.
pub fn cmd_verify(
    model: &Path,
    key_files: &[PathBuf],
    calibration: &Path,
    arch: &MlpShape,
    z_star: f64,
    check_commitment: bool,
) -> Result<VerificationReport> {
    let theta = protocol::GlobalModel::read_from(model)?.theta;
    let calib = CalibrationTable::read_from(calibration)?;
    let keys = key_files
        .iter()
        .map(|p| KeyFile::read_from(p))
        .collect::<Result<Vec<_>, _>>()?;
    let first = keys
        .first()
        .ok_or(VerifyError::BelowThreshold { have: 0, need: 1 })?;
    if keys.iter().any(|k| k.config != first.config || k.public_norm != first.public_norm) {
        return Err(VerifyError::InvalidInput("key files come from different setups".into()).into());
    }
    let precision = Precision {
        modulus: first.config.params(),
        f_share: first.f_share,
        ..Precision::default()
    };
    let fp = Fingerprint {
        arch: arch.fingerprint(),
        d: arch.d(),
    };
    if theta.len() != fp.d {
        return Err(VerifyError::FingerprintMismatch {
            expected: fp.to_string(),
            found: format!("d = {}", theta.len()),
        }
        .into());
    }
    let ctx = VerifyContext {
        config: &first.config,
        precision: &precision,
        public_norm: first.public_norm,
        calib: &calib,
        fingerprint: &fp,
        z_star,
        session_seed: seed::derive_key(0, "verify-session", &[]),
    };
    let shares: Vec<&ShamirShare> = keys.iter().map(|k| &k.share).collect();
    let mut report = verify::verify_coalition(&shares, &theta, &ctx)?;
    if check_commitment {
        let c = first
            .commitment
            .ok_or_else(|| VerifyError::InvalidInput("setup published no commitment".into()))?;
        let owned: Vec<ShamirShare> = keys.iter().map(|k| k.share.clone()).collect();
        report.commitment_ok = Some(verify::commitment_check(
            &owned,
            &first.config,
            &c,
            first.f_share as u16,
            first.public_norm,
        )?);
    }
    Ok(report)
}

/// Collects whichever summaries exist in `dir` into one text report.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let mut out = String::new();
    for name in [
        "manifest.toml",
        "calibration.toml",
        "fidelity_summary.toml",
        "scalability_summary.toml",
        "robustness_summary.toml",
    ] {
        let path = dir.join(name);
        if let Ok(text) = std::fs::read_to_string(&path) {
            let _ = writeln!(out, "## {name}\n\n{text}");
        }
    }
    if out.is_empty() {
        return Err(ExperimentError::InvalidConfig(format!("no summaries found in {}", dir.display())));
    }
    std::fs::write(dir.join("report.txt"), &out)?;
    Ok(out)
}
