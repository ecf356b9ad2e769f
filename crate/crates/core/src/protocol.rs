//! Per-round embedding protocol: local training, update-norm tracking,
//! aggregated watermark scale, share-embedded submissions and the server's
//! averaged global update.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::field::{check_aggregate_bound, BoundReport, FieldError, FieldVector, Precision};
use crate::flsim::{self, FlError, MlpShape, OptimizerConfig, Samples, TrainConfig};
use crate::par;
use crate::secagg::{LogLevel, ObservationLog, SecAggError, SecAggSession};
use crate::seed;
use crate::setup::SetupResult;
use crate::sharing::{self, SharingError};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid protocol configuration: {0}")]
    InvalidConfig(String),
    #[error("aggregate bound violated in round {round}: {detail}")]
    BoundViolation { round: u64, detail: String },
    #[error("client {client} in round {round}: {source}")]
    Training {
        client: u64,
        round: u64,
        #[source]
        source: FlError,
    },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    SecAgg(#[from] SecAggError),
    #[error("checkpoint file: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub const DEFAULT_BETA: f64 = 0.9;

pub fn ema_update(ema: f64, delta_norm: f64, beta: f64) -> f64 {
    beta * ema + (1.0 - beta) * delta_norm
}

pub fn client_scale(delta_norm: f64, ema: f64, c: f64) -> f64 {
    c * delta_norm * ema
}

/// Which clients take part in each round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Participation {
    #[default]
    Full,
    /// `count` clients drawn uniformly per round from the master seed.
    Sample { count: usize },
    /// Explicit per-round sets, cycled when shorter than the run.
    Schedule { rounds: Vec<Vec<u64>> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundPlan {
    pub round: u64,
    /// Sorted client ids.
    pub participants: Vec<u64>,
    pub embed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub k: usize,
    pub t: usize,
    pub rounds: u64,
    pub c: f64,
    pub beta: f64,
    pub scale_max: f64,
    pub theta_max: f64,
    pub participation: Participation,
    pub seed: u64,
    pub log_level: LogLevel,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            k: 32,
            t: 16,
            rounds: 100,
            c: 0.025,
            beta: DEFAULT_BETA,
            scale_max: 1024.0,
            theta_max: 16.0,
            participation: Participation::Full,
            seed: 0,
            log_level: LogLevel::Off,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidConfig(m));
        if self.k == 0 || self.t == 0 || self.t > self.k {
            return bad(format!("need 1 <= t <= K, got t = {}, K = {}", self.t, self.k));
        }
        if self.rounds == 0 {
            return bad("at least one round is required".into());
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta = {} outside [0, 1)", self.beta));
        }
        if !(self.c >= 0.0 && self.scale_max >= 0.0 && self.theta_max > 0.0) {
            return bad("c, scale_max and theta_max must be non-negative".into());
        }
        match &self.participation {
            Participation::Full => {}
            Participation::Sample { count } => {
                if *count == 0 || *count > self.k {
                    return bad(format!("cannot sample {count} of {} clients", self.k));
                }
            }
            Participation::Schedule { rounds } => {
                if rounds.is_empty() {
                    return bad("empty participation schedule".into());
                }
                for set in rounds {
                    if set.iter().any(|&c| c == 0 || c > self.k as u64) {
                        return bad(format!("schedule names a client outside 1..={}", self.k));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn plan(&self, round: u64) -> RoundPlan {
        let mut participants: Vec<u64> = match &self.participation {
            Participation::Full => (1..=self.k as u64).collect(),
            Participation::Sample { count } => {
                let mut rng = seed::stream(self.seed, "participation", &[round]);
                index::sample(&mut rng, self.k, *count)
                    .into_iter()
                    .map(|i| i as u64 + 1)
                    .collect()
            }
            Participation::Schedule { rounds } => {
                rounds[((round - 1) % rounds.len() as u64) as usize].clone()
            }
        };
        participants.sort_unstable();
        participants.dedup();
        let embed = participants.len() >= self.t;
        RoundPlan {
            round,
            participants,
            embed,
        }
    }
}

/// Global parameters after round `round` (round 0 is the initial model).
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub round: u64,
    pub theta: Vec<f64>,
}

const CKPT_MAGIC: &[u8; 8] = b"TWMCKPT1";

impl GlobalModel {
    /// Magic, round u64, d u64, then `d` little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.theta.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.theta.len() as u64).to_le_bytes());
        for v in &self.theta {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let bad = |m: &str| ProtocolError::Checkpoint(m.to_string());
        if bytes.len() < 24 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("bad header"));
        }
        let round = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        if bytes.len() != 24 + 8 * d {
            return Err(bad("length does not match header"));
        }
        let theta = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { round, theta })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), ProtocolError> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, ProtocolError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// SHA-256 over the concatenated checkpoint encodings.
pub fn trajectory_digest(trajectory: &[GlobalModel]) -> [u8; 32] {
    let mut h = Sha256::new();
    for g in trajectory {
        h.update(g.to_bytes());
    }
    h.finalize().into()
}

/// Produces client `k`'s local model for a round.
pub trait LocalTrainer: Sync {
    /// Returns the trained parameters and the mean training loss.
    fn train(&self, client: u64, round: u64, theta: &[f64]) -> Result<(Vec<f64>, f64), FlError>;

    /// Test accuracy of a global model, if the trainer has a test set.
    fn evaluate(&self, _theta: &[f64]) -> Option<f64> {
        None
    }
}

/// AdamW training of the MLP on each client's shard.
pub struct MlpTrainer<'a> {
    pub shape: MlpShape,
    /// `shards[k - 1]` belongs to client `k`.
    pub shards: &'a [Samples],
    pub test: Option<&'a Samples>,
    pub train: TrainConfig,
    pub seed: u64,
}

/// Global batch size split evenly across clients.
pub const GLOBAL_BATCH: usize = 2048;

impl<'a> MlpTrainer<'a> {
    pub fn new(shape: MlpShape, shards: &'a [Samples], test: Option<&'a Samples>, seed: u64) -> Self {
        Self {
            shape,
            shards,
            test,
            train: TrainConfig {
                optimizer: OptimizerConfig::default(),
                batch_size: (GLOBAL_BATCH / shards.len().max(1)).max(1),
                epochs: 1,
            },
            seed,
        }
    }
}

impl LocalTrainer for MlpTrainer<'_> {
    fn train(&self, client: u64, round: u64, theta: &[f64]) -> Result<(Vec<f64>, f64), FlError> {
        let shard = self
            .shards
            .get((client as usize).wrapping_sub(1))
            .ok_or_else(|| FlError::InvalidConfig(format!("no shard for client {client}")))?;
        let mut rng = seed::stream(self.seed, "local-train", &[client, round]);
        let mut out = theta.to_vec();
        let loss = flsim::local_train(&self.shape, &mut out, shard, &self.train, &mut rng)?;
        Ok((out, loss))
    }

    fn evaluate(&self, theta: &[f64]) -> Option<f64> {
        self.test.map(|t| flsim::evaluate(&self.shape, theta, t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: u64,
    pub ema: f64,
    pub rounds_participated: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub participants: usize,
    pub embedded: bool,
    pub scale_total: f64,
    /// The public integer `round(scale_total * 2^g)`.
    pub scale_int: i64,
    pub mean_train_loss: f64,
    pub test_accuracy: Option<f64>,
}

/// How submissions carry the watermark.
#[derive(Clone, Copy)]
pub enum Embedding<'a> {
    /// Plain FedAvg through the same field pipeline.
    None,
    /// Shamir-shared key; `w_k = lambda_k s_k`.
    Threshold(&'a SetupResult),
    /// Independent per-client keys `tau_k`, indexed by `k - 1`.
    Baseline(&'a [Vec<f64>]),
}

#[derive(Debug)]
pub struct RunOutput {
    pub trajectory: Vec<GlobalModel>,
    pub metrics: Vec<RoundMetrics>,
    pub clients: Vec<ClientState>,
    pub bound: BoundReport,
    /// SecAgg observation logs per round (empty when logging is off).
    pub logs: Vec<ObservationLog>,
}

impl RunOutput {
    pub fn final_model(&self) -> &GlobalModel {
        self.trajectory.last().expect("trajectory holds at least theta_0")
    }
}

pub fn initial_model(shape: &MlpShape, seed: u64) -> Vec<f64> {
    shape.init(&mut seed::stream(seed, "model-init", &[]))
}

/// One protocol round. Updates client EMA trackers in place.
pub fn embed_round(
    cfg: &ProtocolConfig,
    precision: &Precision,
    embedding: Embedding<'_>,
    global: &GlobalModel,
    clients: &mut [ClientState],
    plan: &RoundPlan,
    trainer: &dyn LocalTrainer,
) -> Result<(GlobalModel, RoundMetrics, ObservationLog), ProtocolError> {
    let round = plan.round;
    let d = global.theta.len();
    let n = plan.participants.len();
    if n == 0 {
        let metrics = RoundMetrics {
            round,
            participants: 0,
            embedded: false,
            scale_total: 0.0,
            scale_int: 0,
            mean_train_loss: f64::NAN,
            test_accuracy: trainer.evaluate(&global.theta),
        };
        let next = GlobalModel {
            round,
            theta: global.theta.clone(),
        };
        return Ok((next, metrics, ObservationLog::default()));
    }
    let params = precision.modulus;

    let trained = par::map(&plan.participants, |&k| trainer.train(k, round, &global.theta));
    let mut locals = Vec::with_capacity(n);
    let mut loss_sum = 0.0;
    for (&k, r) in plan.participants.iter().zip(trained) {
        let (theta_k, loss) = r.map_err(|source| ProtocolError::Training {
            client: k,
            round,
            source,
        })?;
        let peak = flsim::max_abs(&theta_k);
        if !(peak <= cfg.theta_max) {
            return Err(ProtocolError::BoundViolation {
                round,
                detail: format!("client {k} parameter magnitude {peak:.3e} exceeds theta_max {}", cfg.theta_max),
            });
        }
        loss_sum += loss;
        locals.push(theta_k);
    }

    // Update-norm tracking and per-client scales.
    let scale_codec = precision.scale_codec();
    let mut scale_inputs = Vec::with_capacity(n);
    for (&k, theta_k) in plan.participants.iter().zip(&locals) {
        let state = clients
            .iter_mut()
            .find(|c| c.id == k)
            .ok_or_else(|| ProtocolError::InvalidConfig(format!("unknown client {k}")))?;
        let delta_norm = theta_k
            .iter()
            .zip(&global.theta)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        state.ema = ema_update(state.ema, delta_norm, cfg.beta);
        state.rounds_participated += 1;
        let scale = client_scale(delta_norm, state.ema, cfg.c);
        scale_inputs.push((k, scale_codec.encode_scalar(scale)?));
    }

    let session_key = seed::derive_key(cfg.seed, "secagg-scale", &[round]);
    let mut session = SecAggSession::new(round, session_key, &plan.participants, 1, params)?
        .with_log_level(LogLevel::Off);
    let scale_total = scale_codec
        .decode_scalar(session.sum_scalar(&scale_inputs)?)
        .clamp(0.0, cfg.scale_max);
    let scale_int = scale_codec.quantize(scale_total).ok_or_else(|| ProtocolError::BoundViolation {
        round,
        detail: format!("scale {scale_total} does not fit the scale codec"),
    })?;
    let s_elem = params.from_i64(scale_int);

    let model_codec = precision.model_codec();
    let share_codec = precision.share_codec();
    let embedded = plan.embed && !matches!(embedding, Embedding::None);
    let lagrange = match embedding {
        Embedding::Threshold(setup) if plan.embed => {
            Some(sharing::participant_lagrange(&plan.participants, &setup.config)?)
        }
        _ => None,
    };
    let submissions = par::map_indexed(n, |i| -> Result<(u64, FieldVector), ProtocolError> {
        let k = plan.participants[i];
        let mut u = model_codec.encode(&locals[i])?;
        if embedded {
            match embedding {
                Embedding::Threshold(setup) => {
                    let share = setup
                        .share_of(k)
                        .ok_or(SharingError::UnknownPoint(k))?;
                    let w = sharing::derive_with(share, lagrange.as_ref().expect("set when embedding"))?;
                    u.add_scaled(s_elem, &w.w)?;
                }
                Embedding::Baseline(keys) => {
                    let key = &keys[(k - 1) as usize];
                    let inv = (n as f64).recip();
                    let scaled: Vec<f64> = key.iter().map(|v| v * inv).collect();
                    u.add_scaled(s_elem, &share_codec.encode(&scaled)?)?;
                }
                Embedding::None => {}
            }
        }
        Ok((k, u))
    });
    let submissions = submissions.into_iter().collect::<Result<Vec<_>, _>>()?;

    let session_key = seed::derive_key(cfg.seed, "secagg-model", &[round]);
    let mut session = SecAggSession::new(round, session_key, &plan.participants, d, params)?
        .with_log_level(cfg.log_level);
    let total = session.sum(&submissions)?;
    let inv = (n as f64).recip();
    let theta: Vec<f64> = model_codec
        .decode_centered(&total)
        .into_iter()
        .map(|v| v * inv)
        .collect();

    let metrics = RoundMetrics {
        round,
        participants: n,
        embedded,
        scale_total,
        scale_int,
        mean_train_loss: loss_sum / n as f64,
        test_accuracy: trainer.evaluate(&theta),
    };
    Ok((GlobalModel { round, theta }, metrics, session.into_log()))
}

fn run(
    cfg: &ProtocolConfig,
    precision: &Precision,
    embedding: Embedding<'_>,
    theta0: Vec<f64>,
    trainer: &dyn LocalTrainer,
) -> Result<RunOutput, ProtocolError> {
    cfg.validate()?;
    let d = theta0.len();
    match embedding {
        Embedding::Threshold(setup) => {
            if setup.d != d || setup.config.k() != cfg.k || setup.config.t() != cfg.t {
                return Err(ProtocolError::InvalidConfig(format!(
                    "setup is for K = {}, t = {}, d = {}; run has K = {}, t = {}, d = {d}",
                    setup.config.k(),
                    setup.config.t(),
                    setup.d,
                    cfg.k,
                    cfg.t
                )));
            }
            if setup.precision != *precision {
                return Err(ProtocolError::InvalidConfig("setup precision differs from run precision".into()));
            }
        }
        Embedding::Baseline(keys) => {
            if keys.len() != cfg.k || keys.iter().any(|k| k.len() != d) {
                return Err(ProtocolError::InvalidConfig("need one length-d key per client".into()));
            }
        }
        Embedding::None => {}
    }
    let bound = check_aggregate_bound(d, cfg.k, cfg.theta_max, cfg.scale_max, precision).map_err(|e| {
        ProtocolError::BoundViolation {
            round: 0,
            detail: e.to_string(),
        }
    })?;
    let mut clients: Vec<ClientState> = (1..=cfg.k as u64)
        .map(|id| ClientState {
            id,
            ema: 0.0,
            rounds_participated: 0,
        })
        .collect();
    let mut trajectory = vec![GlobalModel {
        round: 0,
        theta: theta0,
    }];
    let mut metrics = Vec::with_capacity(cfg.rounds as usize);
    let mut logs = Vec::new();
    for r in 1..=cfg.rounds {
        let plan = cfg.plan(r);
        let prev = trajectory.last().expect("non-empty");
        let (next, m, log) = embed_round(cfg, precision, embedding, prev, &mut clients, &plan, trainer)?;
        log::debug!(
            "round {r}: |S| = {}, scale {:.4}, loss {:.4}, acc {:?}",
            m.participants,
            m.scale_total,
            m.mean_train_loss,
            m.test_accuracy
        );
        if cfg.log_level != LogLevel::Off {
            logs.push(log);
        }
        trajectory.push(next);
        metrics.push(m);
    }
    Ok(RunOutput {
        trajectory,
        metrics,
        clients,
        bound,
        logs,
    })
}

/// Threshold watermarking over `cfg.rounds` rounds, starting from `theta0`.
pub fn run_protocol(
    cfg: &ProtocolConfig,
    setup: &SetupResult,
    theta0: Vec<f64>,
    trainer: &dyn LocalTrainer,
) -> Result<RunOutput, ProtocolError> {
    run(cfg, &setup.precision, Embedding::Threshold(setup), theta0, trainer)
}

/// Per-client-key baseline under the same update rule and scaling.
pub fn run_baseline(
    cfg: &ProtocolConfig,
    precision: &Precision,
    keys: &[Vec<f64>],
    theta0: Vec<f64>,
    trainer: &dyn LocalTrainer,
) -> Result<RunOutput, ProtocolError> {
    run(cfg, precision, Embedding::Baseline(keys), theta0, trainer)
}

/// Watermark-free FedAvg through the same fixed-point pipeline.
pub fn run_fedavg(
    cfg: &ProtocolConfig,
    precision: &Precision,
    theta0: Vec<f64>,
    trainer: &dyn LocalTrainer,
) -> Result<RunOutput, ProtocolError> {
    run(cfg, precision, Embedding::None, theta0, trainer)
}

/// Independent `N(0, I_d)` keys for the baseline, clipped like the dealer's key.
pub fn baseline_keys(k: usize, d: usize, tau_bound: f64, seed: u64) -> Vec<Vec<f64>> {
    par::map_indexed(k, |i| {
        let mut rng = seed::stream(seed, "baseline-key", &[i as u64 + 1]);
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z.clamp(-tau_bound, tau_bound)
            })
            .collect()
    })
}

/// Writes `round_XXXX.ckpt` for every checkpoint into `dir`.
pub fn write_trajectory(dir: &Path, trajectory: &[GlobalModel]) -> Result<(), ProtocolError> {
    std::fs::create_dir_all(dir)?;
    for g in trajectory {
        g.write_to(&dir.join(format!("round_{:04}.ckpt", g.round)))?;
    }
    Ok(())
}

pub fn read_trajectory(dir: &Path) -> Result<Vec<GlobalModel>, ProtocolError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    paths.sort();
    paths.iter().map(|p| GlobalModel::read_from(p)).collect()
}
