//! Post-training watermark removal attacks.
//!
//! Every attack is a pure function of its inputs and an explicit seed.
//! Attacker data comes from the auxiliary split, sized as a fraction of the
//! federated training-set size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flsim::{
    self, cross_entropy, softmax_into, FlError, MlpShape, OptimizerConfig, Samples, TrainConfig,
};
use crate::protocol::{GlobalModel, LocalTrainer, ProtocolError};
use crate::seed;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error("trajectory displacement is zero; no key direction to estimate")]
    DegenerateTrajectory,
    #[error(transparent)]
    Training(#[from] FlError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub const DATA_FRACTIONS: [f64; 4] = [0.01, 0.05, 0.10, 0.20];
pub const PRUNE_RATIOS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];
pub const ADAPTIVE_ALPHAS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];
pub const ATTACK_BATCH: usize = 128;
pub const ATTACK_EPOCHS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    /// Per-tensor symmetric 8-bit.
    Static8,
    /// Per-tensor symmetric 4-bit.
    Static4,
    /// Per-output-channel symmetric 8-bit.
    Dynamic8,
}

impl QuantScheme {
    pub fn levels(self) -> f64 {
        match self {
            QuantScheme::Static8 | QuantScheme::Dynamic8 => 127.0,
            QuantScheme::Static4 => 7.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantScheme::Static8 => "static8",
            QuantScheme::Static4 => "static4",
            QuantScheme::Dynamic8 => "dynamic8",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    Magnitude,
    Structured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackConfig {
    Finetune {
        fraction: f64,
        epochs: usize,
    },
    AdaptiveFinetune {
        fraction: f64,
        epochs: usize,
        alpha: f64,
        #[serde(default)]
        insider: bool,
    },
    PruneMagnitude {
        ratio: f64,
    },
    PruneStructured {
        ratio: f64,
    },
    Quantize {
        scheme: QuantScheme,
    },
    Distill {
        fraction: f64,
        epochs: usize,
        temperature: f64,
        alpha: f64,
    },
}

impl AttackConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            AttackConfig::Finetune { .. } => "finetune",
            AttackConfig::AdaptiveFinetune { .. } => "adaptive_finetune",
            AttackConfig::PruneMagnitude { .. } => "prune_magnitude",
            AttackConfig::PruneStructured { .. } => "prune_structured",
            AttackConfig::Quantize { .. } => "quantize",
            AttackConfig::Distill { .. } => "distill",
        }
    }

    /// Semicolon-separated parameter string for the long CSV.
    pub fn params(&self) -> String {
        match self {
            AttackConfig::Finetune { fraction, epochs } => format!("p={fraction};epochs={epochs}"),
            AttackConfig::AdaptiveFinetune { fraction, epochs, alpha, insider } => {
                format!("p={fraction};epochs={epochs};alpha={alpha};insider={insider}")
            }
            AttackConfig::PruneMagnitude { ratio } | AttackConfig::PruneStructured { ratio } => {
                format!("ratio={ratio}")
            }
            AttackConfig::Quantize { scheme } => format!("scheme={}", scheme.name()),
            AttackConfig::Distill { fraction, epochs, temperature, alpha } => {
                format!("p={fraction};epochs={epochs};T={temperature};alpha={alpha}")
            }
        }
    }

    pub fn data_fraction(&self) -> Option<f64> {
        match self {
            AttackConfig::Finetune { fraction, .. }
            | AttackConfig::AdaptiveFinetune { fraction, .. }
            | AttackConfig::Distill { fraction, .. } => Some(*fraction),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: String| Err(AttackError::InvalidConfig(m));
        if let Some(p) = self.data_fraction() {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("data fraction {p} outside (0, 1]"));
            }
        }
        match *self {
            AttackConfig::AdaptiveFinetune { alpha, .. } if !(0.0..=1.0).contains(&alpha) => {
                bad(format!("alpha {alpha} outside [0, 1]"))
            }
            AttackConfig::Distill { alpha, temperature, .. } => {
                if !(0.0..=1.0).contains(&alpha) {
                    bad(format!("alpha {alpha} outside [0, 1]"))
                } else if !(temperature > 0.0) {
                    bad(format!("temperature {temperature} must be positive"))
                } else {
                    Ok(())
                }
            }
            AttackConfig::PruneMagnitude { ratio } | AttackConfig::PruneStructured { ratio }
                if !(0.0..1.0).contains(&ratio) =>
            {
                bad(format!("pruning ratio {ratio} outside [0, 1)"))
            }
            _ => Ok(()),
        }
    }

    /// The default grid: every kind at every listed budget.
    pub fn default_grid() -> Vec<AttackConfig> {
        let mut grid = Vec::new();
        for &fraction in &DATA_FRACTIONS {
            grid.push(AttackConfig::Finetune { fraction, epochs: ATTACK_EPOCHS });
            for &alpha in &ADAPTIVE_ALPHAS {
                grid.push(AttackConfig::AdaptiveFinetune {
                    fraction,
                    epochs: ATTACK_EPOCHS,
                    alpha,
                    insider: false,
                });
            }
            grid.push(AttackConfig::Distill {
                fraction,
                epochs: ATTACK_EPOCHS,
                temperature: 3.0,
                alpha: 0.5,
            });
        }
        for &ratio in &PRUNE_RATIOS {
            grid.push(AttackConfig::PruneMagnitude { ratio });
            grid.push(AttackConfig::PruneStructured { ratio });
        }
        for scheme in [QuantScheme::Static8, QuantScheme::Static4, QuantScheme::Dynamic8] {
            grid.push(AttackConfig::Quantize { scheme });
        }
        grid
    }
}

/// Uniform attacker subset of `round(fraction * reference_len)` auxiliary samples.
pub fn attacker_subset(
    aux: &Samples,
    fraction: f64,
    reference_len: usize,
    seed_: u64,
) -> Result<Samples, AttackError> {
    let count = (fraction * reference_len as f64).round() as usize;
    let mut rng = seed::stream(seed_, "attack-subset", &[fraction.to_bits()]);
    aux.sample_fraction(count, &mut rng).map_err(|e| match e {
        FlError::InvalidConfig(m) => AttackError::InvalidConfig(m),
        other => other.into(),
    })
}

fn finetune_config() -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig::default(),
        batch_size: ATTACK_BATCH,
        epochs: 0,
    }
}

/// Plain fine-tuning. Returns the initial model followed by one checkpoint per epoch.
pub fn attack_finetune(
    shape: &MlpShape,
    theta: &[f64],
    subset: &Samples,
    epochs: usize,
    seed_: u64,
) -> Result<Vec<Vec<f64>>, AttackError> {
    attack_adaptive_finetune(shape, theta, subset, epochs, 0.0, None, seed_)
}

/// Fine-tuning against `(1 - alpha) * CE + alpha * |<theta, tau'>|`.
/// With `alpha = 0` this is exactly [`attack_finetune`].
pub fn attack_adaptive_finetune(
    shape: &MlpShape,
    theta: &[f64],
    subset: &Samples,
    epochs: usize,
    alpha: f64,
    key: Option<&EstimatedKey>,
    seed_: u64,
) -> Result<Vec<Vec<f64>>, AttackError> {
    if subset.is_empty() {
        return Err(AttackError::InvalidConfig("empty attacker subset".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AttackError::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    let penalty = match (alpha > 0.0, key) {
        (false, _) => None,
        (true, Some(k)) => Some(&k.direction),
        (true, None) => return Err(AttackError::InvalidConfig("adaptive attack needs a key estimate".into())),
    };
    let mut checkpoints = vec![theta.to_vec()];
    if epochs == 0 {
        return Ok(checkpoints);
    }
    let cfg = TrainConfig { epochs, ..finetune_config() };
    let mut model = theta.to_vec();
    let mut rng = seed::stream(seed_, "attack-finetune", &[]);
    flsim::train_epochs(
        &mut model,
        subset,
        &cfg,
        &mut rng,
        |_, th| checkpoints.push(th.to_vec()),
        |th, batch, grad| {
            let task = flsim::backprop(shape, th, subset, batch, grad, |i, z, dz| {
                cross_entropy(z, subset.y[i], dz)
            });
            match penalty {
                None => task,
                Some(dir) => {
                    let inner: f64 = th.iter().zip(dir).map(|(a, b)| a * b).sum();
                    let sign = inner.signum();
                    for (g, &u) in grad.iter_mut().zip(dir.iter()) {
                        *g = (1.0 - alpha) * *g + alpha * sign * u;
                    }
                    (1.0 - alpha) * task + alpha * inner.abs()
                }
            }
        },
    )?;
    Ok(checkpoints)
}

/// Unit-norm guess of the key direction.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatedKey {
    pub direction: Vec<f64>,
}

fn normalized(v: Vec<f64>) -> Result<EstimatedKey, AttackError> {
    let n = flsim::l2_norm(&v);
    if n == 0.0 || !n.is_finite() {
        return Err(AttackError::DegenerateTrajectory);
    }
    Ok(EstimatedKey {
        direction: v.into_iter().map(|x| x / n).collect(),
    })
}

/// `(theta_T - theta_0) / ||theta_T - theta_0||`.
pub fn estimate_key(trajectory: &[GlobalModel]) -> Result<EstimatedKey, AttackError> {
    if trajectory.len() < 2 {
        return Err(AttackError::InvalidConfig("need at least two checkpoints".into()));
    }
    let first = &trajectory[0].theta;
    let last = &trajectory[trajectory.len() - 1].theta;
    normalized(last.iter().zip(first).map(|(a, b)| a - b).collect())
}

/// Insider variant: removes the attacker client's own share of the global
/// displacement, `sum_r (theta_r^(k) - theta_{r-1}) / |S_r|`, before normalizing.
/// Local models are recomputed with the client's deterministic trainer.
pub fn estimate_key_insider(
    trajectory: &[GlobalModel],
    participants_per_round: &[usize],
    trainer: &dyn LocalTrainer,
    client: u64,
) -> Result<EstimatedKey, AttackError> {
    if trajectory.len() < 2 {
        return Err(AttackError::InvalidConfig("need at least two checkpoints".into()));
    }
    if participants_per_round.len() + 1 != trajectory.len() {
        return Err(AttackError::InvalidConfig("one participant count per round required".into()));
    }
    let first = &trajectory[0].theta;
    let last = &trajectory[trajectory.len() - 1].theta;
    let mut residual: Vec<f64> = last.iter().zip(first).map(|(a, b)| a - b).collect();
    for (w, &n) in trajectory.windows(2).zip(participants_per_round) {
        if n == 0 {
            continue;
        }
        let (local, _) = trainer.train(client, w[1].round, &w[0].theta)?;
        let inv = (n as f64).recip();
        for ((r, l), p) in residual.iter_mut().zip(&local).zip(&w[0].theta) {
            *r -= (l - p) * inv;
        }
    }
    normalized(residual)
}

/// Zeroes the globally smallest `ceil(ratio * #weights)` weight-matrix entries
/// (ties broken by index); biases are exempt.
pub fn prune_magnitude(shape: &MlpShape, theta: &[f64], ratio: f64) -> Result<Vec<f64>, AttackError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(AttackError::InvalidConfig(format!("pruning ratio {ratio} outside [0, 1)")));
    }
    let mut idx: Vec<usize> = shape.weight_tensors().into_iter().flat_map(|(r, _)| r).collect();
    let count = (ratio * idx.len() as f64).ceil() as usize;
    idx.sort_by(|&a, &b| theta[a].abs().total_cmp(&theta[b].abs()).then(a.cmp(&b)));
    let mut out = theta.to_vec();
    for &i in &idx[..count] {
        out[i] = 0.0;
    }
    Ok(out)
}

/// Zeroes `ceil(ratio * h)` hidden units with the smallest L1 norm of their
/// incoming weight row: the `W1` row, the `b1` entry and the `W2` column.
pub fn prune_structured(shape: &MlpShape, theta: &[f64], ratio: f64) -> Result<Vec<f64>, AttackError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(AttackError::InvalidConfig(format!("pruning ratio {ratio} outside [0, 1)")));
    }
    let (m, h) = (shape.inputs, shape.hidden);
    let w1 = &theta[shape.w1()];
    let norms: Vec<f64> = (0..h).map(|j| w1[j * m..(j + 1) * m].iter().map(|x| x.abs()).sum()).collect();
    let mut units: Vec<usize> = (0..h).collect();
    units.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let count = (ratio * h as f64).ceil() as usize;
    let mut out = theta.to_vec();
    let (r1, rb1, r2) = (shape.w1(), shape.b1(), shape.w2());
    for &j in &units[..count] {
        out[r1.start + j * m..r1.start + (j + 1) * m].iter_mut().for_each(|x| *x = 0.0);
        out[rb1.start + j] = 0.0;
        for c in 0..shape.classes {
            out[r2.start + c * h + j] = 0.0;
        }
    }
    Ok(out)
}

/// Symmetric quantize/dequantize of `w` with `scale = max|w| / levels`.
pub fn quantize_slice(w: &mut [f64], levels: f64) {
    let max = w.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    if max == 0.0 {
        return;
    }
    let scale = max / levels;
    for x in w.iter_mut() {
        *x = (*x / scale).round().clamp(-levels, levels) * scale;
    }
}

/// Weight-only quantization of both weight matrices; biases untouched.
pub fn attack_quantize(shape: &MlpShape, theta: &[f64], scheme: QuantScheme) -> Result<Vec<f64>, AttackError> {
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(AttackError::InvalidConfig("non-finite weights".into()));
    }
    let mut out = theta.to_vec();
    for (range, row) in shape.weight_tensors() {
        let tensor = &mut out[range];
        match scheme {
            QuantScheme::Static8 | QuantScheme::Static4 => quantize_slice(tensor, scheme.levels()),
            QuantScheme::Dynamic8 => tensor
                .chunks_mut(row)
                .for_each(|r| quantize_slice(r, scheme.levels())),
        }
    }
    Ok(out)
}

/// Distillation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 3.0,
            alpha: 0.5,
            epochs: ATTACK_EPOCHS,
            optimizer: OptimizerConfig::adam(1e-3),
            batch_size: ATTACK_BATCH,
        }
    }
}

/// Trains a freshly initialized student on
/// `alpha * KL(p_teacher^T || p_student^T) + (1 - alpha) * CE(student, y)`.
pub fn attack_distill(
    shape: &MlpShape,
    teacher: &[f64],
    subset: &Samples,
    cfg: &DistillConfig,
    seed_: u64,
) -> Result<Vec<f64>, AttackError> {
    if subset.is_empty() {
        return Err(AttackError::InvalidConfig("empty attacker subset".into()));
    }
    if !(0.0..=1.0).contains(&cfg.alpha) || !(cfg.temperature > 0.0) || cfg.epochs == 0 {
        return Err(AttackError::InvalidConfig(format!(
            "invalid distillation settings alpha = {}, T = {}, epochs = {}",
            cfg.alpha, cfg.temperature, cfg.epochs
        )));
    }
    let g = shape.classes;
    let temp = cfg.temperature;
    let teacher_probs: Vec<f64> = (0..subset.len())
        .flat_map(|i| {
            let z = flsim::logits(shape, teacher, subset.row(i));
            let mut p = vec![0.0; g];
            softmax_into(&z, temp, &mut p);
            p
        })
        .collect();
    let mut student = shape.init(&mut seed::stream(seed_, "student-init", &[]));
    let mut rng = seed::stream(seed_, "attack-distill", &[]);
    let tc = TrainConfig {
        optimizer: cfg.optimizer,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
    };
    let alpha = cfg.alpha;
    let mut ps = vec![0.0; g];
    flsim::train_epochs(&mut student, subset, &tc, &mut rng, |_, _| {}, |th, batch, grad| {
        flsim::backprop(shape, th, subset, batch, grad, |i, z, dz| {
            let ce = cross_entropy(z, subset.y[i], dz);
            if alpha == 0.0 {
                return ce;
            }
            let pt = &teacher_probs[i * g..(i + 1) * g];
            softmax_into(z, temp, &mut ps);
            let mut kl = 0.0;
            for c in 0..g {
                if pt[c] > 0.0 {
                    kl += pt[c] * (pt[c].ln() - ps[c].max(f64::MIN_POSITIVE).ln());
                }
                dz[c] = (1.0 - alpha) * dz[c] + alpha * (ps[c] - pt[c]) / temp;
            }
            alpha * kl + (1.0 - alpha) * ce
        })
    })?;
    Ok(student)
}

/// Points not dominated in the (accuracy, z) plane, sorted by accuracy then z.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let dominated = |p: &(f64, f64)| {
        points
            .iter()
            .any(|q| q.0 >= p.0 && q.1 >= p.1 && (q.0 > p.0 || q.1 > p.1))
    };
    let mut out: Vec<(f64, f64)> = points.iter().filter(|p| !dominated(p)).copied().collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    out.dedup();
    out
}

/// One row of the long-format attack table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub run_id: String,
    pub attack: String,
    pub params: String,
    pub step: usize,
    pub accuracy: f64,
    pub z: f64,
    pub decision: String,
    pub config_hash: String,
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn small() -> MlpShape {
        MlpShape { inputs: 6, hidden: 5, classes: 3 }
    }

    fn model() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-4.0f64..4.0, small().d())
    }

    proptest! {
        #[test]
        fn pruned_zero_count_grows_with_ratio(theta in model(), r1 in 0.0f64..0.99, r2 in 0.0f64..0.99) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let zeros = |v: Vec<f64>| v.iter().filter(|&&x| x == 0.0).count();
            let shape = small();
            prop_assert!(zeros(prune_magnitude(&shape, &theta, lo).unwrap()) <= zeros(prune_magnitude(&shape, &theta, hi).unwrap()));
            prop_assert!(zeros(prune_structured(&shape, &theta, lo).unwrap()) <= zeros(prune_structured(&shape, &theta, hi).unwrap()));
        }

        #[test]
        fn quantization_is_idempotent(theta in model(), which in 0usize..3) {
            let scheme = [QuantScheme::Static8, QuantScheme::Static4, QuantScheme::Dynamic8][which];
            let shape = small();
            let once = attack_quantize(&shape, &theta, scheme).unwrap();
            let twice = attack_quantize(&shape, &once, scheme).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(1e-300), "{a} vs {b}");
            }
        }
    }
}
