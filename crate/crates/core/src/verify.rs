//! Coalition verification without reconstructing the key, null calibration
//! and the one-sided z-test.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::field::{check_aggregate_bound, FieldElem, FieldError, FieldVector, Precision};
use crate::par;
use crate::secagg::{SecAggError, SecAggSession};
use crate::seed;
use crate::sharing::{self, Commitment, ShamirConfig, ShamirShare, SharingError};

pub const DEFAULT_Z_STAR: f64 = 4.0;
pub const SKEW_WARN: f64 = 0.3;
pub const KURTOSIS_WARN: f64 = 0.5;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid verification input: {0}")]
    InvalidInput(String),
    #[error("coalition of {have} is below the threshold {need}")]
    BelowThreshold { have: usize, need: usize },
    #[error("suspect model has zero norm")]
    DegenerateModel,
    #[error("calibration fingerprint {expected} does not match model {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("calibration table: {0}")]
    Table(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    SecAgg(#[from] SecAggError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture identifier plus parameter count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub arch: String,
    pub d: usize,
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (d = {})", self.arch, self.d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub mu: f64,
    pub sigma: f64,
    pub n_models: usize,
    pub n_keys_per_model: usize,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Set when `|skewness| > 0.3` or `|excess kurtosis| > 0.5`.
    pub normality_warning: bool,
    pub fingerprint: Fingerprint,
}

impl CalibrationTable {
    pub fn check_fingerprint(&self, fp: &Fingerprint) -> Result<(), VerifyError> {
        if &self.fingerprint != fp {
            return Err(VerifyError::FingerprintMismatch {
                expected: self.fingerprint.to_string(),
                found: fp.to_string(),
            });
        }
        Ok(())
    }

    pub fn z(&self, cosine: f64) -> f64 {
        (cosine - self.mu) / self.sigma
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("calibration table serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self, VerifyError> {
        let t: Self = toml::from_str(s).map_err(|e| VerifyError::Table(e.to_string()))?;
        if !(t.sigma > 0.0) {
            return Err(VerifyError::Table("sigma must be positive".into()));
        }
        Ok(t)
    }

    pub fn write_to(&self, path: &Path) -> Result<(), VerifyError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, VerifyError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Pooled cosine samples plus their summary.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub table: CalibrationTable,
    pub samples: Vec<f64>,
    /// Indices of input models dropped for having zero norm.
    pub excluded: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartialVerification {
    pub client: u64,
    /// `<enc(theta_s), s_i> mod q`.
    pub value: FieldElem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub cosine: f64,
    pub z: f64,
    pub z_star: f64,
    pub accept: bool,
    pub coalition_size: usize,
    /// Raw field value of the recombined inner product.
    pub inner_field: u64,
    pub commitment_ok: Option<bool>,
}

impl VerificationReport {
    pub const CSV_HEADER: &'static str = "model,attack,coalition,cosine,z,decision";

    pub fn decision(&self) -> &'static str {
        if self.accept {
            "accept"
        } else {
            "reject"
        }
    }

    pub fn csv_row(&self, model_id: &str, attack_id: &str) -> String {
        format!(
            "{model_id},{attack_id},{},{:.9},{:.6},{}",
            self.coalition_size,
            self.cosine,
            self.z,
            self.decision()
        )
    }
}

/// One-sided standard normal tail probability at `z`.
pub fn normal_tail(z: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").sf(z)
}

/// Encodes a suspect model at share precision after checking the inner-product bound.
pub fn encode_suspect(theta_s: &[f64], precision: &Precision) -> Result<FieldVector, VerifyError> {
    let peak = theta_s.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    check_aggregate_bound(theta_s.len(), 0, peak, 0.0, precision)?;
    Ok(precision.share_codec().encode(theta_s)?)
}

pub fn partial_inner(
    share: &ShamirShare,
    theta_enc: &FieldVector,
) -> Result<PartialVerification, VerifyError> {
    if share.share.len() != theta_enc.len() {
        return Err(VerifyError::InvalidInput(format!(
            "share length {} differs from model length {}",
            share.share.len(),
            theta_enc.len()
        )));
    }
    Ok(PartialVerification {
        client: share.point,
        value: theta_enc.dot(&share.share)?,
    })
}

fn report(
    inner: FieldElem,
    theta_s: &[f64],
    public_norm: f64,
    calib: &CalibrationTable,
    z_star: f64,
    precision: &Precision,
    coalition_size: usize,
) -> Result<VerificationReport, VerifyError> {
    let norm = theta_s.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(VerifyError::DegenerateModel);
    }
    let inner_real = precision.inner_codec().decode_scalar(inner);
    let cosine = inner_real / (norm * public_norm);
    let z = calib.z(cosine);
    Ok(VerificationReport {
        cosine,
        z,
        z_star,
        accept: z >= z_star,
        coalition_size,
        inner_field: inner.value(),
        commitment_ok: None,
    })
}

/// Inputs that stay fixed across coalitions for one suspect model.
pub struct VerifyContext<'a> {
    pub config: &'a ShamirConfig,
    pub precision: &'a Precision,
    pub public_norm: f64,
    pub calib: &'a CalibrationTable,
    pub fingerprint: &'a Fingerprint,
    pub z_star: f64,
    /// Seed for the scalar SecAgg session that combines the partials.
    pub session_seed: [u8; 32],
}

/// Combines `lambda_i v_i` across the coalition through a scalar SecAgg sum.
pub fn coalition_statistic(
    partials: &[PartialVerification],
    theta_s: &[f64],
    ctx: &VerifyContext<'_>,
) -> Result<VerificationReport, VerifyError> {
    let need = ctx.config.t();
    if partials.len() < need {
        return Err(VerifyError::BelowThreshold {
            have: partials.len(),
            need,
        });
    }
    ctx.calib.check_fingerprint(ctx.fingerprint)?;
    if ctx.fingerprint.d != theta_s.len() {
        return Err(VerifyError::FingerprintMismatch {
            expected: ctx.fingerprint.to_string(),
            found: format!("d = {}", theta_s.len()),
        });
    }
    let points: Vec<u64> = partials.iter().map(|p| p.client).collect();
    let lag = sharing::participant_lagrange(&points, ctx.config)?;
    let weighted = partials
        .iter()
        .map(|p| {
            let lambda = lag.get(p.client).ok_or(SharingError::UnknownPoint(p.client))?;
            Ok((p.client, lambda.try_mul(p.value)?))
        })
        .collect::<Result<Vec<_>, VerifyError>>()?;
    let mut session = SecAggSession::new(0, ctx.session_seed, &points, 1, ctx.precision.modulus)?;
    let inner = session.sum_scalar(&weighted)?;
    report(
        inner,
        theta_s,
        ctx.public_norm,
        ctx.calib,
        ctx.z_star,
        ctx.precision,
        partials.len(),
    )
}

/// End-to-end coalition flow: each member computes its partial, then the
/// partials are combined.
pub fn verify_coalition(
    shares: &[&ShamirShare],
    theta_s: &[f64],
    ctx: &VerifyContext<'_>,
) -> Result<VerificationReport, VerifyError> {
    if shares.len() < ctx.config.t() {
        return Err(VerifyError::BelowThreshold {
            have: shares.len(),
            need: ctx.config.t(),
        });
    }
    let enc = encode_suspect(theta_s, ctx.precision)?;
    let partials = par::map(shares, |s| partial_inner(s, &enc))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    coalition_statistic(&partials, theta_s, ctx)
}

/// Test oracle: the same statistic computed against the encoded key directly.
pub fn verify_direct(
    theta_s: &[f64],
    tau_enc: &FieldVector,
    public_norm: f64,
    calib: &CalibrationTable,
    z_star: f64,
    precision: &Precision,
) -> Result<VerificationReport, VerifyError> {
    if tau_enc.len() != theta_s.len() {
        return Err(VerifyError::InvalidInput("key and model lengths differ".into()));
    }
    let enc = encode_suspect(theta_s, precision)?;
    let inner = enc.dot(tau_enc)?;
    report(inner, theta_s, public_norm, calib, z_star, precision, 0)
}

/// Reconstructs the key from at least `t` shares and checks it against the
/// published commitment. This materializes the key and is never part of the
/// default flow.
pub fn commitment_check(
    shares: &[ShamirShare],
    config: &ShamirConfig,
    commitment: &Commitment,
    f_share: u16,
    public_norm: f64,
) -> Result<bool, VerifyError> {
    let tau_enc = sharing::shamir_reconstruct(shares, config)?;
    Ok(sharing::open_check(commitment, &tau_enc, f_share, public_norm))
}

/// Sample mean, standard deviation (n - 1), skewness and excess kurtosis.
pub fn moments(xs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2n, m3n, m4n) = (m2 / n, m3 / n, m4 / n);
    let skew = m3n / m2n.powf(1.5);
    let kurt = m4n / (m2n * m2n) - 3.0;
    let sd = (m2 / (n - 1.0)).sqrt();
    (mean, sd, skew, kurt)
}

/// Cosine between a model and a candidate key, with the public norm standing in for `||tau||`.
pub fn cosine_public(theta: &[f64], key: &[f64], public_norm: f64) -> f64 {
    let dot: f64 = theta.iter().zip(key).map(|(a, b)| a * b).sum();
    let norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (norm * public_norm)
}

/// Pools cosines between each unwatermarked model and `n_keys` fresh
/// `N(0, I_d)` keys drawn from independent streams.
pub fn calibrate(
    models: &[Vec<f64>],
    n_keys: usize,
    seed: u64,
    fingerprint: Fingerprint,
    public_norm: f64,
) -> Result<Calibration, VerifyError> {
    if models.len() < 2 {
        return Err(VerifyError::InvalidInput(format!(
            "calibration needs at least two models, got {}",
            models.len()
        )));
    }
    if n_keys < 100 {
        return Err(VerifyError::InvalidInput(format!(
            "calibration needs at least 100 keys per model, got {n_keys}"
        )));
    }
    if let Some(m) = models.iter().find(|m| m.len() != fingerprint.d) {
        return Err(VerifyError::FingerprintMismatch {
            expected: fingerprint.to_string(),
            found: format!("d = {}", m.len()),
        });
    }
    let mut excluded = Vec::new();
    let mut used = Vec::new();
    for (i, m) in models.iter().enumerate() {
        if m.iter().all(|&x| x == 0.0) {
            log::warn!("calibration model {i} has zero norm and is excluded");
            excluded.push(i);
        } else {
            used.push(i);
        }
    }
    if used.len() < 2 {
        return Err(VerifyError::InvalidInput(
            "fewer than two non-degenerate calibration models".into(),
        ));
    }
    let d = fingerprint.d;
    let mut samples = Vec::with_capacity(used.len() * n_keys);
    for &i in &used {
        let theta = &models[i];
        samples.extend(par::map_indexed(n_keys, |j| {
            let mut rng = seed::stream(seed, "calibration-key", &[i as u64, j as u64]);
            let key: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            cosine_public(theta, &key, public_norm)
        }));
    }
    let (mu, sigma, skewness, excess_kurtosis) = moments(&samples);
    let normality_warning = skewness.abs() > SKEW_WARN || excess_kurtosis.abs() > KURTOSIS_WARN;
    if normality_warning {
        log::warn!("null cosines deviate from normality: skew {skewness:.3}, excess kurtosis {excess_kurtosis:.3}");
    }
    Ok(Calibration {
        table: CalibrationTable {
            mu,
            sigma,
            n_models: used.len(),
            n_keys_per_model: n_keys,
            skewness,
            excess_kurtosis,
            normality_warning,
            fingerprint,
        },
        samples,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::setup::setup_trusted_dealer;
    use rand::seq::index;
    use rand::Rng;

    fn gaussian(d: usize, seed_: u64) -> Vec<f64> {
        let mut rng = seed::stream(seed_, "test-vec", &[]);
        (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn table(d: usize) -> CalibrationTable {
        CalibrationTable {
            mu: 0.0,
            sigma: 1.0 / (d as f64).sqrt(),
            n_models: 2,
            n_keys_per_model: 100,
            skewness: 0.0,
            excess_kurtosis: 0.0,
            normality_warning: false,
            fingerprint: Fingerprint { arch: "test".into(), d },
        }
    }

    #[test]
    fn partial_examples() {
        let p = Precision::default();
        let params = p.modulus;
        let share = ShamirShare {
            point: 1,
            share: FieldVector::from_raw(params, vec![8]).unwrap(),
        };
        let theta = FieldVector::from_raw(params, vec![3]).unwrap();
        assert_eq!(partial_inner(&share, &theta).unwrap().value.value(), 24);
        let zero = FieldVector::zeros(params, 1);
        assert_eq!(partial_inner(&share, &zero).unwrap().value.value(), 0);
        assert!(partial_inner(&share, &FieldVector::zeros(params, 2)).is_err());
    }

    #[test]
    fn coalition_matches_direct_for_every_coalition() {
        let p = Precision::default();
        let (k, t, d) = (7, 3, 4096);
        let cfg = ShamirConfig::new(k, t, p.modulus).unwrap();
        let mut rng = seed::stream(1, "dealer", &[]);
        let setup = setup_trusted_dealer(&cfg, d, &p, &mut rng, true).unwrap();
        let dbg = setup.debug.as_ref().unwrap();
        let calib = table(d);
        let fp = calib.fingerprint.clone();
        let ctx = VerifyContext {
            config: &cfg,
            precision: &p,
            public_norm: setup.public_norm,
            calib: &calib,
            fingerprint: &fp,
            z_star: DEFAULT_Z_STAR,
            session_seed: [7; 32],
        };
        // Suspect equal to the key: cosine near ||tau|| / sqrt(d).
        let direct = verify_direct(&dbg.tau, &dbg.tau_enc, setup.public_norm, &calib, 4.0, &p).unwrap();
        assert!(direct.accept);
        assert!((direct.cosine - 1.0).abs() < 0.05);

        let theta = gaussian(d, 2);
        let direct = verify_direct(&theta, &dbg.tau_enc, setup.public_norm, &calib, 4.0, &p).unwrap();
        let enc = encode_suspect(&theta, &p).unwrap();
        let expected = enc.dot(&dbg.tau_enc).unwrap();
        for _ in 0..20 {
            let size = rng.random_range(t..=k);
            let pts: Vec<usize> = index::sample(&mut rng, k, size).into_vec();
            let shares: Vec<&ShamirShare> = pts.iter().map(|&i| &setup.shares[i]).collect();
            let partials: Vec<PartialVerification> =
                shares.iter().map(|s| partial_inner(s, &enc).unwrap()).collect();
            let lag = sharing::lagrange_at_zero(
                &partials.iter().map(|q| q.client).collect::<Vec<_>>(),
                p.modulus,
            )
            .unwrap();
            let mut acc = p.modulus.zero();
            for q in &partials {
                acc = acc + lag.get(q.client).unwrap() * q.value;
            }
            assert_eq!(acc, expected);
            let rep = verify_coalition(&shares, &theta, &ctx).unwrap();
            assert_eq!(rep.inner_field, direct.inner_field);
            assert_eq!(rep.z.to_bits(), direct.z.to_bits());
            assert_eq!(rep.coalition_size, size);
        }
        let few: Vec<&ShamirShare> = setup.shares[..t - 1].iter().collect();
        assert!(matches!(
            verify_coalition(&few, &theta, &ctx),
            Err(VerifyError::BelowThreshold { have: 2, need: 3 })
        ));
        assert!(matches!(
            verify_coalition(&setup.shares.iter().collect::<Vec<_>>(), &vec![0.0; d], &ctx),
            Err(VerifyError::DegenerateModel)
        ));
    }

    #[test]
    fn scale_covariance_of_the_statistic() {
        let p = Precision::default();
        let d = 2048;
        let tau = gaussian(d, 3);
        let tau_enc = p.share_codec().encode(&tau).unwrap();
        let theta: Vec<f64> = gaussian(d, 4).iter().zip(&tau).map(|(a, b)| a + 0.1 * b).collect();
        let calib = table(d);
        let base = verify_direct(&theta, &tau_enc, 45.25, &calib, 4.0, &p).unwrap();
        for a in [0.5, 3.0] {
            let scaled: Vec<f64> = theta.iter().map(|x| a * x).collect();
            let r = verify_direct(&scaled, &tau_enc, 45.25, &calib, 4.0, &p).unwrap();
            assert!((r.z - base.z).abs() < 1e-3, "{} vs {}", r.z, base.z);
        }
    }

    #[test]
    fn null_center_rejects_and_threshold_tail() {
        let calib = table(100);
        assert_eq!(calib.z(0.0), 0.0);
        assert!((normal_tail(4.0) - 3.167e-5).abs() < 1e-7);
    }

    #[test]
    fn isotropic_models_calibrate_to_zero_mean_and_inverse_sqrt_d() {
        let d = 4096;
        let models: Vec<Vec<f64>> = (0..3).map(|i| gaussian(d, 10 + i)).collect();
        let fp = Fingerprint { arch: "iso".into(), d };
        let cal = calibrate(&models, 400, 5, fp.clone(), (d as f64).sqrt()).unwrap();
        let s = 1.0 / (d as f64).sqrt();
        assert!(cal.table.mu.abs() < 0.1 * s);
        assert!((cal.table.sigma - s).abs() < 0.1 * s);
        assert_eq!(cal.samples.len(), 1200);
        assert!(calibrate(&models[..1], 400, 5, fp.clone(), 64.0).is_err());
        assert!(calibrate(&models, 99, 5, fp.clone(), 64.0).is_err());
        let mut with_zero = models.clone();
        with_zero.push(vec![0.0; d]);
        assert_eq!(calibrate(&with_zero, 100, 5, fp, 64.0).unwrap().excluded, vec![3]);
    }

    #[test]
    fn calibration_table_roundtrip_and_fingerprint() {
        let t = table(77);
        let back = CalibrationTable::from_toml(&t.to_toml()).unwrap();
        assert_eq!(back, t);
        assert!(t.check_fingerprint(&Fingerprint { arch: "test".into(), d: 78 }).is_err());
        assert!(CalibrationTable::from_toml(&t.to_toml().replace("sigma = ", "sigma = -")).is_err());
    }

    #[test]
    fn verification_bound_is_enforced() {
        let p = Precision::default();
        let theta = vec![1000.0; 5514];
        assert!(matches!(encode_suspect(&theta, &p), Err(VerifyError::Field(_))));
    }

    #[test]
    fn commitment_check_needs_threshold_shares() {
        let p = Precision::default();
        let cfg = ShamirConfig::new(5, 3, p.modulus).unwrap();
        let mut rng = seed::stream(9, "dealer", &[]);
        let setup = setup_trusted_dealer(&cfg, 32, &p, &mut rng, false).unwrap();
        let c = setup.commitment.unwrap();
        assert!(commitment_check(&setup.shares[1..4], &cfg, &c, 20, setup.public_norm).unwrap());
        assert!(commitment_check(&setup.shares[..2], &cfg, &c, 20, setup.public_norm).is_err());
        let mut forged = setup.shares[1..4].to_vec();
        forged[0].share = FieldVector::zeros(p.modulus, 32);
        assert!(!commitment_check(&forged, &cfg, &c, 20, setup.public_norm).unwrap());
    }

    #[test]
    fn report_csv_row() {
        let r = VerificationReport {
            cosine: 0.5,
            z: 12.0,
            z_star: 4.0,
            accept: true,
            coalition_size: 16,
            inner_field: 0,
            commitment_ok: None,
        };
        assert_eq!(r.csv_row("m0", "none"), "m0,none,16,0.500000000,12.000000,accept");
    }
}
