//! Vector Shamir sharing, Lagrange coefficients at zero, embedding shares and
//! the key commitment.
//!
//! A secret vector of length `d` is shared coordinate-wise: each coordinate gets
//! its own degree-`(t-1)` polynomial, all evaluated at the same public points.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::field::{FieldElem, FieldError, FieldParams, FieldVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SharingError {
    #[error("invalid sharing configuration: {0}")]
    InvalidConfig(String),
    #[error("duplicate evaluation point {0}")]
    DuplicatePoint(u64),
    #[error("evaluation point {0} is zero or not a configured point")]
    UnknownPoint(u64),
    #[error("threshold not met: {have} shares, {need} required")]
    BelowThreshold { have: usize, need: usize },
    #[error("participant set of size {participants} is below threshold {threshold}; embedding skipped")]
    SkipRound { participants: usize, threshold: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Public parameters of a `(t, K)` sharing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShamirConfig {
    t: usize,
    points: Vec<u64>,
    params: FieldParams,
}

impl ShamirConfig {
    /// `K` clients at the default points `x_k = k`.
    pub fn new(k: usize, t: usize, params: FieldParams) -> Result<Self, SharingError> {
        Self::with_points(t, (1..=k as u64).collect(), params)
    }

    pub fn with_points(
        t: usize,
        points: Vec<u64>,
        params: FieldParams,
    ) -> Result<Self, SharingError> {
        let k = points.len();
        if t == 0 || t > k {
            return Err(SharingError::InvalidConfig(format!(
                "threshold {t} must satisfy 1 <= t <= K = {k}"
            )));
        }
        check_points(&points, params)?;
        Ok(Self { t, points, params })
    }

    pub fn k(&self) -> usize {
        self.points.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn points(&self) -> &[u64] {
        &self.points
    }

    pub fn params(&self) -> FieldParams {
        self.params
    }

    pub fn contains(&self, x: u64) -> bool {
        self.points.contains(&x)
    }
}

fn check_points(points: &[u64], params: FieldParams) -> Result<(), SharingError> {
    let mut seen = std::collections::HashSet::with_capacity(points.len());
    for &x in points {
        if x == 0 || x >= params.modulus() {
            return Err(SharingError::UnknownPoint(x));
        }
        if !seen.insert(x) {
            return Err(SharingError::DuplicatePoint(x));
        }
    }
    Ok(())
}

/// One client's share: the evaluation point and the per-coordinate evaluations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShamirShare {
    pub point: u64,
    pub share: FieldVector,
}

/// Shares `secret` with fresh uniform polynomial coefficients drawn from `rng`.
pub fn shamir_share<R: RngCore + ?Sized>(
    secret: &FieldVector,
    cfg: &ShamirConfig,
    rng: &mut R,
) -> Result<Vec<ShamirShare>, SharingError> {
    let params = cfg.params;
    let q = params.modulus();
    let d = secret.len();
    let coeffs: Vec<FieldVector> = (1..cfg.t)
        .map(|_| {
            let elems = (0..d).map(|_| rng.random_range(0..q)).collect();
            FieldVector::from_raw(params, elems).expect("sampled below q")
        })
        .collect();
    shamir_share_with_coeffs(secret, cfg, &coeffs)
}

/// Shares `secret` with explicit coefficients: `coeffs[i]` holds the
/// coefficient of `x^(i+1)` for every coordinate.
pub fn shamir_share_with_coeffs(
    secret: &FieldVector,
    cfg: &ShamirConfig,
    coeffs: &[FieldVector],
) -> Result<Vec<ShamirShare>, SharingError> {
    if secret.is_empty() {
        return Err(SharingError::InvalidConfig("empty secret".into()));
    }
    if secret.params() != cfg.params {
        return Err(FieldError::ModulusMismatch {
            left: cfg.params.modulus(),
            right: secret.params().modulus(),
        }
        .into());
    }
    if coeffs.len() + 1 != cfg.t {
        return Err(SharingError::InvalidConfig(format!(
            "{} coefficient vectors given for threshold {}",
            coeffs.len(),
            cfg.t
        )));
    }
    if let Some(c) = coeffs.iter().find(|c| c.len() != secret.len()) {
        return Err(FieldError::LengthMismatch {
            expected: secret.len(),
            found: c.len(),
        }
        .into());
    }
    Ok(cfg
        .points
        .iter()
        .map(|&x| ShamirShare {
            point: x,
            share: eval_poly(secret, coeffs, x),
        })
        .collect())
}

/// Horner evaluation of the coordinate-wise polynomial at `x`.
pub(crate) fn eval_poly(constant: &FieldVector, coeffs: &[FieldVector], x: u64) -> FieldVector {
    let p = constant.params();
    let x = x % p.modulus();
    let mut acc = match coeffs.last() {
        Some(top) => top.clone(),
        None => return constant.clone(),
    };
    for c in coeffs.iter().rev().skip(1).chain(std::iter::once(constant)) {
        for (a, &b) in acc.as_mut_slice().iter_mut().zip(c.as_slice()) {
            *a = p.add(p.mul(*a, x), b);
        }
    }
    acc
}

/// Lagrange coefficients for evaluation at zero over a point set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LagrangeCoefficients {
    points: Vec<u64>,
    lambdas: Vec<FieldElem>,
}

impl LagrangeCoefficients {
    pub fn points(&self) -> &[u64] {
        &self.points
    }

    pub fn lambdas(&self) -> &[FieldElem] {
        &self.lambdas
    }

    pub fn get(&self, x: u64) -> Option<FieldElem> {
        self.points
            .iter()
            .position(|&p| p == x)
            .map(|i| self.lambdas[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, FieldElem)> + '_ {
        self.points.iter().copied().zip(self.lambdas.iter().copied())
    }
}

/// `lambda_i = prod_{j != i} (0 - x_j) / (x_i - x_j)`.
pub fn lagrange_at_zero(
    points: &[u64],
    params: FieldParams,
) -> Result<LagrangeCoefficients, SharingError> {
    if points.is_empty() {
        return Err(SharingError::InvalidConfig("empty point set".into()));
    }
    check_points(points, params)?;
    let mut lambdas = Vec::with_capacity(points.len());
    for (i, &xi) in points.iter().enumerate() {
        let mut num = 1u64;
        let mut den = 1u64;
        for (j, &xj) in points.iter().enumerate() {
            if i != j {
                num = params.mul(num, params.neg(xj));
                den = params.mul(den, params.sub(xi, xj));
            }
        }
        lambdas.push(params.elem(params.mul(num, params.inv(den)?)));
    }
    Ok(LagrangeCoefficients {
        points: points.to_vec(),
        lambdas,
    })
}

/// Recovers the shared secret from at least `t` shares.
pub fn shamir_reconstruct(
    shares: &[ShamirShare],
    cfg: &ShamirConfig,
) -> Result<FieldVector, SharingError> {
    if shares.len() < cfg.t {
        return Err(SharingError::BelowThreshold {
            have: shares.len(),
            need: cfg.t,
        });
    }
    if let Some(s) = shares.iter().find(|s| !cfg.contains(s.point)) {
        return Err(SharingError::UnknownPoint(s.point));
    }
    let points: Vec<u64> = shares.iter().map(|s| s.point).collect();
    let lag = lagrange_at_zero(&points, cfg.params)?;
    let d = shares[0].share.len();
    let mut out = FieldVector::zeros(cfg.params, d);
    for (s, &l) in shares.iter().zip(lag.lambdas()) {
        out.add_scaled(l, &s.share)?;
    }
    Ok(out)
}

/// `w_k = lambda_k^(S) * s_k` for one participant of the set `S`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingShare {
    pub w: FieldVector,
    pub lambda: FieldElem,
    /// Sorted evaluation points of the participant set this share was derived for.
    pub participants: Vec<u64>,
}

pub fn derive_embedding_share(
    share: &ShamirShare,
    participants: &[u64],
    cfg: &ShamirConfig,
) -> Result<EmbeddingShare, SharingError> {
    let lag = participant_lagrange(participants, cfg)?;
    derive_with(share, &lag)
}

/// Lagrange coefficients for a round's participant set, or the skip signal.
pub fn participant_lagrange(
    participants: &[u64],
    cfg: &ShamirConfig,
) -> Result<LagrangeCoefficients, SharingError> {
    if participants.len() < cfg.t {
        return Err(SharingError::SkipRound {
            participants: participants.len(),
            threshold: cfg.t,
        });
    }
    if let Some(&x) = participants.iter().find(|&&x| !cfg.contains(x)) {
        return Err(SharingError::UnknownPoint(x));
    }
    let mut sorted = participants.to_vec();
    sorted.sort_unstable();
    lagrange_at_zero(&sorted, cfg.params)
}

pub(crate) fn derive_with(
    share: &ShamirShare,
    lag: &LagrangeCoefficients,
) -> Result<EmbeddingShare, SharingError> {
    let lambda = lag
        .get(share.point)
        .ok_or(SharingError::UnknownPoint(share.point))?;
    Ok(EmbeddingShare {
        w: share.share.scaled(lambda)?,
        lambda,
        participants: lag.points().to_vec(),
    })
}

/// Public commitment `(rho, C)` to an encoded key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commitment {
    #[serde(with = "hex_bytes")]
    pub nonce: [u8; 32],
    #[serde(with = "hex_bytes")]
    pub digest: [u8; 32],
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

/// `rho || d || q || f_share || enc(tau) words || public_norm`, integers little-endian.
pub fn commitment_payload(
    nonce: &[u8; 32],
    secret_enc: &FieldVector,
    f_share: u16,
    public_norm: f64,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 + 8 + 2 + 8 * secret_enc.len() + 8);
    out.extend_from_slice(nonce);
    out.extend_from_slice(&(secret_enc.len() as u64).to_le_bytes());
    out.extend_from_slice(&secret_enc.params().modulus().to_le_bytes());
    out.extend_from_slice(&f_share.to_le_bytes());
    for v in secret_enc.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&public_norm.to_le_bytes());
    out
}

pub fn commit<R: RngCore + ?Sized>(
    secret_enc: &FieldVector,
    f_share: u16,
    public_norm: f64,
    rng: &mut R,
) -> Commitment {
    let mut nonce = [0u8; 32];
    rng.fill_bytes(&mut nonce);
    commit_with_nonce(nonce, secret_enc, f_share, public_norm)
}

pub fn commit_with_nonce(
    nonce: [u8; 32],
    secret_enc: &FieldVector,
    f_share: u16,
    public_norm: f64,
) -> Commitment {
    let digest = Sha256::digest(commitment_payload(&nonce, secret_enc, f_share, public_norm));
    Commitment {
        nonce,
        digest: digest.into(),
    }
}

pub fn open_check(c: &Commitment, secret_enc: &FieldVector, f_share: u16, public_norm: f64) -> bool {
    commit_with_nonce(c.nonce, secret_enc, f_share, public_norm).digest == c.digest
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::MERSENNE_61;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const P: u64 = 1_000_000_007;

    fn big() -> FieldParams {
        FieldParams::new(P).unwrap()
    }

    fn vec1(p: FieldParams, v: u64) -> FieldVector {
        FieldVector::from_raw(p, vec![v]).unwrap()
    }

    fn worked_shares() -> (ShamirConfig, Vec<ShamirShare>) {
        let cfg = ShamirConfig::new(3, 2, big()).unwrap();
        let shares = shamir_share_with_coeffs(&vec1(big(), 5), &cfg, &[vec1(big(), 3)]).unwrap();
        (cfg, shares)
    }

    #[test]
    fn worked_example_shares() {
        let (_, shares) = worked_shares();
        let got: Vec<(u64, u64)> = shares.iter().map(|s| (s.point, s.share.as_slice()[0])).collect();
        assert_eq!(got, vec![(1, 8), (2, 11), (3, 14)]);
    }

    #[test]
    fn zero_polynomial_gives_zero_shares() {
        let p = FieldParams::mersenne61();
        let cfg = ShamirConfig::new(5, 3, p).unwrap();
        let zero = FieldVector::zeros(p, 4);
        let shares = shamir_share_with_coeffs(&zero, &cfg, &[zero.clone(), zero.clone()]).unwrap();
        assert!(shares.iter().all(|s| s.share == zero));
    }

    #[test]
    fn lagrange_examples() {
        let p = big();
        let l = lagrange_at_zero(&[1, 2], p).unwrap();
        assert_eq!(l.get(1).unwrap().value(), 2);
        assert_eq!(l.get(2).unwrap().value(), P - 1);
        let l = lagrange_at_zero(&[1, 2, 3], p).unwrap();
        let vals: Vec<u64> = l.lambdas().iter().map(|x| x.value()).collect();
        assert_eq!(vals, vec![3, P - 3, 1]);
        let single = lagrange_at_zero(&[4], p).unwrap();
        assert_eq!(single.get(4).unwrap().value(), 1);
        assert_eq!(
            lagrange_at_zero(&[1, 1], p),
            Err(SharingError::DuplicatePoint(1))
        );
    }

    #[test]
    fn reconstruct_worked_example_and_threshold() {
        let (cfg, shares) = worked_shares();
        let s = shamir_reconstruct(&shares[..2], &cfg).unwrap();
        assert_eq!(s.as_slice(), &[5]);
        assert_eq!(shamir_reconstruct(&shares, &cfg).unwrap().as_slice(), &[5]);
        assert_eq!(
            shamir_reconstruct(&shares[..1], &cfg),
            Err(SharingError::BelowThreshold { have: 1, need: 2 })
        );
    }

    #[test]
    fn random_roundtrip_k_equals_t_two() {
        let p = FieldParams::mersenne61();
        let cfg = ShamirConfig::new(2, 2, p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let secret = vec1(p, rng.random_range(0..MERSENNE_61));
            let shares = shamir_share(&secret, &cfg, &mut rng).unwrap();
            assert_eq!(shamir_reconstruct(&shares, &cfg).unwrap(), secret);
        }
    }

    #[test]
    fn embedding_shares_worked_example() {
        let (cfg, shares) = worked_shares();
        let all: Vec<u64> = vec![1, 2, 3];
        let w: Vec<EmbeddingShare> = shares
            .iter()
            .map(|s| derive_embedding_share(s, &all, &cfg).unwrap())
            .collect();
        assert_eq!(w[0].w.as_slice(), &[24]);
        assert_eq!(w[1].w.as_slice(), &[((P - 3) as u128 * 11 % P as u128) as u64]);
        assert_eq!(w[2].w.as_slice(), &[14]);
        let p = big();
        let sum = w.iter().fold(0, |acc, e| p.add(acc, e.w.as_slice()[0]));
        assert_eq!(sum, 5);

        let sub = [1, 2];
        let w1 = derive_embedding_share(&shares[0], &sub, &cfg).unwrap();
        let w2 = derive_embedding_share(&shares[1], &sub, &cfg).unwrap();
        assert_eq!(w1.w.as_slice(), &[16]);
        assert_eq!(w2.w.as_slice(), &[p.mul(P - 1, 11)]);
        assert_eq!(p.add(w1.w.as_slice()[0], w2.w.as_slice()[0]), 5);

        assert!(matches!(
            derive_embedding_share(&shares[0], &[1], &cfg),
            Err(SharingError::SkipRound { participants: 1, threshold: 2 })
        ));
    }

    #[test]
    fn config_validation() {
        let p = big();
        assert!(ShamirConfig::new(3, 4, p).is_err());
        assert!(ShamirConfig::new(3, 0, p).is_err());
        assert_eq!(
            ShamirConfig::with_points(2, vec![1, 2, 2], p),
            Err(SharingError::DuplicatePoint(2))
        );
        assert_eq!(
            ShamirConfig::with_points(2, vec![0, 1], p),
            Err(SharingError::UnknownPoint(0))
        );
    }

    #[test]
    fn exhaustive_single_share_secrecy_over_f7() {
        let p = FieldParams::new(7).unwrap();
        let cfg = ShamirConfig::new(3, 2, p).unwrap();
        let histogram = |secret: u64| {
            let mut h = vec![[0usize; 7]; 3];
            for a in 0..7 {
                let shares =
                    shamir_share_with_coeffs(&vec1(p, secret), &cfg, &[vec1(p, a)]).unwrap();
                for (k, s) in shares.iter().enumerate() {
                    h[k][s.share.as_slice()[0] as usize] += 1;
                }
            }
            h
        };
        let h1 = histogram(1);
        let h5 = histogram(5);
        assert_eq!(h1, h5);
        assert!(h1.iter().all(|row| row.iter().all(|&c| c == 1)));
    }

    #[test]
    fn sharing_is_linear() {
        let p = FieldParams::mersenne61();
        let cfg = ShamirConfig::new(6, 4, p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rand_vec = |rng: &mut ChaCha8Rng| {
            FieldVector::from_raw(p, (0..5).map(|_| rng.random_range(0..MERSENNE_61)).collect())
                .unwrap()
        };
        let a = rand_vec(&mut rng);
        let b = rand_vec(&mut rng);
        let ca: Vec<_> = (0..3).map(|_| rand_vec(&mut rng)).collect();
        let cb: Vec<_> = (0..3).map(|_| rand_vec(&mut rng)).collect();
        let mut sum = a.clone();
        sum.add_assign(&b).unwrap();
        let csum: Vec<_> = ca
            .iter()
            .zip(&cb)
            .map(|(x, y)| {
                let mut z = x.clone();
                z.add_assign(y).unwrap();
                z
            })
            .collect();
        let sa = shamir_share_with_coeffs(&a, &cfg, &ca).unwrap();
        let sb = shamir_share_with_coeffs(&b, &cfg, &cb).unwrap();
        let ss = shamir_share_with_coeffs(&sum, &cfg, &csum).unwrap();
        for ((x, y), z) in sa.iter().zip(&sb).zip(&ss) {
            let mut xy = x.share.clone();
            xy.add_assign(&y.share).unwrap();
            assert_eq!(xy, z.share);
        }
    }

    #[test]
    fn commitment_binds_payload_and_nonce() {
        let p = FieldParams::mersenne61();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let key = FieldVector::from_raw(p, vec![1, 2, 3, MERSENNE_61 - 4]).unwrap();
        let c = commit(&key, 20, 2.0, &mut rng);
        assert!(open_check(&c, &key, 20, 2.0));

        let mut tampered = key.clone();
        tampered.as_mut_slice()[0] ^= 1;
        assert!(!open_check(&c, &tampered, 20, 2.0));
        assert!(!open_check(&c, &key, 20, 2.0000001));
        assert!(!open_check(&c, &key, 21, 2.0));

        let mut c2 = c;
        c2.nonce[5] ^= 0x80;
        assert!(!open_check(&c2, &key, 20, 2.0));
    }

    #[test]
    fn commitment_payload_layout() {
        let p = FieldParams::new(7).unwrap();
        let key = FieldVector::from_raw(p, vec![3, 4]).unwrap();
        let nonce = [9u8; 32];
        let bytes = commitment_payload(&nonce, &key, 20, 1.5);
        assert_eq!(bytes.len(), 32 + 8 + 8 + 2 + 16 + 8);
        assert_eq!(&bytes[..32], &nonce);
        assert_eq!(&bytes[32..40], &2u64.to_le_bytes());
        assert_eq!(&bytes[40..48], &7u64.to_le_bytes());
        assert_eq!(&bytes[48..50], &20u16.to_le_bytes());
        assert_eq!(&bytes[50..58], &3u64.to_le_bytes());
        assert_eq!(&bytes[66..], &1.5f64.to_le_bytes());
    }
}
