//! Simulated secure aggregation with pairwise additive masks.
//!
//! For every unordered pair `i < j` of participants a 16-byte seed is derived
//! from the session seed and expanded in counter mode into a uniform mask
//! vector `m_ij`. Client `i` adds `m_ij`, client `j` subtracts it, so the masks
//! cancel in the field sum. The participant set is frozen when the session is
//! created; there is no dropout recovery.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::field::{FieldElem, FieldError, FieldParams, FieldVector};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SecAggError {
    #[error("client {client} submitted length {found}, session expects {expected}")]
    LengthMismatch {
        client: u64,
        expected: usize,
        found: usize,
    },
    #[error("client {0} is not a participant of this session")]
    UnknownParticipant(u64),
    #[error("participant {0} did not submit")]
    MissingParticipant(u64),
    #[error("client {0} submitted twice")]
    DuplicateSubmission(u64),
    #[error("session has no participants")]
    Empty,
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// How much of the server's view a session retains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogLevel {
    Off,
    /// One SHA-256 digest per masked submission.
    #[default]
    Digests,
    /// Digests plus the masked vectors themselves.
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObservationRecord {
    pub round: u64,
    pub client: u64,
    pub digest: [u8; 32],
}

/// Everything the server observed: masked submissions and the final sum.
#[derive(Clone, Debug, Default)]
pub struct ObservationLog {
    pub records: Vec<ObservationRecord>,
    pub masked: Vec<(u64, FieldVector)>,
    pub output: Option<FieldVector>,
}

impl ObservationLog {
    /// One JSON object per line: `{"round":R,"client":C,"digest":"<hex>"}`.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{{\"round\":{},\"client\":{},\"digest\":\"{}\"}}",
                r.round,
                r.client,
                hex::encode(r.digest)
            );
        }
        out
    }
}

pub struct SecAggSession {
    round: u64,
    seed: [u8; 32],
    participants: Vec<u64>,
    d: usize,
    params: FieldParams,
    level: LogLevel,
    log: ObservationLog,
}

impl SecAggSession {
    pub fn new(
        round: u64,
        seed: [u8; 32],
        participants: &[u64],
        d: usize,
        params: FieldParams,
    ) -> Result<Self, SecAggError> {
        if participants.is_empty() {
            return Err(SecAggError::Empty);
        }
        let mut sorted = participants.to_vec();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(SecAggError::DuplicateSubmission(w[0]));
        }
        Ok(Self {
            round,
            seed,
            participants: sorted,
            d,
            params,
            level: LogLevel::default(),
            log: ObservationLog::default(),
        })
    }

    pub fn with_log_level(mut self, level: LogLevel) -> Self {
        self.level = level;
        self
    }

    pub fn participants(&self) -> &[u64] {
        &self.participants
    }

    pub fn log(&self) -> &ObservationLog {
        &self.log
    }

    pub fn into_log(self) -> ObservationLog {
        self.log
    }

    /// Seed shared by the pair `{i, j}`; symmetric in its arguments.
    pub fn pair_seed(&self, i: u64, j: u64) -> [u8; 16] {
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        let mut h = Sha256::new();
        h.update(b"secagg-pair");
        h.update(self.seed);
        h.update(lo.to_le_bytes());
        h.update(hi.to_le_bytes());
        let full: [u8; 32] = h.finalize().into();
        full[..16].try_into().unwrap()
    }

    /// Client-side masking of one submission.
    pub fn mask_submission(
        &self,
        client: u64,
        input: &FieldVector,
    ) -> Result<FieldVector, SecAggError> {
        if self.participants.binary_search(&client).is_err() {
            return Err(SecAggError::UnknownParticipant(client));
        }
        if input.len() != self.d {
            return Err(SecAggError::LengthMismatch {
                client,
                expected: self.d,
                found: input.len(),
            });
        }
        if input.params() != self.params {
            return Err(FieldError::ModulusMismatch {
                left: self.params.modulus(),
                right: input.params().modulus(),
            }
            .into());
        }
        let p = self.params;
        let mut out = input.clone();
        for &other in &self.participants {
            if other == client {
                continue;
            }
            let mut stream = MaskStream::new(self.pair_seed(client, other), p);
            let buf = out.as_mut_slice();
            if client < other {
                for v in buf.iter_mut() {
                    *v = p.add(*v, stream.next_elem());
                }
            } else {
                for v in buf.iter_mut() {
                    *v = p.sub(*v, stream.next_elem());
                }
            }
        }
        Ok(out)
    }

    /// Sums one submission per participant. Submissions may arrive in any order.
    pub fn sum(&mut self, inputs: &[(u64, FieldVector)]) -> Result<FieldVector, SecAggError> {
        let mut seen = vec![false; self.participants.len()];
        for (client, v) in inputs {
            let idx = self
                .participants
                .binary_search(client)
                .map_err(|_| SecAggError::UnknownParticipant(*client))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(SecAggError::DuplicateSubmission(*client));
            }
            if v.len() != self.d {
                return Err(SecAggError::LengthMismatch {
                    client: *client,
                    expected: self.d,
                    found: v.len(),
                });
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(SecAggError::MissingParticipant(self.participants[i]));
        }

        let masked = par::map(inputs, |(client, v)| self.mask_submission(*client, v));
        let mut total = FieldVector::zeros(self.params, self.d);
        for ((client, _), m) in inputs.iter().zip(masked) {
            let m = m?;
            total.add_assign(&m)?;
            self.record(*client, m);
        }
        if self.level != LogLevel::Off {
            self.log.output = Some(total.clone());
        }
        Ok(total)
    }

    /// Scalar variant; the session must have been created with `d = 1`.
    pub fn sum_scalar(&mut self, inputs: &[(u64, FieldElem)]) -> Result<FieldElem, SecAggError> {
        let vecs = inputs
            .iter()
            .map(|&(c, e)| Ok((c, FieldVector::from_elems(self.params, &[e])?)))
            .collect::<Result<Vec<_>, FieldError>>()?;
        let out = self.sum(&vecs)?;
        Ok(out.get(0).expect("length checked"))
    }

    fn record(&mut self, client: u64, masked: FieldVector) {
        match self.level {
            LogLevel::Off => {}
            LogLevel::Digests | LogLevel::Full => {
                self.log.records.push(ObservationRecord {
                    round: self.round,
                    client,
                    digest: Sha256::digest(masked.to_bytes()).into(),
                });
                if self.level == LogLevel::Full {
                    self.log.masked.push((client, masked));
                }
            }
        }
    }
}

/// Counter-mode expansion of a pair seed into uniform field elements.
struct MaskStream {
    rng: ChaCha8Rng,
    q: u64,
    limit: u64,
}

impl MaskStream {
    fn new(seed: [u8; 16], params: FieldParams) -> Self {
        let mut key = [0u8; 32];
        key[..16].copy_from_slice(&seed);
        let q = params.modulus();
        // Largest multiple of q that fits in u64; draws at or above it are rejected.
        let limit = (u64::MAX / q) * q;
        Self {
            rng: ChaCha8Rng::from_seed(key),
            q,
            limit,
        }
    }

    #[inline]
    fn next_elem(&mut self) -> u64 {
        loop {
            let x = self.rng.next_u64();
            if x < self.limit {
                return x % self.q;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FixedPointCodec, MERSENNE_61};
    use crate::seed;
    use rand::Rng;

    fn session(parts: &[u64], d: usize, s: u64) -> SecAggSession {
        SecAggSession::new(0, seed::derive_key(s, "secagg", &[]), parts, d, FieldParams::mersenne61())
            .unwrap()
    }

    #[test]
    fn two_clients_exact_fixed_point_sum() {
        let codec = FixedPointCodec::new(FieldParams::mersenne61(), 20);
        let mut s = session(&[1, 2], 1, 0);
        let out = s
            .sum(&[(1, codec.encode(&[1.0]).unwrap()), (2, codec.encode(&[2.0]).unwrap())])
            .unwrap();
        assert_eq!(codec.decode_centered(&out), vec![3.0]);
    }

    #[test]
    fn matches_unmasked_sum_for_many_clients() {
        let p = FieldParams::mersenne61();
        let mut rng = seed::stream(5, "test", &[]);
        for trial in 0..100 {
            let parts: Vec<u64> = (1..=32).collect();
            let inputs: Vec<(u64, FieldVector)> = parts
                .iter()
                .map(|&c| {
                    let v = (0..6).map(|_| rng.random_range(0..MERSENNE_61)).collect();
                    (c, FieldVector::from_raw(p, v).unwrap())
                })
                .collect();
            let mut oracle = FieldVector::zeros(p, 6);
            for (_, v) in &inputs {
                oracle.add_assign(v).unwrap();
            }
            let mut s = session(&parts, 6, trial);
            assert_eq!(s.sum(&inputs).unwrap(), oracle);
        }
    }

    #[test]
    fn single_participant_is_identity() {
        let p = FieldParams::mersenne61();
        let v = FieldVector::from_raw(p, vec![42, 7]).unwrap();
        let mut s = session(&[9], 2, 1);
        assert_eq!(s.sum(&[(9, v.clone())]).unwrap(), v);
    }

    #[test]
    fn masks_hide_individual_inputs_and_cancel_in_log() {
        let p = FieldParams::mersenne61();
        let parts = [1, 2, 3, 4];
        let inputs: Vec<_> = parts
            .iter()
            .map(|&c| (c, FieldVector::from_raw(p, vec![c, 2 * c, 3 * c]).unwrap()))
            .collect();
        let mut s = session(&parts, 3, 2).with_log_level(LogLevel::Full);
        let out = s.sum(&inputs).unwrap();
        let log = s.log();
        assert_eq!(log.records.len(), 4);
        let mut relogged = FieldVector::zeros(p, 3);
        for ((c, m), (_, raw)) in log.masked.iter().zip(&inputs) {
            assert_ne!(m, raw, "client {c} submission left unmasked");
            relogged.add_assign(m).unwrap();
        }
        assert_eq!(relogged, out);
        assert_eq!(log.output.as_ref(), Some(&out));
        assert_eq!(log.to_ndjson().lines().count(), 4);
    }

    #[test]
    fn protocol_aborts() {
        let p = FieldParams::mersenne61();
        let mut s = session(&[1, 2], 2, 3);
        let ok = FieldVector::zeros(p, 2);
        let short = FieldVector::zeros(p, 1);
        assert!(matches!(
            s.sum(&[(1, ok.clone()), (2, short)]),
            Err(SecAggError::LengthMismatch { client: 2, .. })
        ));
        assert_eq!(
            s.sum(&[(1, ok.clone())]),
            Err(SecAggError::MissingParticipant(2))
        );
        assert_eq!(
            s.sum(&[(1, ok.clone()), (3, ok.clone())]),
            Err(SecAggError::UnknownParticipant(3))
        );
        assert_eq!(
            s.sum(&[(1, ok.clone()), (1, ok)]),
            Err(SecAggError::DuplicateSubmission(1))
        );
    }

    #[test]
    fn scalar_sums() {
        let p = FieldParams::mersenne61();
        let codec = FixedPointCodec::new(p, 16);
        let mut s = session(&[1, 2], 1, 4);
        let out = s
            .sum_scalar(&[
                (1, codec.encode_scalar(0.5).unwrap()),
                (2, codec.encode_scalar(0.25).unwrap()),
            ])
            .unwrap();
        assert_eq!(codec.decode_scalar(out), 0.75);

        let parts: Vec<u64> = (1..=32).collect();
        let mut rng = seed::stream(6, "scales", &[]);
        let scales: Vec<f64> = parts.iter().map(|_| rng.random_range(0.0..3.0)).collect();
        let mut s = session(&parts, 1, 5);
        let inputs: Vec<_> = parts
            .iter()
            .zip(&scales)
            .map(|(&c, &x)| (c, codec.encode_scalar(x).unwrap()))
            .collect();
        let got = codec.decode_scalar(s.sum_scalar(&inputs).unwrap());
        let real: f64 = scales.iter().sum();
        assert!((got - real).abs() <= 32.0 * (-17f64).exp2());

        let mut s = session(&[1, 2, 3], 1, 6);
        let zeros: Vec<_> = (1..=3).map(|c| (c, p.zero())).collect();
        assert_eq!(s.sum_scalar(&zeros).unwrap(), p.zero());
    }

    #[test]
    fn masked_coordinates_look_uniform() {
        // Chi-square over 16 equal-width bins, 15 degrees of freedom, alpha = 0.01.
        const BINS: usize = 16;
        const CRITICAL: f64 = 30.578;
        const SESSIONS: u64 = 3200;
        let p = FieldParams::mersenne61();
        let parts = [1u64, 2, 3];
        let input = FieldVector::from_raw(p, vec![0, 1, MERSENNE_61 - 1]).unwrap();
        let mut hist = vec![[0usize; BINS]; parts.len() * 3];
        for s in 0..SESSIONS {
            let sess = session(&parts, 3, 1000 + s);
            for (ci, &c) in parts.iter().enumerate() {
                let m = sess.mask_submission(c, &input).unwrap();
                for (j, &v) in m.as_slice().iter().enumerate() {
                    let bin = ((v as u128 * BINS as u128) / MERSENNE_61 as u128) as usize;
                    hist[ci * 3 + j][bin] += 1;
                }
            }
        }
        let expected = SESSIONS as f64 / BINS as f64;
        for h in &hist {
            let chi2: f64 = h
                .iter()
                .map(|&o| (o as f64 - expected).powi(2) / expected)
                .sum();
            assert!(chi2 < CRITICAL, "chi2 = {chi2}");
        }
    }
}
