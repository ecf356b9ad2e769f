//! One-time key establishment: trusted dealer and dealer-free DKG.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, FieldParams, FieldVector, Precision};
use crate::par;
use crate::seed;
use crate::sharing::{
    self, Commitment, ShamirConfig, ShamirShare, SharingError,
};

#[derive(Debug, Error)]
pub enum SetupError {
    #[error("invalid setup configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("key file: {0}")]
    KeyFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Key material kept only in debug runs so tests can check protocol outputs
/// against the plaintext key.
#[derive(Clone, Debug)]
pub struct DebugKey {
    /// The real-valued key (dealer sample, or the sum of DKG contributions).
    pub tau: Vec<f64>,
    /// The field-encoded key that the shares reconstruct to.
    pub tau_enc: FieldVector,
    /// Per-client additive contributions (DKG only).
    pub contributions: Vec<Vec<f64>>,
}

/// Communication and computation accounting for the DKG.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadRecord {
    pub k: usize,
    pub t: usize,
    pub d: usize,
    /// Point-to-point sends over the network; self-deliveries are excluded.
    pub messages: u64,
    /// `messages * d * 8`.
    pub bytes: u64,
    /// Field multiplications performed by one client.
    pub mults_per_client: u64,
    /// Simulated per-client compute time.
    pub compute_ns: f64,
    /// Simulated per-client transfer time at `bandwidth_bps`.
    pub comm_ns: f64,
    pub bandwidth_bps: f64,
}

impl OverheadRecord {
    pub fn compute_comm_ratio(&self) -> f64 {
        self.compute_ns / self.comm_ns
    }

    pub fn total_compute_ns(&self) -> f64 {
        self.compute_ns * self.k as f64
    }

    pub fn total_comm_ns(&self) -> f64 {
        self.comm_ns * self.k as f64
    }

    pub const CSV_HEADER: &'static str = "K,t,d,messages,bytes,compute_ns,comm_ns";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.1},{:.1}",
            self.k, self.t, self.d, self.messages, self.bytes, self.compute_ns, self.comm_ns
        )
    }
}

pub const DEFAULT_BANDWIDTH_BPS: f64 = 1e9;
pub const DEFAULT_FIELD_MUL_NS: f64 = 2.0;

/// Closed-form DKG cost: per-client transfer of `(K-1)` vectors of `d` words
/// and `K * t * d` Horner multiplications.
pub fn dkg_cost_model(
    k: usize,
    t: usize,
    d: usize,
    bandwidth_bps: f64,
    field_mul_ns: f64,
) -> OverheadRecord {
    let messages = (k * k.saturating_sub(1)) as u64;
    let mults = (k * t * d) as u64;
    OverheadRecord {
        k,
        t,
        d,
        messages,
        bytes: messages * d as u64 * 8,
        mults_per_client: mults,
        compute_ns: mults as f64 * field_mul_ns,
        comm_ns: (k.saturating_sub(1) * d * 8 * 8) as f64 / bandwidth_bps * 1e9,
        bandwidth_bps,
    }
}

#[derive(Clone, Debug)]
pub struct SetupResult {
    pub config: ShamirConfig,
    pub d: usize,
    pub precision: Precision,
    /// `shares[i]` belongs to the client at `config.points()[i]`.
    pub shares: Vec<ShamirShare>,
    pub commitment: Option<Commitment>,
    /// Published stand-in for `||tau||_2`.
    pub public_norm: f64,
    pub overhead: Option<OverheadRecord>,
    pub debug: Option<DebugKey>,
}

impl SetupResult {
    pub fn share_of(&self, point: u64) -> Option<&ShamirShare> {
        self.shares.iter().find(|s| s.point == point)
    }

    pub fn key_file(&self, point: u64) -> Option<KeyFile> {
        self.share_of(point).map(|s| KeyFile {
            config: self.config.clone(),
            f_share: self.precision.f_share,
            public_norm: self.public_norm,
            commitment: self.commitment,
            share: s.clone(),
        })
    }
}

/// `sqrt(d)`, the expected norm of a standard normal key.
pub fn public_norm(d: usize) -> f64 {
    (d as f64).sqrt()
}

fn sample_key<R: RngCore + ?Sized>(d: usize, std: f64, clip: f64, rng: &mut R) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (std * z).clamp(-clip, clip)
        })
        .collect()
}

fn check_inputs(cfg: &ShamirConfig, d: usize, precision: &Precision) -> Result<(), SetupError> {
    if d == 0 {
        return Err(SetupError::InvalidConfig("model dimension must be positive".into()));
    }
    if cfg.params() != precision.modulus {
        return Err(SetupError::InvalidConfig(format!(
            "sharing modulus {} differs from codec modulus {}",
            cfg.params().modulus(),
            precision.modulus.modulus()
        )));
    }
    Ok(())
}

/// Dealer samples `tau ~ N(0, I_d)`, commits, shares, and forgets `tau`
/// unless `retain_debug` is set.
pub fn setup_trusted_dealer<R: RngCore + ?Sized>(
    cfg: &ShamirConfig,
    d: usize,
    precision: &Precision,
    rng: &mut R,
    retain_debug: bool,
) -> Result<SetupResult, SetupError> {
    check_inputs(cfg, d, precision)?;
    let tau = sample_key(d, 1.0, precision.tau_bound, rng);
    let tau_enc = precision.share_codec().encode(&tau)?;
    let norm = public_norm(d);
    let commitment = sharing::commit(&tau_enc, precision.f_share as u16, norm, rng);
    let shares = sharing::shamir_share(&tau_enc, cfg, rng)?;
    let debug = retain_debug.then(|| DebugKey {
        tau,
        tau_enc,
        contributions: Vec::new(),
    });
    Ok(SetupResult {
        config: cfg.clone(),
        d,
        precision: *precision,
        shares,
        commitment: Some(commitment),
        public_norm: norm,
        overhead: None,
        debug,
    })
}

/// Dealer-free setup. Client `k` draws `w_k ~ N(0, I_d / K)` and its
/// polynomial from its own stream keyed by `(master_seed, k)`.
pub fn setup_dkg(
    cfg: &ShamirConfig,
    d: usize,
    precision: &Precision,
    master_seed: u64,
    retain_debug: bool,
) -> Result<SetupResult, SetupError> {
    check_inputs(cfg, d, precision)?;
    let std = (cfg.k() as f64).recip().sqrt();
    let contributions: Vec<Vec<f64>> = par::map(cfg.points(), |&x| {
        let mut rng = seed::stream(master_seed, "dkg-contribution", &[x]);
        sample_key(d, std, precision.tau_bound, &mut rng)
    });
    setup_dkg_with_contributions(cfg, precision, contributions, master_seed, retain_debug)
}

/// DKG with caller-chosen additive contributions (one per configured point).
pub fn setup_dkg_with_contributions(
    cfg: &ShamirConfig,
    precision: &Precision,
    contributions: Vec<Vec<f64>>,
    master_seed: u64,
    retain_debug: bool,
) -> Result<SetupResult, SetupError> {
    if contributions.len() != cfg.k() {
        return Err(SetupError::InvalidConfig(format!(
            "{} contributions for {} clients",
            contributions.len(),
            cfg.k()
        )));
    }
    let d = contributions.first().map_or(0, Vec::len);
    check_inputs(cfg, d, precision)?;
    let codec = precision.share_codec();
    let encoded = contributions
        .iter()
        .map(|w| codec.encode(w))
        .collect::<Result<Vec<_>, _>>()?;
    let params = cfg.params();
    let q = params.modulus();
    let coeffs: Vec<Vec<FieldVector>> = par::map(cfg.points(), |&x| {
        let mut rng = seed::stream(master_seed, "dkg-polynomial", &[x]);
        (1..cfg.t())
            .map(|_| {
                let elems = (0..d).map(|_| rand::Rng::random_range(&mut rng, 0..q)).collect();
                FieldVector::from_raw(params, elems).expect("sampled below q")
            })
            .collect()
    });
    let (shares, traffic) = dkg_exchange(cfg, &encoded, &coeffs)?;

    let debug = if retain_debug {
        let mut tau_enc = FieldVector::zeros(params, d);
        for e in &encoded {
            tau_enc.add_assign(e)?;
        }
        let tau = (0..d)
            .map(|j| contributions.iter().map(|w| w[j]).sum())
            .collect();
        Some(DebugKey {
            tau,
            tau_enc,
            contributions,
        })
    } else {
        None
    };

    let k = cfg.k();
    let mut overhead = dkg_cost_model(k, cfg.t(), d, DEFAULT_BANDWIDTH_BPS, DEFAULT_FIELD_MUL_NS);
    // Horner on a degree-(t-1) polynomial costs t-1 multiplications per point and coordinate.
    overhead.mults_per_client = (k * (cfg.t() - 1) * d) as u64;
    overhead.compute_ns = overhead.mults_per_client as f64 * DEFAULT_FIELD_MUL_NS;
    overhead.messages = traffic.messages;
    overhead.bytes = traffic.bytes;

    Ok(SetupResult {
        config: cfg.clone(),
        d,
        precision: *precision,
        shares,
        commitment: None,
        public_norm: public_norm(d),
        overhead: Some(overhead),
        debug,
    })
}

/// Traffic observed while simulating the DKG exchange.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExchangeStats {
    pub messages: u64,
    pub bytes: u64,
}

/// The exchange round of the DKG: client `k` evaluates `P_k` (constant term
/// `contributions[k]`, higher coefficients `coeffs[k]`) at every point, and
/// client `i` sums what it receives.
pub fn dkg_deal(
    cfg: &ShamirConfig,
    contributions: &[FieldVector],
    coeffs: &[Vec<FieldVector>],
) -> Result<Vec<ShamirShare>, SetupError> {
    dkg_exchange(cfg, contributions, coeffs).map(|(s, _)| s)
}

/// [`dkg_deal`] that also counts point-to-point sends (a dealer keeps its own evaluation).
pub fn dkg_exchange(
    cfg: &ShamirConfig,
    contributions: &[FieldVector],
    coeffs: &[Vec<FieldVector>],
) -> Result<(Vec<ShamirShare>, ExchangeStats), SetupError> {
    if contributions.len() != cfg.k() || coeffs.len() != cfg.k() {
        return Err(SetupError::InvalidConfig(
            "one contribution and one coefficient set per client required".into(),
        ));
    }
    let d = contributions[0].len();
    let per_dealer = contributions
        .iter()
        .zip(coeffs)
        .map(|(w, c)| sharing::shamir_share_with_coeffs(w, cfg, c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut shares: Vec<ShamirShare> = cfg
        .points()
        .iter()
        .map(|&x| ShamirShare {
            point: x,
            share: FieldVector::zeros(cfg.params(), d),
        })
        .collect();
    let mut stats = ExchangeStats::default();
    for (dealer, dealt) in per_dealer.iter().enumerate() {
        for (recipient, (acc, s)) in shares.iter_mut().zip(dealt).enumerate() {
            if recipient != dealer {
                stats.messages += 1;
                stats.bytes += 8 * s.share.len() as u64;
            }
            acc.share.add_assign(&s.share)?;
        }
    }
    Ok((shares, stats))
}

const KEY_MAGIC: &[u8; 8] = b"TWMKEY01";

/// Per-client key material: public sharing parameters plus one share.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyFile {
    pub config: ShamirConfig,
    pub f_share: u32,
    pub public_norm: f64,
    pub commitment: Option<Commitment>,
    pub share: ShamirShare,
}

impl KeyFile {
    /// Layout (little-endian): magic, q u64, f_share u16, t u32, K u32,
    /// K points u64, public_norm f64, commitment flag u8 [+ nonce 32 + digest 32],
    /// share point u64, share vector (length-prefixed words).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(KEY_MAGIC);
        out.extend_from_slice(&self.config.params().modulus().to_le_bytes());
        out.extend_from_slice(&(self.f_share as u16).to_le_bytes());
        out.extend_from_slice(&(self.config.t() as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.k() as u32).to_le_bytes());
        for x in self.config.points() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.public_norm.to_le_bytes());
        match &self.commitment {
            Some(c) => {
                out.push(1);
                out.extend_from_slice(&c.nonce);
                out.extend_from_slice(&c.digest);
            }
            None => out.push(0),
        }
        out.extend_from_slice(&self.share.point.to_le_bytes());
        self.share.share.write_bytes(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SetupError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != KEY_MAGIC {
            return Err(SetupError::KeyFile("bad magic".into()));
        }
        let q = cur.u64()?;
        let params = FieldParams::new(q)?;
        let f_share = cur.u16()? as u32;
        let t = cur.u32()? as usize;
        let k = cur.u32()? as usize;
        let points = (0..k).map(|_| cur.u64()).collect::<Result<Vec<_>, _>>()?;
        let config = ShamirConfig::with_points(t, points, params)?;
        let public_norm = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let commitment = match cur.take(1)?[0] {
            0 => None,
            1 => Some(Commitment {
                nonce: cur.take(32)?.try_into().unwrap(),
                digest: cur.take(32)?.try_into().unwrap(),
            }),
            f => return Err(SetupError::KeyFile(format!("bad commitment flag {f}"))),
        };
        let point = cur.u64()?;
        if !config.contains(point) {
            return Err(SharingError::UnknownPoint(point).into());
        }
        let (share, used) = FieldVector::from_bytes(params, &bytes[cur.pos..])?;
        if cur.pos + used != bytes.len() {
            return Err(SetupError::KeyFile("trailing bytes".into()));
        }
        Ok(Self {
            config,
            f_share,
            public_norm,
            commitment,
            share: ShamirShare { point, share },
        })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), SetupError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, SetupError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SetupError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| SetupError::KeyFile("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, SetupError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, SetupError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16, SetupError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}
