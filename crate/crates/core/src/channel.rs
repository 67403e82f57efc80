//! Half-duplex relay channel model.
//!
//! Three complex AWGN links connect source, relay and destination:
//!
//! ```text
//!   y_sr = α_sr·x_s + n_r        (relay-receive period, at the relay)
//!   y_sd = α_sd·x_s + n_d        (relay-receive period, at the destination)
//!   y_rd = α_rd·z_r + n_rd       (relay-transmit period, at the destination)
//! ```
//!
//! Complex noise of variance `N` puts `N/2` on each real component. A link
//! with `noise_var == 0` is noiseless (infinite SNR) and passes `α·x` through
//! unchanged.
//!
//! Neural encoders emit real vectors; consecutive pairs are the real and
//! imaginary parts of one channel symbol (see [`ComplexSignal::from_packed`]).

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper clamp for SNR values fed to the networks as conditioning, in dB.
pub const DEFAULT_SNR_CLAMP_DB: f64 = 40.0;

pub fn snr_db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn snr_linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// A block of `k` complex channel symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSignal {
    symbols: Vec<Complex64>,
}

impl ComplexSignal {
    pub fn new(symbols: Vec<Complex64>) -> Self {
        Self { symbols }
    }

    /// Pairs consecutive reals `(re, im)` into symbols. Errors on odd length.
    pub fn from_packed(reals: &[f64]) -> Result<Self> {
        if !reals.len().is_multiple_of(2) {
            return Err(Error::shape("an even number of reals", reals.len()));
        }
        Ok(Self {
            symbols: reals
                .chunks_exact(2)
                .map(|p| Complex64::new(p[0], p[1]))
                .collect(),
        })
    }

    /// Inverse of [`ComplexSignal::from_packed`].
    pub fn to_packed(&self) -> Vec<f64> {
        self.symbols.iter().flat_map(|s| [s.re, s.im]).collect()
    }

    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    /// Number of channel uses `k`.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// `(1/k)·Σ|s_i|²`.
    pub fn average_power(&self) -> f64 {
        if self.symbols.is_empty() {
            return 0.0;
        }
        self.symbols.iter().map(Complex64::norm_sqr).sum::<f64>() / self.symbols.len() as f64
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            symbols: self.symbols.iter().map(|s| s * factor).collect(),
        }
    }

    /// Elementwise difference, used to isolate noise in tests and tools.
    pub fn sub(&self, other: &ComplexSignal) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::shape(self.len(), other.len()));
        }
        Ok(Self {
            symbols: self
                .symbols
                .iter()
                .zip(&other.symbols)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }
}

/// Scales a block to unit average symbol power.
pub fn normalize_power(signal: &ComplexSignal) -> Result<ComplexSignal> {
    let p = signal.average_power();
    if p == 0.0 || !p.is_finite() {
        return Err(Error::DegenerateSignal { index: 0 });
    }
    Ok(signal.scaled(p.sqrt().recip()))
}

/// Gain and noise of one point-to-point link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    /// Real path gain α.
    pub alpha: f64,
    /// Complex noise variance N; zero marks a noiseless link.
    pub noise_var: f64,
}

impl LinkConfig {
    /// A noisy link; `noise_var` must be positive.
    pub fn new(alpha: f64, noise_var: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::config("alpha", format!("must be finite and non-negative, got {alpha}")));
        }
        if !(noise_var.is_finite() && noise_var > 0.0) {
            return Err(Error::config(
                "noise_var",
                format!("must be finite and positive, got {noise_var}"),
            ));
        }
        Ok(Self { alpha, noise_var })
    }

    /// A link without noise (SNR = ∞).
    pub fn noiseless(alpha: f64) -> Self {
        Self {
            alpha,
            noise_var: 0.0,
        }
    }

    /// Unit gain with the noise variance that yields `snr_db`;
    /// `+∞` gives a noiseless link.
    pub fn from_snr_db(snr_db: f64) -> Result<Self> {
        if snr_db == f64::INFINITY {
            return Ok(Self::noiseless(1.0));
        }
        if !snr_db.is_finite() {
            return Err(Error::config("snr_db", format!("must be finite or +inf, got {snr_db}")));
        }
        Self::new(1.0, 1.0 / snr_db_to_linear(snr_db))
    }

    pub fn is_noiseless(&self) -> bool {
        self.noise_var == 0.0
    }

    /// `α²/N`; infinite for a noiseless link.
    pub fn snr_linear(&self) -> f64 {
        if self.is_noiseless() {
            f64::INFINITY
        } else {
            self.alpha * self.alpha / self.noise_var
        }
    }

    pub fn snr_db(&self) -> f64 {
        snr_linear_to_db(self.snr_linear())
    }
}

/// SNRs of the three links in dB, the conditioning input of every network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrTriple {
    #[serde(with = "crate::serde_db")]
    pub sr_db: f64,
    pub sd_db: f64,
    pub rd_db: f64,
}

impl SnrTriple {
    /// Validates finiteness; only `sr_db` may be `+∞`.
    pub fn new(sr_db: f64, sd_db: f64, rd_db: f64) -> Result<Self> {
        if sr_db.is_nan() || sr_db == f64::NEG_INFINITY {
            return Err(Error::config("snr_sr_db", format!("must be finite or +inf, got {sr_db}")));
        }
        for (name, v) in [("snr_sd_db", sd_db), ("snr_rd_db", rd_db)] {
            if !v.is_finite() {
                return Err(Error::config(name, format!("must be finite, got {v}")));
            }
        }
        Ok(Self { sr_db, sd_db, rd_db })
    }

    /// The evaluation setting `SNR_sd = SNR_rd = γ`.
    pub fn with_gamma(sr_db: f64, gamma_db: f64) -> Result<Self> {
        Self::new(sr_db, gamma_db, gamma_db)
    }

    /// Unit-gain links realizing these SNRs.
    pub fn links(&self) -> Result<RelayLinks> {
        Ok(RelayLinks {
            sr: LinkConfig::from_snr_db(self.sr_db)?,
            sd: LinkConfig::from_snr_db(self.sd_db)?,
            rd: LinkConfig::from_snr_db(self.rd_db)?,
        })
    }
}

/// The three links of the relay channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelayLinks {
    pub sr: LinkConfig,
    pub sd: LinkConfig,
    pub rd: LinkConfig,
}

impl RelayLinks {
    /// SNRs in `[sr, sd, rd]` order, each clamped to `[-clamp, clamp]` dB.
    pub fn conditioning(&self, clamp_db: f64) -> [f64; 3] {
        [self.sr, self.sd, self.rd].map(|l| {
            let db = l.snr_db();
            if db.is_nan() {
                -clamp_db
            } else {
                db.clamp(-clamp_db, clamp_db)
            }
        })
    }

    /// AF relay gain β for the S–R link of this configuration.
    pub fn af_beta(&self) -> f64 {
        af_beta(&self.sr)
    }
}

/// Coefficients of the linear MRC estimate `z̃ = w_sd·y_sd + w_rd·y_rd`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MrcWeights {
    pub sd: f64,
    pub rd: f64,
}

/// `β = (α_sr² + N_r)^(-1/2)`. A relay that receives nothing (α_sr = N_r = 0)
/// forwards nothing, so β is reported as 0 in that case.
pub fn af_beta(link_sr: &LinkConfig) -> f64 {
    let energy = link_sr.alpha * link_sr.alpha + link_sr.noise_var;
    if energy == 0.0 {
        0.0
    } else {
        energy.sqrt().recip()
    }
}

/// Circularly-symmetric complex Gaussian samples with total variance `noise_var`.
pub fn sample_noise<R: rand::Rng + ?Sized>(rng: &mut R, len: usize, noise_var: f64) -> Vec<Complex64> {
    let sigma = (noise_var / 2.0).sqrt();
    (0..len)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(sigma * re, sigma * im)
        })
        .collect()
}

/// `α·x + n` with noise drawn from `rng`. Noiseless links draw nothing.
pub fn awgn_link_with<R: rand::Rng + ?Sized>(x: &ComplexSignal, link: &LinkConfig, rng: &mut R) -> ComplexSignal {
    if link.is_noiseless() {
        return x.scaled(link.alpha);
    }
    let noise = sample_noise(rng, x.len(), link.noise_var);
    ComplexSignal::new(
        x.symbols
            .iter()
            .zip(noise)
            .map(|(s, n)| s * link.alpha + n)
            .collect(),
    )
}

/// `α·x + n`, deterministic in `seed`.
pub fn awgn_link(x: &ComplexSignal, link: &LinkConfig, seed: u64) -> ComplexSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    awgn_link_with(x, link, &mut rng)
}

/// Amplify-and-forward scaling `z_r = β·y_sr`.
pub fn af_scale(y_sr: &ComplexSignal, link_sr: &LinkConfig) -> ComplexSignal {
    y_sr.scaled(af_beta(link_sr))
}

/// Variance of the end-to-end noise on the AF relay path,
/// `N_d + N_r·α_rd²/(α_sr² + N_r)`.
pub fn effective_af_noise_var(links: &RelayLinks) -> f64 {
    let beta = links.af_beta();
    links.rd.noise_var + beta * beta * links.rd.alpha * links.rd.alpha * links.sr.noise_var
}

/// Maximum-ratio-combining coefficients for the direct and AF relay branches.
///
/// The estimate is unbiased: `w_sd·α_sd + w_rd·β·α_rd·α_sr = 1`. When both
/// branches are noiseless the noise ratio is taken as 1 (the limit of equal
/// vanishing noise), so the weights become proportional to the branch gains.
pub fn mrc_weights(links: &RelayLinks) -> Result<MrcWeights> {
    let beta = links.af_beta();
    let a_sd = links.sd.alpha;
    let relay_gain = beta * links.rd.alpha * links.sr.alpha;
    let n_d = links.sd.noise_var;
    let n_eff = effective_af_noise_var(links);
    let (num_sd, num_rd, denom) = if n_d == 0.0 && n_eff == 0.0 {
        (a_sd, relay_gain, a_sd * a_sd + relay_gain * relay_gain)
    } else {
        (
            n_eff * a_sd,
            n_d * relay_gain,
            n_d * relay_gain * relay_gain + a_sd * a_sd * n_eff,
        )
    };
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::config(
            "links",
            "MRC denominator is zero: no branch carries the source signal",
        ));
    }
    Ok(MrcWeights {
        sd: num_sd / denom,
        rd: num_rd / denom,
    })
}

/// Combines the direct observation `y_sd` and the AF relay observation `y_rd`
/// into the MRC estimate of the source codeword.
pub fn mrc_combine(y_sd: &ComplexSignal, y_rd: &ComplexSignal, links: &RelayLinks) -> Result<ComplexSignal> {
    if y_sd.len() != y_rd.len() {
        return Err(Error::shape(y_sd.len(), y_rd.len()));
    }
    let w = mrc_weights(links)?;
    Ok(ComplexSignal::new(
        y_sd.symbols
            .iter()
            .zip(&y_rd.symbols)
            .map(|(a, b)| a * w.sd + b * w.rd)
            .collect(),
    ))
}
