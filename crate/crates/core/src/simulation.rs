//! Monte-Carlo checks of the channel model: empirical combined SNR under
//! MRC and the noise variance of the AF relay path.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::channel::{
    awgn_link_with, effective_af_noise_var, mrc_combine, normalize_power, sample_noise, snr_linear_to_db, ComplexSignal,
    RelayLinks,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MrcReport {
    pub trials: usize,
    /// SNR of the direct branch alone.
    pub direct_snr_db: f64,
    /// SNR of the AF relay branch alone.
    pub relay_snr_db: f64,
    /// `α_sd²/N_d + (βα_rdα_sr)²/N_eff`.
    pub analytic_snr_db: f64,
    /// `1 / mean|z̃ − z|²` over the trials.
    pub measured_snr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AfNoiseReport {
    pub trials: usize,
    pub analytic_var: f64,
    pub measured_var: f64,
}

impl AfNoiseReport {
    pub fn relative_error(&self) -> f64 {
        (self.measured_var - self.analytic_var).abs() / self.analytic_var
    }
}

fn unit_symbols(rng: &mut ChaCha8Rng, n: usize) -> Result<ComplexSignal> {
    normalize_power(&ComplexSignal::new(sample_noise(rng, n, 1.0)))
}

fn ratio_db(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        f64::INFINITY
    } else {
        snr_linear_to_db(signal / noise)
    }
}

fn check_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(Error::config("trials", "must be positive"));
    }
    Ok(())
}

/// Sends `trials` unit-power symbols over both branches and MRC-combines them.
pub fn simulate_mrc(links: &RelayLinks, trials: usize, seed: u64) -> Result<MrcReport> {
    check_trials(trials)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = unit_symbols(&mut rng, trials)?;
    let y_sd = awgn_link_with(&z, &links.sd, &mut rng);
    let y_sr = awgn_link_with(&z, &links.sr, &mut rng);
    let y_rd = awgn_link_with(&y_sr.scaled(links.af_beta()), &links.rd, &mut rng);
    let est = mrc_combine(&y_sd, &y_rd, links)?;
    let err: f64 = est
        .symbols()
        .iter()
        .zip(z.symbols())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        / trials as f64;
    let relay_gain = links.af_beta() * links.rd.alpha * links.sr.alpha;
    let n_eff = effective_af_noise_var(links);
    let direct = links.sd.alpha * links.sd.alpha / links.sd.noise_var;
    let relay = relay_gain * relay_gain / n_eff;
    Ok(MrcReport {
        trials,
        direct_snr_db: snr_linear_to_db(direct),
        relay_snr_db: snr_linear_to_db(relay),
        analytic_snr_db: snr_linear_to_db(direct + relay),
        measured_snr_db: ratio_db(1.0, err),
    })
}

/// Measures the variance of `y_rd − βα_rdα_sr·z` on the AF relay path.
pub fn simulate_af_noise(links: &RelayLinks, trials: usize, seed: u64) -> Result<AfNoiseReport> {
    check_trials(trials)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = unit_symbols(&mut rng, trials)?;
    let beta = links.af_beta();
    let y_sr = awgn_link_with(&z, &links.sr, &mut rng);
    let y_rd = awgn_link_with(&y_sr.scaled(beta), &links.rd, &mut rng);
    let gain = beta * links.rd.alpha * links.sr.alpha;
    let residual: Vec<Complex64> = y_rd
        .symbols()
        .iter()
        .zip(z.symbols())
        .map(|(y, s)| y - s * gain)
        .collect();
    let measured_var = residual.iter().map(|r| r.norm_sqr()).sum::<f64>() / trials as f64;
    Ok(AfNoiseReport {
        trials,
        analytic_var: effective_af_noise_var(links),
        measured_var,
    })
}
