use clap::{Args, ValueEnum};
use relay_jscc::channel::snr_db_to_linear;
use relay_jscc::serde_db::format_db;
use relay_jscc::simulation::{simulate_af_noise, simulate_mrc};
use relay_jscc::SnrTriple;

use crate::{count_arg, db_arg, CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Check {
    /// Measured vs analytic SNR after maximum-ratio combining.
    Mrc,
    /// Measured vs closed-form noise variance of the AF relay path.
    AfNoise,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub verify: Check,
    /// Channel symbols to simulate (`1e6` accepted).
    #[arg(long, value_parser = count_arg, default_value = "1000000")]
    pub trials: usize,
    /// Source–relay SNR in dB; `inf` makes the link noiseless.
    #[arg(long, value_parser = db_arg, default_value = "inf")]
    pub snr_sr: f64,
    /// Source–destination and relay–destination SNR γ in dB.
    #[arg(long, value_parser = db_arg, default_value = "5")]
    pub gamma: f64,
    /// Relay–destination SNR in dB, when it differs from γ.
    #[arg(long, value_parser = db_arg)]
    pub snr_rd: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Allowed relative deviation of the measurement.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

fn relative(measured: f64, analytic: f64) -> f64 {
    if measured == analytic {
        0.0
    } else {
        (measured - analytic).abs() / analytic.abs()
    }
}

pub fn run(a: SimulateArgs) -> CliResult<()> {
    let triple = SnrTriple::new(a.snr_sr, a.gamma, a.snr_rd.unwrap_or(a.gamma))?;
    let links = triple.links()?;
    println!(
        "links: SNR_sr {} dB{}, SNR_sd {} dB, SNR_rd {} dB; {} symbols, seed {}",
        format_db(a.snr_sr),
        if links.sr.is_noiseless() { " (noiseless)" } else { "" },
        format_db(a.gamma),
        format_db(a.snr_rd.unwrap_or(a.gamma)),
        a.trials,
        a.seed
    );
    let (err, tol) = match a.verify {
        Check::Mrc => {
            let r = simulate_mrc(&links, a.trials, a.seed)?;
            println!("direct branch SNR    {:>10.4} dB", r.direct_snr_db);
            println!("relay branch SNR     {:>10.4} dB", r.relay_snr_db);
            println!("analytic MRC SNR     {:>10.4} dB", r.analytic_snr_db);
            println!("measured MRC SNR     {:>10.4} dB", r.measured_snr_db);
            println!("gain over direct     {:>10.4} dB", r.measured_snr_db - r.direct_snr_db);
            let err = relative(snr_db_to_linear(r.measured_snr_db), snr_db_to_linear(r.analytic_snr_db));
            (err, a.tolerance.unwrap_or(0.02))
        }
        Check::AfNoise => {
            let r = simulate_af_noise(&links, a.trials, a.seed)?;
            println!("analytic variance    {:>12.6e}", r.analytic_var);
            println!("measured variance    {:>12.6e}", r.measured_var);
            (relative(r.measured_var, r.analytic_var), a.tolerance.unwrap_or(0.01))
        }
    };
    println!("relative deviation   {:>12.6e} (tolerance {tol})", err);
    if err <= tol {
        println!("PASS");
        Ok(())
    } else {
        Err(CliError::Runtime(format!("measurement deviates by {err:.3e}, above {tol}")))
    }
}
