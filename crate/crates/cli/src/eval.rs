use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use relay_jscc::evaluation::{self, CommandCodec, SweepOptions};
use relay_jscc::report;
use relay_jscc::{Checkpoint, EvalRecord, RunConfig, SeparationBudget};

use crate::rundir::CONFIG_FILE;
use crate::{db_arg, CliError, CliResult};

pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    pub checkpoint: PathBuf,
    /// Run configuration; defaults to the config.toml beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// γ values in dB, e.g. `0,2,4,6,8`.
    #[arg(long, value_delimiter = ',', value_parser = db_arg)]
    pub gamma_list: Option<Vec<f64>>,
    /// Source–relay SNR in dB (`inf` for a noiseless link); defaults to the training value.
    #[arg(long, value_parser = db_arg)]
    pub snr_sr: Option<f64>,
    /// Evaluate a seeded subset of this many test images.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Seed of the channel noise and the subset; defaults to the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Dataset root (overrides the config and $RELAY_JSCC_DATA).
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Output directory; defaults to `eval/` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also run the separation baseline with this codec: `bpg`, or a TOML
    /// file describing encode/decode command templates.
    #[arg(long)]
    pub codec: Option<String>,
}

fn load_codec(spec: &str) -> CliResult<CommandCodec> {
    let codec = if spec == "bpg" {
        CommandCodec::bpg()
    } else {
        let text = fs::read_to_string(spec).map_err(|e| CliError::Usage(format!("cannot read codec file {spec}: {e}")))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid codec file {spec}: {e}")))?
    };
    Ok(codec.probe()?)
}

fn model_id(checkpoint: &Path) -> String {
    let file = checkpoint.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    match checkpoint.parent().and_then(Path::file_name) {
        Some(dir) => format!("{}/{file}", dir.to_string_lossy()),
        None => file,
    }
}

pub fn run(a: EvalArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).map_err(|e| {
        CliError::Runtime(format!("cannot load checkpoint {}: {e}", a.checkpoint.display()))
    })?;
    let beside = a.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    let config_path = a.config.clone().unwrap_or_else(|| beside.join(CONFIG_FILE));
    if !config_path.exists() {
        return Err(CliError::Usage(format!(
            "no run configuration at {}; pass --config",
            config_path.display()
        )));
    }
    let mut cfg = RunConfig::load(&config_path)?;
    if a.data_root.is_some() {
        cfg.dataset.root = a.data_root.clone();
    }
    ckpt.verify(&cfg.encoder, &cfg.protocol)?;
    let model = ckpt.to_model()?;
    let train_cfg = ckpt.train_config.clone().unwrap_or_else(|| cfg.train.clone());

    let gammas = a.gamma_list.clone().unwrap_or_else(|| cfg.eval.gamma_list.clone());
    let snr_sr = a.snr_sr.unwrap_or(train_cfg.snr_sr_db);
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let subset = a.subset.or(cfg.eval.subset);
    let batch_size = a.batch_size.unwrap_or(cfg.eval.batch_size);
    let out = a.out.clone().unwrap_or_else(|| beside.join("eval"));
    let codec = a.codec.as_deref().map(load_codec).transpose()?;

    let test = cfg.load_splits()?.test;
    let test = match subset {
        Some(n) if n > test.len() => {
            return Err(CliError::Usage(format!("--subset {n} exceeds the {} test images", test.len())))
        }
        Some(n) => test.subset(n, seed),
        None => test,
    };
    let opts = SweepOptions {
        batch_size,
        model_id: model_id(&a.checkpoint),
        trained_gamma: Some(train_cfg.gamma_mode.range()),
    };
    let mut records: Vec<EvalRecord> = evaluation::sweep(&model, snr_sr, &gammas, &test, seed, &opts)?;
    if let Some(codec) = &codec {
        let k = ckpt.encoder.channel_uses();
        for &gamma in &gammas {
            let budget = SeparationBudget::new(gamma, k);
            let (mut rec, _) = evaluation::separation_baseline(&test, &budget, codec, snr_sr)?;
            rec.seed = seed;
            if rec.overflow.unwrap_or(0) > 0 {
                log::warn!(
                    "γ = {gamma} dB: {} of {} images exceed the {}-bit budget",
                    rec.overflow.unwrap_or(0),
                    rec.n_images,
                    budget.bit_budget
                );
            }
            records.push(rec);
        }
    }
    fs::create_dir_all(&out)?;
    evaluation::write_records(&out.join(RECORDS_FILE), &records)?;
    report::emit(&records, &out)?;
    for r in &records {
        println!(
            "{:<16} SNR_sr {:>4} dB  γ {:>5} dB  PSNR {:>7.3} dB  SSIM {:.4}{}",
            r.label(),
            relay_jscc::serde_db::format_db(r.snr_sr_db),
            r.gamma_db,
            r.psnr_db,
            r.ssim,
            if r.in_training_range { "" } else { "  (outside training range)" }
        );
    }
    println!("{} records on {} images written to {}", records.len(), test.len(), out.display());
    Ok(())
}
