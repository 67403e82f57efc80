use std::fs;
use std::path::PathBuf;

use clap::Args;
use relay_jscc::config::DatasetSource;
use relay_jscc::training::{EpochRecord, Trainer};
use relay_jscc::{Checkpoint, GammaMode, JsccModel, ProtocolKind, ProtocolSpec, RunConfig};

use crate::rundir::{self, RunDir, BEST_CKPT, CONFIG_FILE, LAST_CKPT};
use crate::{db_arg, download, CliError, CliResult};

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Run configuration (TOML). Optional with --resume, which reads the
    /// run's own snapshot.
    pub config: Option<PathBuf>,
    /// af, df, pf or noncoop.
    #[arg(long)]
    pub protocol: Option<ProtocolKind>,
    /// DF loss weight λ.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Source–relay SNR in dB (`inf` for a noiseless link).
    #[arg(long, value_parser = db_arg)]
    pub snr_sr: Option<f64>,
    /// Train at one fixed γ (dB).
    #[arg(long, value_parser = db_arg, conflicts_with = "gamma_range")]
    pub gamma: Option<f64>,
    /// Train with γ ~ U(low, high), written `low,high`.
    #[arg(long, value_parser = gamma_range)]
    pub gamma_range: Option<(f64, f64)>,
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on a seeded subset of this many images.
    #[arg(long)]
    pub train_subset: Option<usize>,
    /// Dataset root (overrides the file and $RELAY_JSCC_DATA).
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Parent of the timestamped run directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Exact run directory instead of a timestamped one.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Continue the run in --run-dir from its last checkpoint.
    #[arg(long, requires = "run_dir")]
    pub resume: bool,
    /// Fetch CIFAR-10 into the dataset root if it is missing.
    #[arg(long)]
    pub download: bool,
}

fn gamma_range(s: &str) -> Result<(f64, f64), String> {
    match crate::db_list(s)?.as_slice() {
        &[lo, hi] => Ok((lo, hi)),
        _ => Err(format!("expected `low,high`, got `{s}`")),
    }
}

/// Applies command-line overrides on top of `cfg`.
pub fn apply_overrides(cfg: &mut RunConfig, a: &TrainArgs) -> CliResult<()> {
    if let Some(kind) = a.protocol {
        let lambda = match kind {
            ProtocolKind::Df => a.lambda.or(cfg.protocol.lambda),
            _ => a.lambda,
        };
        cfg.protocol = ProtocolSpec {
            kind,
            lambda,
            ..cfg.protocol.clone()
        };
    } else if a.lambda.is_some() {
        cfg.protocol.lambda = a.lambda;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.snr_sr {
        t.snr_sr_db = v;
    }
    if let Some(g) = a.gamma {
        t.gamma_mode = GammaMode::Fixed { gamma_db: g };
    }
    if let Some((low_db, high_db)) = a.gamma_range {
        t.gamma_mode = GammaMode::Uniform { low_db, high_db };
    }
    if let Some(v) = a.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if a.steps_per_epoch.is_some() {
        t.steps_per_epoch = a.steps_per_epoch;
    }
    if let Some(v) = a.lr {
        t.lr_init = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if a.train_subset.is_some() {
        cfg.dataset.train_subset = a.train_subset;
    }
    if a.data_root.is_some() {
        cfg.dataset.root = a.data_root.clone();
    }
    if let Some(d) = &a.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.validate()?;
    Ok(())
}

/// Lines of `b` that differ from `a`, as a readable report.
fn snapshot_diff(a: &str, b: &str) -> String {
    let (la, lb): (Vec<_>, Vec<_>) = (a.lines().collect(), b.lines().collect());
    let mut out = Vec::new();
    for l in &la {
        if !lb.contains(l) {
            out.push(format!("- {l}"));
        }
    }
    for l in &lb {
        if !la.contains(l) {
            out.push(format!("+ {l}"));
        }
    }
    out.join("\n")
}

pub fn run(a: TrainArgs) -> CliResult<()> {
    let snapshot = match (&a.run_dir, a.resume) {
        (Some(dir), true) => Some(RunConfig::load(&dir.join(CONFIG_FILE))?),
        _ => None,
    };
    let mut cfg = match (&a.config, &snapshot) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(s)) => s.clone(),
        (None, None) => return Err(CliError::Usage("a config file is required unless resuming".into())),
    };
    apply_overrides(&mut cfg, &a)?;
    if let Some(s) = &snapshot {
        if *s != cfg {
            return Err(CliError::Usage(format!(
                "the resolved configuration differs from the run's snapshot:\n{}",
                snapshot_diff(&s.to_toml(), &cfg.to_toml())
            )));
        }
    }
    if a.download && cfg.dataset.source == DatasetSource::Cifar10 {
        download::ensure_cifar10(&cfg.dataset_root()?)?;
    }
    let splits = cfg.load_splits()?;
    let dir = a
        .run_dir
        .clone()
        .unwrap_or_else(|| rundir::timestamped(&cfg.output_dir, &cfg.protocol.kind.name().to_ascii_lowercase()));
    let run = RunDir::open(&dir, a.resume)?;
    let trainer = if a.resume && run.file(LAST_CKPT).exists() {
        let ckpt = Checkpoint::load(&run.file(LAST_CKPT))?;
        ckpt.verify(&cfg.encoder, &cfg.protocol)?;
        let state = ckpt
            .train_state
            .clone()
            .ok_or_else(|| CliError::Runtime(format!("{} holds no training state", run.file(LAST_CKPT).display())))?;
        run.truncate_log(state.history.len())?;
        log::info!("resuming {} after epoch {}", dir.display(), state.history.len());
        Trainer::resume(ckpt.to_model()?, cfg.train.clone(), state, ckpt.best_store()?)?
    } else {
        fs::write(run.file(CONFIG_FILE), cfg.to_toml())?;
        run.truncate_log(0)?;
        let model = JsccModel::new(cfg.encoder.clone(), cfg.protocol.clone(), cfg.train.seed)?;
        Trainer::new(model, cfg.train.clone())?
    };
    println!(
        "training {} on {} images ({} validation) in {}",
        cfg.protocol.label(),
        splits.train.len(),
        splits.validation.len(),
        run.path().display()
    );
    let mut best_saved = trainer.best_params().map_or(f64::INFINITY, |b| b.0);
    let on_epoch = |t: &Trainer, rec: &EpochRecord| -> relay_jscc::Result<()> {
        run.log_epoch(rec)?;
        if let Some((loss, params)) = t.best_params() {
            if loss < best_saved {
                let mut best = t.model.clone();
                *best.params_mut() = params.clone();
                let mut ckpt = Checkpoint::from_model(&best);
                ckpt.train_config = Some(t.config.clone());
                ckpt.save(&run.file(BEST_CKPT))?;
                best_saved = loss;
            }
        }
        Checkpoint::from_model(&t.model)
            .with_training(&t.config, &t.state, t.best_params().map(|b| b.1))
            .save(&run.file(LAST_CKPT))?;
        println!(
            "epoch {:>4}  lr {:.3e}  train {:.6}  val {:.6}  ({:.1} s)",
            rec.epoch, rec.lr, rec.train_loss, rec.val_loss, rec.wall_time
        );
        Ok(())
    };
    if trainer.is_finished() {
        println!("run already finished");
        return Ok(());
    }
    let (_, outcome) = trainer.run(&splits.train, &splits.validation, on_epoch)?;
    println!(
        "finished after {} epochs; best validation loss {:.6}; checkpoints in {}",
        outcome.history.len(),
        outcome.best_val_loss,
        run.path().display()
    );
    Ok(())
}
