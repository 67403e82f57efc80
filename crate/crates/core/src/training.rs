//! Adam optimization with plateau learning-rate decay and early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, ParamStore};
use crate::channel::{RelayLinks, SnrTriple};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::models::JsccModel;
use crate::protocols::{forward, run_batch};
use crate::tensor::Tensor;

/// How the destination-side SNR γ = SNR_sd = SNR_rd is chosen per batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum GammaMode {
    Fixed { gamma_db: f64 },
    Uniform { low_db: f64, high_db: f64 },
}

impl GammaMode {
    /// U(2, 8) dB, the adaptive training range.
    pub const ADAPTIVE: GammaMode = GammaMode::Uniform {
        low_db: 2.0,
        high_db: 8.0,
    };

    /// Range of γ the trained model is declared valid for.
    pub fn range(&self) -> (f64, f64) {
        match *self {
            GammaMode::Fixed { gamma_db } => (gamma_db, gamma_db),
            GammaMode::Uniform { low_db, high_db } => (low_db, high_db),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.range();
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::config("gamma_mode", format!("invalid γ range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

pub fn sample_gamma<R: Rng + ?Sized>(mode: &GammaMode, rng: &mut R) -> f64 {
    match *mode {
        GammaMode::Fixed { gamma_db } => gamma_db,
        GammaMode::Uniform { low_db, high_db } if low_db == high_db => low_db,
        GammaMode::Uniform { low_db, high_db } => rng.random_range(low_db..high_db),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_decay: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    #[serde(with = "crate::serde_db")]
    pub snr_sr_db: f64,
    pub gamma_mode: GammaMode,
    pub seed: u64,
    /// Caps the optimizer steps per epoch (whole training set when absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            lr_decay: 0.8,
            plateau_patience: 4,
            early_stop_patience: 12,
            max_epochs: 400,
            batch_size: 64,
            snr_sr_db: 12.0,
            gamma_mode: GammaMode::ADAPTIVE,
            seed: 0,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::config("lr_init", "must be positive and finite"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::config("lr_decay", "must lie in (0, 1)"));
        }
        for (field, v) in [
            ("plateau_patience", self.plateau_patience),
            ("early_stop_patience", self.early_stop_patience),
            ("max_epochs", self.max_epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps_per_epoch", "must be positive"));
        }
        if self.snr_sr_db.is_nan() || self.snr_sr_db == f64::NEG_INFINITY {
            return Err(Error::config("snr_sr_db", "must be finite or +inf"));
        }
        self.gamma_mode.validate()
    }

    pub fn links(&self, gamma_db: f64) -> Result<RelayLinks> {
        SnrTriple::with_gamma(self.snr_sr_db, gamma_db)?.links()
    }
}

/// Adam with the canonical moment decay rates and epsilon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads.params() {
            let i = id.0;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(*id).data_mut();
            for (j, &gj) in grad.data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Outcome of feeding one epoch's validation loss to the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    /// Learning rate multiplied by the decay factor.
    Decayed,
    /// Early-stopping patience exhausted or epoch budget used up.
    Stop,
}

/// Plateau decay plus early stopping. Any strictly smaller validation loss
/// counts as an improvement; the plateau counter restarts on improvement
/// and after every decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    lr: f64,
    decay: f64,
    plateau_patience: usize,
    early_stop_patience: usize,
    max_epochs: usize,
    epoch: usize,
    #[serde(with = "crate::serde_db")]
    best: f64,
    since_best: usize,
    since_change: usize,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr_init,
            decay: cfg.lr_decay,
            plateau_patience: cfg.plateau_patience,
            early_stop_patience: cfg.early_stop_patience,
            max_epochs: cfg.max_epochs,
            epoch: 0,
            best: f64::INFINITY,
            since_best: 0,
            since_change: 0,
        }
    }

    /// Learning rate for the next epoch.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> Verdict {
        self.epoch += 1;
        let verdict = if val_loss < self.best {
            self.best = val_loss;
            self.since_best = 0;
            self.since_change = 0;
            Verdict::Improved
        } else {
            self.since_best += 1;
            self.since_change += 1;
            if self.since_best >= self.early_stop_patience {
                return Verdict::Stop;
            }
            if self.since_change >= self.plateau_patience {
                self.lr *= self.decay;
                self.since_change = 0;
                Verdict::Decayed
            } else {
                Verdict::NoImprovement
            }
        };
        if self.epoch >= self.max_epochs {
            Verdict::Stop
        } else {
            verdict
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time: f64,
}

/// Optimizer and schedule state needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub optimizer: Adam,
    pub schedule: PlateauSchedule,
    pub history: Vec<EpochRecord>,
    pub finished: bool,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: ParamStore,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

fn derived_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 16);
    rng.next_u64()
}

const STREAM_TRAIN: u64 = 1;
const STREAM_VALIDATION: u64 = 2;

/// Mean loss over `set` in batches; γ and channel noise come from a stream
/// fixed by `seed`, so repeated calls give identical results.
pub fn evaluate_loss(model: &JsccModel, set: &ImageSet, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, STREAM_VALIDATION, 0));
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(cfg.batch_size) {
        let gamma = sample_gamma(&cfg.gamma_mode, &mut rng);
        let out = run_batch(model, &set.batch(chunk), &cfg.links(gamma)?, rng.next_u64())?;
        total += out.loss * chunk.len() as f64;
    }
    Ok(total / set.len().max(1) as f64)
}

/// One optimizer step on `images`; returns the batch loss.
pub fn train_step(
    model: &mut JsccModel,
    opt: &mut Adam,
    images: &Tensor,
    links: &RelayLinks,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let pass = forward(model, &mut g, x, links, seed)?;
    let loss = g.value(pass.loss).item();
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = g.backward(pass.loss);
    opt.step(&mut model.store, &grads, lr);
    Ok(loss)
}

/// Drives training epoch by epoch; holds everything needed to checkpoint.
pub struct Trainer {
    pub model: JsccModel,
    pub config: TrainConfig,
    pub state: TrainState,
    best: Option<(f64, ParamStore)>,
}

impl Trainer {
    pub fn new(model: JsccModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = TrainState {
            optimizer: Adam::new(model.params()),
            schedule: PlateauSchedule::new(&config),
            history: Vec::new(),
            finished: false,
        };
        Ok(Self {
            model,
            config,
            state,
            best: None,
        })
    }

    /// Continues from saved state; `best` holds the best parameters so far.
    pub fn resume(model: JsccModel, config: TrainConfig, state: TrainState, best: Option<ParamStore>) -> Result<Self> {
        config.validate()?;
        let best_val = state.schedule.best();
        Ok(Self {
            best: best.map(|p| (best_val, p)),
            model,
            config,
            state,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    pub fn best_params(&self) -> Option<(f64, &ParamStore)> {
        self.best.as_ref().map(|(v, p)| (*v, p))
    }

    /// Runs one epoch and the schedule update.
    pub fn run_epoch(&mut self, train: &ImageSet, validation: &ImageSet) -> Result<(EpochRecord, Verdict)> {
        let start = Instant::now();
        let epoch = self.state.schedule.epoch() + 1;
        let lr = self.state.schedule.lr();
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(self.config.seed, STREAM_TRAIN, epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let steps = order.chunks(self.config.batch_size).len();
        let steps = self.config.steps_per_epoch.map_or(steps, |s| s.min(steps));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.config.batch_size).take(steps).enumerate() {
            let gamma = sample_gamma(&self.config.gamma_mode, &mut rng);
            let links = self.config.links(gamma)?;
            let seed = rng.next_u64();
            let loss = train_step(
                &mut self.model,
                &mut self.state.optimizer,
                &train.batch(chunk),
                &links,
                lr,
                seed,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, lr, loss });
            }
            total += loss;
        }
        let val_loss = evaluate_loss(&self.model, validation, &self.config, self.config.seed)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                lr,
                loss: val_loss,
            });
        }
        let improved = val_loss < self.state.schedule.best();
        let verdict = self.state.schedule.observe(val_loss);
        if improved {
            self.best = Some((val_loss, self.model.params().clone()));
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / steps.max(1) as f64,
            val_loss,
            wall_time: start.elapsed().as_secs_f64(),
        };
        self.state.history.push(record.clone());
        self.state.finished = verdict == Verdict::Stop;
        Ok((record, verdict))
    }

    /// Trains to completion; `on_epoch` sees every record (for logging and
    /// checkpointing).
    pub fn run(
        mut self,
        train: &ImageSet,
        validation: &ImageSet,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<(JsccModel, TrainOutcome)> {
        while !self.state.finished {
            let (record, _) = self.run_epoch(train, validation)?;
            on_epoch(&self, &record)?;
        }
        let (best_val_loss, best) = self
            .best
            .take()
            .unwrap_or_else(|| (f64::INFINITY, self.model.params().clone()));
        Ok((
            self.model,
            TrainOutcome {
                best,
                best_val_loss,
                history: self.state.history,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;
    use crate::models::EncoderConfig;
    use crate::protocols::ProtocolSpec;

    fn replay(losses: impl IntoIterator<Item = f64>, cfg: &TrainConfig) -> (Vec<f64>, usize) {
        let mut s = PlateauSchedule::new(cfg);
        let mut lrs = Vec::new();
        for loss in losses {
            lrs.push(s.lr());
            if s.observe(loss) == Verdict::Stop {
                break;
            }
        }
        (lrs, s.epoch())
    }

    #[test]
    fn constant_loss_schedule() {
        let cfg = TrainConfig::default();
        let (lrs, stopped) = replay(std::iter::repeat(1.0), &cfg);
        assert_eq!(stopped, 13);
        let expected: Vec<f64> = [1e-4; 5]
            .into_iter()
            .chain([1e-4 * 0.8; 4])
            .chain([1e-4 * 0.8 * 0.8; 4])
            .collect();
        assert_eq!(lrs, expected);
    }

    #[test]
    fn improving_loss_runs_to_max_epochs_at_constant_lr() {
        let cfg = TrainConfig {
            max_epochs: 25,
            ..TrainConfig::default()
        };
        let (lrs, stopped) = replay((0..).map(|e| 1.0 / (1.0 + e as f64)), &cfg);
        assert_eq!(stopped, 25);
        assert!(lrs.iter().all(|&lr| lr == 1e-4));
    }

    #[test]
    fn improvement_resets_both_counters() {
        let cfg = TrainConfig::default();
        // 3 bad epochs, an improvement, then 3 more: no decay yet
        let losses = [1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5];
        let (lrs, _) = replay(losses, &cfg);
        assert!(lrs.iter().all(|&lr| lr == 1e-4));
        // equal is not an improvement
        let mut s = PlateauSchedule::new(&cfg);
        assert_eq!(s.observe(0.5), Verdict::Improved);
        assert_eq!(s.observe(0.5), Verdict::NoImprovement);
    }

    #[test]
    fn gamma_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_gamma(&GammaMode::Fixed { gamma_db: 3.0 }, &mut rng), 3.0);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_gamma(&GammaMode::ADAPTIVE, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 5.0).abs() < 0.05, "{mean}");
        assert!(draws.iter().all(|&g| (2.0..=8.0).contains(&g)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr_decay: 1.0, ..TrainConfig::default() },
            TrainConfig { plateau_patience: 0, ..TrainConfig::default() },
            TrainConfig { snr_sr_db: f64::NAN, ..TrainConfig::default() },
            TrainConfig {
                gamma_mode: GammaMode::Uniform { low_db: 8.0, high_db: 2.0 },
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut opt = Adam::new(&store);
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let target = g.constant(Tensor::zeros(&[2]));
        let loss = g.mse(p, target);
        let grads = g.backward(loss);
        opt.step(&mut store, &grads, 0.1);
        // bias-corrected first step is lr·sign(grad)
        let d = store.get(id).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6);
    }

    fn tiny() -> (JsccModel, ImageSet, ImageSet, TrainConfig) {
        let mut c = EncoderConfig::for_cpp([3, 8, 8], 0.125, 1, 4).unwrap();
        c.blocks_per_stage = 1;
        let model = JsccModel::new(c, ProtocolSpec::pf(), 3).unwrap();
        let data = synthetic(12, [3, 8, 8], 9);
        let (train, val) = data.split_validation(4, 0).unwrap();
        let cfg = TrainConfig {
            lr_init: 1e-2,
            max_epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        (model, train, val, cfg)
    }

    #[test]
    fn training_is_deterministic_and_tracks_best() {
        let run = || {
            let (model, train, val, cfg) = tiny();
            Trainer::new(model, cfg).unwrap().run(&train, &val, |_, _| Ok(())).unwrap().1
        };
        let (a, b) = (run(), run());
        let strip = |h: &[EpochRecord]| h.iter().map(|r| (r.lr, r.train_loss, r.val_loss)).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
        assert_eq!(a.history.len(), 3);
        assert!(a.history.iter().all(|r| a.best_val_loss <= r.val_loss));
        assert!(a.history.windows(2).all(|w| w[1].lr <= w[0].lr));
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let (model, train, val, cfg) = tiny();
        let mut trainer = Trainer::new(model, cfg).unwrap();
        for id in trainer.model.params().ids().collect::<Vec<_>>() {
            trainer.model.params_mut().get_mut(id).data_mut().fill(f64::NAN);
        }
        let err = trainer.run_epoch(&train, &val).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0, .. }), "{err}");
    }
}
