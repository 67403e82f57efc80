//! Acceptance suite: one PASS / FAIL / IGNORED line per criterion.
//!
//! Runs as a plain program (`harness = false`) so the lines always reach the
//! terminal. Positional arguments select criteria by number, e.g.
//! `cargo test --release --test acceptance -- 1 7`.
//!
//! Criteria 10 and 11 need CIFAR-10 under `$RELAY_JSCC_DATA` and hours of
//! training; they run only with `RELAY_JSCC_LONG=1`. The codec half of
//! criterion 9 needs `bpgenc`/`bpgdec` on `PATH` as well as CIFAR-10.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relay_jscc::autograd::Graph;
use relay_jscc::channel::{effective_af_noise_var, mrc_weights, LinkConfig, RelayLinks};
use relay_jscc::config::DATA_ENV;
use relay_jscc::data::{ingest_cifar10, resolve_root, synthetic, Cifar10};
use relay_jscc::evaluation::{separation_baseline, sweep, write_records, CommandCodec, SweepOptions};
use relay_jscc::metrics::psnr;
use relay_jscc::protocols::{forward, run_batch};
use relay_jscc::simulation::{simulate_af_noise, simulate_mrc};
use relay_jscc::training::{train_step, Adam, PlateauSchedule, Trainer, Verdict};
use relay_jscc::{
    EncoderConfig, GammaMode, ImageSet, JsccModel, ProtocolSpec, SeparationBudget, SnrTriple, Tensor, TrainConfig,
};

enum Outcome {
    Pass(String),
    Fail(String),
    Ignored(String),
}

type Check = fn() -> Outcome;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn noiseless() -> RelayLinks {
    let n = LinkConfig::noiseless(1.0);
    RelayLinks { sr: n, sd: n, rd: n }
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        blocks_per_stage: 1,
        ..EncoderConfig::for_cpp([3, 16, 16], 0.125, 1, 6).unwrap()
    }
}

fn all_protocols() -> Vec<ProtocolSpec> {
    vec![
        ProtocolSpec::af(),
        ProtocolSpec::df(0.0),
        ProtocolSpec::df(1.0),
        ProtocolSpec::pf(),
        ProtocolSpec::noncoop(),
    ]
}

fn cifar() -> Option<Cifar10> {
    let root = resolve_root(None, DATA_ENV)?;
    ingest_cifar10(&root).ok()
}

/// Variance-minimizing unbiased weights found by golden-section search over
/// the relay weight `t`, with `w_sd = (1 − t·g)/α_sd`.
fn searched_weights(links: &RelayLinks) -> (f64, f64) {
    let a = links.sd.alpha;
    let g = links.af_beta() * links.rd.alpha * links.sr.alpha;
    let n_d = links.sd.noise_var;
    let n_eff = effective_af_noise_var(links);
    let var = |t: f64| {
        let w_sd = (1.0 - t * g) / a;
        w_sd * w_sd * n_d + t * t * n_eff
    };
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0, 1.0 / g);
    for _ in 0..200 {
        let m1 = hi - phi * (hi - lo);
        let m2 = lo + phi * (hi - lo);
        if var(m1) <= var(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let t = 0.5 * (lo + hi);
    ((1.0 - t * g) / a, t)
}

fn random_link(rng: &mut ChaCha8Rng) -> LinkConfig {
    let alpha = rng.random_range(0.2..2.0);
    let noise = 10f64.powf(rng.random_range(-2.0..1.0));
    LinkConfig::new(alpha, noise).unwrap()
}

fn c1_mrc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let links = RelayLinks {
            sr: random_link(&mut rng),
            sd: random_link(&mut rng),
            rd: random_link(&mut rng),
        };
        let w = mrc_weights(&links).unwrap();
        let (sd, rd) = searched_weights(&links);
        let err = ((w.sd - sd).abs() / sd.abs().max(1.0)).max((w.rd - rd).abs() / rd.abs().max(1.0));
        worst = worst.max(err);
    }
    let t0 = Instant::now();
    let equal = SnrTriple::with_gamma(f64::INFINITY, 5.0).unwrap().links().unwrap();
    let r = simulate_mrc(&equal, 1_000_000, 2).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let gain = r.measured_snr_db - r.direct_snr_db;
    verdict(
        worst <= 1e-6 && (gain - 3.01).abs() <= 0.1 && secs < 10.0,
        format!(
            "1000 configs, max weight error {worst:.2e} (tol 1e-6); equal-branch gain {gain:.4} dB (3.01 ± 0.1) over 10^6 symbols in {secs:.2} s (< 10 s)"
        ),
    )
}

fn c2_af_noise() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let links = RelayLinks {
            sr: random_link(&mut rng),
            sd: random_link(&mut rng),
            rd: random_link(&mut rng),
        };
        let r = simulate_af_noise(&links, 1_000_000, 100 + i).unwrap();
        worst = worst.max(r.relative_error());
    }
    verdict(
        worst <= 0.01,
        format!("20 configs × 10^6 symbols, max relative variance error {worst:.2e} (tol 1e-2)"),
    )
}

fn c3_power() -> Outcome {
    let cfg = tiny_config();
    let protocols = all_protocols();
    let models: Vec<JsccModel> = protocols
        .iter()
        .map(|p| JsccModel::new(cfg.clone(), p.clone(), 3).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut blocks): (f64, usize) = (0.0, 0);
    for batch in 0..100 {
        let model = &models[batch % models.len()];
        let n = rng.random_range(1..5);
        let images = Tensor::from_vec(&[n, 3, 16, 16], (0..n * 768).map(|_| rng.random::<f64>()).collect());
        let sr = if rng.random_bool(0.2) { f64::INFINITY } else { rng.random_range(-5.0..25.0) };
        let links = SnrTriple::with_gamma(sr, rng.random_range(-5.0..20.0)).unwrap().links().unwrap();
        let mut g = Graph::new();
        let x = g.constant(images);
        let pass = forward(model, &mut g, x, &links, batch as u64).unwrap();
        for cw in pass.codewords {
            let t = g.value(cw);
            let k = t.per_item() / 2;
            for i in 0..t.batch() {
                let p = t.item_slice(i).iter().map(|v| v * v).sum::<f64>() / k as f64;
                worst = worst.max((p - 1.0).abs());
                blocks += 1;
            }
        }
    }
    verdict(
        worst <= 1e-5,
        format!("{blocks} codewords over 100 batches of AF/DF/PF/NONCOOP, max |P − 1| {worst:.2e} (tol 1e-5)"),
    )
}

fn c4_bandwidth() -> Outcome {
    let cfg = EncoderConfig::cifar10();
    let model = JsccModel::new(cfg.clone(), ProtocolSpec::noncoop(), 0).unwrap();
    let images = synthetic(1, [3, 32, 32], 0).to_tensor();
    let symbols = model.encode(&images, &noiseless()).unwrap()[0].len();
    verdict(
        cfg.channel_uses() == 384 && cfg.c_out == 12 && symbols == 384,
        format!("ρ = 0.125 on 3×32×32: k = {}, C_out = {}, encoded symbols = {symbols} (expect 384, 12, 384)", cfg.channel_uses(), cfg.c_out),
    )
}

fn c5_gradients() -> Outcome {
    const STEP: f64 = 1e-3;
    let links = SnrTriple::new(10.0, 5.0, 7.0).unwrap().links().unwrap();
    let images = synthetic(2, [3, 16, 16], 4).to_tensor();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for spec in all_protocols() {
        let mut model = JsccModel::new(tiny_config(), spec.clone(), 5).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let pass = forward(&model, &mut g, x, &links, 9).unwrap();
        let grads = g.backward(pass.loss);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut picked = 0;
        let mut tries = 0;
        while picked < 5 {
            tries += 1;
            assert!(tries < 1000, "no parameters with a usable gradient for {}", spec.label());
            let (id, grad) = &grads.params()[rng.random_range(0..grads.params().len())];
            let i = rng.random_range(0..grad.len());
            let analytic = grad.data()[i];
            if analytic.abs() < 1e-6 {
                continue;
            }
            let orig = model.params().get(*id).data()[i];
            let mut loss_at = |v: f64| {
                model.params_mut().get_mut(*id).data_mut()[i] = v;
                run_batch(&model, &images, &links, 9).unwrap().loss
            };
            let numeric = (loss_at(orig + STEP) - loss_at(orig - STEP)) / (2.0 * STEP);
            model.params_mut().get_mut(*id).data_mut()[i] = orig;
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            worst = worst.max(rel);
            picked += 1;
            checked += 1;
        }
    }
    verdict(
        worst <= 1e-3,
        format!("AF, DF(λ=0), DF(λ=1), PF, NONCOOP: {checked} parameters, central differences h = {STEP}, max relative error {worst:.2e} (tol 1e-3)"),
    )
}

fn c6_lambda() -> Outcome {
    let links = SnrTriple::new(8.0, 3.0, 6.0).unwrap().links().unwrap();
    let images = synthetic(3, [3, 16, 16], 7).to_tensor();
    let base = JsccModel::new(tiny_config(), ProtocolSpec::df(0.0), 8).unwrap();
    let reference = run_batch(&base, &images, &links, 21).unwrap();
    let relay_mse = reference.relay_loss.expect("DF reports the relay loss");
    let mut worst: f64 = 0.0;
    for lambda in [0.5, 1.0, 2.0] {
        let mut m = JsccModel::new(tiny_config(), ProtocolSpec::df(lambda), 8).unwrap();
        *m.params_mut() = base.params().clone();
        let out = run_batch(&m, &images, &links, 21).unwrap();
        worst = worst.max((out.loss - reference.loss - lambda * relay_mse).abs());
    }
    verdict(
        worst <= 1e-6,
        format!("λ ∈ {{0.5, 1, 2}}: max |L(λ) − L(0) − λ·MSE(S, S̃_r)| = {worst:.2e} (tol 1e-6)"),
    )
}

fn c7_overfit() -> Outcome {
    let (images, source) = match cifar() {
        Some(c) => (c.train.take(8).to_tensor(), "CIFAR-10"),
        None => (synthetic(8, [3, 32, 32], 5).to_tensor(), "synthetic (CIFAR-10 absent)"),
    };
    let cfg = EncoderConfig {
        blocks_per_stage: 1,
        ..EncoderConfig::for_cpp([3, 32, 32], 0.125, 2, 32).unwrap()
    };
    let links = noiseless();
    let mut parts = Vec::new();
    let mut ok = true;
    for spec in [ProtocolSpec::af(), ProtocolSpec::df(1.0), ProtocolSpec::pf(), ProtocolSpec::noncoop()] {
        let t0 = Instant::now();
        let mut model = JsccModel::new(cfg.clone(), spec.clone(), 1).unwrap();
        let mut opt = Adam::new(model.params());
        for step in 0..300 {
            train_step(&mut model, &mut opt, &images, &links, 1e-3, step).unwrap();
        }
        let out = run_batch(&model, &images, &links, 0).unwrap();
        let p = psnr(&images, &out.reconstruction.clamp(0.0, 1.0)).unwrap();
        ok &= p > 30.0;
        parts.push(format!("{} {p:.2} dB ({:.0} s)", spec.label(), t0.elapsed().as_secs_f64()));
    }
    verdict(
        ok,
        format!("8 {source} images, noiseless links, 300 Adam steps (C_feat 32, lr 1e-3): {} (need > 30 dB)", parts.join(", ")),
    )
}

fn replay(losses: impl IntoIterator<Item = f64>) -> (Vec<f64>, usize) {
    let mut s = PlateauSchedule::new(&TrainConfig::default());
    let mut lrs = Vec::new();
    for loss in losses {
        lrs.push(s.lr());
        if s.observe(loss) == Verdict::Stop {
            break;
        }
    }
    (lrs, s.epoch())
}

fn c8_schedule() -> Outcome {
    let runs = |spec: &[(f64, usize)]| spec.iter().flat_map(|&(lr, n)| std::iter::repeat_n(lr, n)).collect::<Vec<_>>();
    let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-18);
    // flat trace: best at epoch 1, drops after epochs 5 and 9, stop at 13
    let (flat, flat_stop) = replay(std::iter::repeat(1.0));
    let flat_ok = close(&flat, &runs(&[(1e-4, 5), (8e-5, 4), (6.4e-5, 4)])) && flat_stop == 13;
    // improves through epoch 3: drops after 7 and 11, stop at 15
    let (late, late_stop) = replay([3.0, 2.0, 1.0].into_iter().chain(std::iter::repeat(1.0)));
    let late_ok = close(&late, &runs(&[(1e-4, 7), (8e-5, 4), (6.4e-5, 4)])) && late_stop == 15;
    // always improving: constant rate until the epoch cap
    let (down, down_stop) = replay((0..1000).map(|i| 1.0 / (1.0 + i as f64)));
    let down_ok = close(&down, &runs(&[(1e-4, 400)])) && down_stop == 400;
    verdict(
        flat_ok && late_ok && down_ok,
        format!(
            "flat trace stops at {flat_stop} (13), late plateau at {late_stop} (15), improving at {down_stop} (400); LR sequences {}",
            if flat_ok && late_ok && down_ok { "exact" } else { "differ" }
        ),
    )
}

fn c9a_budget() -> Outcome {
    // floor(2k·log2(1 + 10^(γ/10))) for k = 384
    let expected = [(0.0, 768), (2.0, 1052), (4.0, 1391), (6.0, 1779), (8.0, 2203)];
    let got: Vec<u64> = expected.iter().map(|&(g, _)| SeparationBudget::new(g, 384).bit_budget).collect();
    verdict(
        expected.iter().zip(&got).all(|(e, g)| e.1 == *g),
        format!("k = 384, γ = 0..8 dB: {got:?} (expect [768, 1052, 1391, 1779, 2203])"),
    )
}

fn c9b_codec() -> Outcome {
    let codec = match CommandCodec::bpg().probe() {
        Ok(c) => c,
        Err(e) => return Outcome::Ignored(format!("{e}")),
    };
    let Some(data) = cifar() else {
        return Outcome::Ignored(format!("CIFAR-10 not found under ${DATA_ENV}"));
    };
    let test = data.test.subset(512, 0);
    let budget = SeparationBudget::new(8.0, 384);
    let (rec, _) = separation_baseline(&test, &budget, &codec, 12.0).unwrap();
    let overflow = rec.overflow.unwrap_or(0);
    verdict(
        overflow as f64 <= 0.05 * 512.0,
        format!("{}: {overflow}/512 images over the 2203-bit budget (≤ 25 allowed); PSNR {:.3} dB", rec.codec.unwrap_or_default(), rec.psnr_db),
    )
}

fn long_runs_enabled() -> Result<Cifar10, String> {
    if std::env::var("RELAY_JSCC_LONG").as_deref() != Ok("1") {
        return Err("long run; set RELAY_JSCC_LONG=1 with CIFAR-10 under $RELAY_JSCC_DATA".into());
    }
    cifar().ok_or_else(|| format!("CIFAR-10 not found under ${DATA_ENV}"))
}

fn train_full(spec: ProtocolSpec, cfg: TrainConfig, train: &ImageSet, val: &ImageSet) -> (JsccModel, f64) {
    let model = JsccModel::new(EncoderConfig::cifar10(), spec, cfg.seed).unwrap();
    let trainer = Trainer::new(model, cfg).unwrap();
    let (mut model, outcome) = trainer.run(train, val, |_, _| Ok(())).unwrap();
    *model.params_mut() = outcome.best;
    (model, outcome.best_val_loss)
}

fn c10_trend() -> Outcome {
    let data = match long_runs_enabled() {
        Ok(d) => d,
        Err(why) => return Outcome::Ignored(why),
    };
    let (train, val) = data.train_validation(0).unwrap();
    let train = train.subset(5000, 0);
    let cfg = TrainConfig {
        max_epochs: 30,
        snr_sr_db: 12.0,
        gamma_mode: GammaMode::ADAPTIVE,
        ..TrainConfig::default()
    };
    let gammas = [0.0, 2.0, 4.0, 6.0, 8.0];
    let mut results = Vec::new();
    for spec in [ProtocolSpec::pf(), ProtocolSpec::df(0.0), ProtocolSpec::af(), ProtocolSpec::noncoop()] {
        let (model, val_loss) = train_full(spec.clone(), cfg.clone(), &train, &val);
        let recs = sweep(&model, 12.0, &gammas, &data.test, 0, &SweepOptions::default()).unwrap();
        results.push((spec, val_loss, recs.iter().map(|r| r.psnr_db).collect::<Vec<_>>()));
    }
    let (pf, df0) = (results[0].1, results[1].1);
    let a = (pf - df0).abs() / pf.min(df0) <= 0.05;
    let noncoop_8 = results[3].2[4];
    let b = results[..3].iter().all(|r| r.2[4] >= noncoop_8 + 0.2);
    let c = results.iter().all(|r| r.2.windows(2).all(|w| w[1] >= w[0] - 0.1));
    let psnr8: Vec<String> = results.iter().map(|r| format!("{} {:.2}", r.0.label(), r.2[4])).collect();
    verdict(
        a && b && c,
        format!(
            "(a) val PF {pf:.5} vs DF(λ=0) {df0:.5} {}; (b) PSNR@8 dB {} {}; (c) monotone in γ {}",
            if a { "ok" } else { "FAIL" },
            psnr8.join(", "),
            if b { "ok" } else { "FAIL" },
            if c { "ok" } else { "FAIL" }
        ),
    )
}

fn c11_full() -> Outcome {
    let data = match long_runs_enabled() {
        Ok(d) => d,
        Err(why) => return Outcome::Ignored(why),
    };
    let (train, val) = data.train_validation(0).unwrap();
    let cfg = TrainConfig {
        snr_sr_db: 12.0,
        ..TrainConfig::default()
    };
    let (model, _) = train_full(ProtocolSpec::df(1.0), cfg, &train, &val);
    let rec = sweep(&model, 12.0, &[8.0], &data.test, 0, &SweepOptions::default()).unwrap().remove(0);
    verdict(
        (rec.psnr_db - 31.511).abs() <= 0.3 && (rec.ssim - 0.9580).abs() <= 0.005,
        format!("DF(λ=1), SNR_sr 12 dB, γ 8 dB: PSNR {:.3} (31.511 ± 0.3), SSIM {:.4} (0.9580 ± 0.005)", rec.psnr_db, rec.ssim),
    )
}

fn c12_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let model = JsccModel::new(tiny_config(), ProtocolSpec::df(1.0), 12).unwrap();
    let test = synthetic(10, [3, 16, 16], 13);
    let opts = SweepOptions {
        batch_size: 4,
        model_id: "acceptance".into(),
        trained_gamma: Some((2.0, 8.0)),
    };
    let write = |name: &str, seed: u64| -> PathBuf {
        let recs = sweep(&model, 12.0, &[0.0, 4.0, 8.0], &test, seed, &opts).unwrap();
        let path = dir.path().join(name);
        write_records(&path, &recs).unwrap();
        path
    };
    let a = std::fs::read(write("a.jsonl", 7)).unwrap();
    let b = std::fs::read(write("b.jsonl", 7)).unwrap();
    let c = std::fs::read(write("c.jsonl", 8)).unwrap();
    verdict(
        a == b && a != c,
        format!(
            "two seeded sweeps give {} record files ({} bytes); a different seed gives {} output",
            if a == b { "byte-identical" } else { "different" },
            a.len(),
            if a != c { "different" } else { "the same" }
        ),
    )
}

const CRITERIA: &[(&str, &str, Check)] = &[
    ("1", "MRC oracle", c1_mrc_oracle),
    ("2", "AF effective noise", c2_af_noise),
    ("3", "power constraint", c3_power),
    ("4", "bandwidth identity", c4_bandwidth),
    ("5", "gradient checks", c5_gradients),
    ("6", "λ algebra", c6_lambda),
    ("7", "overfit smoke test", c7_overfit),
    ("8", "schedule oracle", c8_schedule),
    ("9a", "separation budget", c9a_budget),
    ("9b", "separation codec fit", c9b_codec),
    ("10", "desk-scale trend check", c10_trend),
    ("11", "full-scale DF(λ=1) targets", c11_full),
    ("12", "determinism", c12_determinism),
];

fn main() -> ExitCode {
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut failed, mut passed, mut ignored) = (0, 0, 0);
    for (id, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.iter().any(|s| s == id || id.trim_end_matches(['a', 'b']) == s) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => {
                passed += 1;
                ("PASS", d)
            }
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Ignored(d) => {
                ignored += 1;
                ("IGNORED", d)
            }
        };
        println!("{tag:<7} [{id:>3}] {name}: {detail}");
    }
    println!("acceptance: {passed} passed, {failed} failed, {ignored} ignored");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
