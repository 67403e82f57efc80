use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relay_jscc::evaluation::read_records;
use relay_jscc::{Checkpoint, ProtocolKind, RunConfig};

const TINY: &str = r#"
output_dir = "runs"

[protocol]
kind = "df"
lambda = 1.0

[encoder]
image_dims = [3, 16, 16]
cpp = 0.125
c_feat = 8
c_out = 3
n_downsample = 1
blocks_per_stage = 1

[train]
lr_init = 1e-3
lr_decay = 0.8
plateau_patience = 4
early_stop_patience = 12
max_epochs = 2
batch_size = 8
snr_sr_db = inf
seed = 5
steps_per_epoch = 2
gamma_mode = { mode = "uniform", low_db = 2.0, high_db = 8.0 }

[dataset]
source = "synthetic"
validation_size = 8
synthetic_train = 40
synthetic_test = 12

[eval]
gamma_list = [2.0, 8.0]
batch_size = 4
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_relay-jscc"));
    c.env_remove("RELAY_JSCC_DATA");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn train(dir: &Path, run_dir: &Path, extra: &[&str]) -> Output {
    let cfg = write_config(dir, TINY);
    run(bin().arg("train").arg(&cfg).arg("--run-dir").arg(run_dir).args(extra))
}

#[test]
fn train_writes_snapshot_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("r1");
    let out = train(dir.path(), &run_dir, &["--protocol", "pf", "--snr-sr", "12"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let snapshot = RunConfig::load(&run_dir.join("config.toml")).unwrap();
    assert_eq!(snapshot.protocol.kind, ProtocolKind::Pf);
    assert_eq!(snapshot.protocol.lambda, None);
    assert_eq!(snapshot.train.snr_sr_db, 12.0);
    let log = fs::read_to_string(run_dir.join("epochs.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for name in ["best.ckpt.json", "last.ckpt.json"] {
        let ckpt = Checkpoint::load(&run_dir.join(name)).unwrap();
        ckpt.verify(&snapshot.encoder, &snapshot.protocol).unwrap();
    }
    assert!(!run_dir.join(".lock").exists());
}

#[test]
fn timestamped_run_directory_under_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let runs = dir.path().join("runs");
    let out = run(bin().arg("train").arg(&cfg).arg("--output-dir").arg(&runs).args(["--epochs", "1"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let entries: Vec<_> = fs::read_dir(&runs).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries.len(), 1);
    let name = entries[0].to_string_lossy().into_owned();
    assert!(name.starts_with("df-") && name.ends_with('Z'), "{name}");
}

#[test]
fn rerun_into_same_directory_needs_resume() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("r");
    assert_eq!(code(&train(dir.path(), &run_dir, &[])), 0);
    let first_log = fs::read_to_string(run_dir.join("epochs.jsonl")).unwrap();

    let again = train(dir.path(), &run_dir, &[]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--resume"), "{}", stderr(&again));

    let changed = train(dir.path(), &run_dir, &["--resume", "--lr", "0.5"]);
    assert_eq!(code(&changed), 1);
    assert!(stderr(&changed).contains("lr_init"), "{}", stderr(&changed));

    let resumed = train(dir.path(), &run_dir, &["--resume"]);
    assert_eq!(code(&resumed), 0, "{}", stderr(&resumed));
    assert!(stdout(&resumed).contains("already finished"));
    assert_eq!(fs::read_to_string(run_dir.join("epochs.jsonl")).unwrap(), first_log);
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("r");
    fs::create_dir_all(&run_dir).unwrap();
    fs::write(run_dir.join(".lock"), "4242\n").unwrap();
    let out = train(dir.path(), &run_dir, &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("locked by process 4242"), "{}", stderr(&out));
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cifar = TINY
        .replace("source = \"synthetic\"", "source = \"cifar10\"")
        .replace("image_dims = [3, 16, 16]", "image_dims = [3, 32, 32]");
    let cfg = write_config(dir.path(), &cifar);
    let out = run(bin().arg("train").arg(&cfg).arg("--run-dir").arg(dir.path().join("r")));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("dataset.root"), "{}", stderr(&out));
    assert!(!dir.path().join("r").exists());

    let cfg = write_config(dir.path(), &TINY.replace("seed = 5", "seed = 5\nwarmup = 3"));
    let out = run(bin().arg("train").arg(&cfg));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("warmup"), "{}", stderr(&out));

    let out = run(bin().args(["train", "--no-such-flag"]));
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_is_deterministic_and_honours_sweep_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("r");
    assert_eq!(code(&train(dir.path(), &run_dir, &["--epochs", "1"])), 0);
    let ckpt = run_dir.join("best.ckpt.json");
    let eval = |out: &Path| {
        run(bin()
            .arg("eval")
            .arg(&ckpt)
            .args(["--gamma-list", "0,4,8", "--snr-sr", "inf", "--subset", "6", "--seed", "11", "--out"])
            .arg(out))
    };
    let (a, b) = (dir.path().join("ea"), dir.path().join("eb"));
    for out in [&a, &b] {
        let o = eval(out);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let records = read_records(&a.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 3);
    for (r, g) in records.iter().zip([0.0, 4.0, 8.0]) {
        assert_eq!(r.gamma_db, g);
        assert_eq!(r.n_images, 6);
        assert_eq!(r.seed, 11);
        assert_eq!(r.snr_sr_db, f64::INFINITY);
        assert_eq!(r.in_training_range, g >= 2.0);
    }
    for f in ["records.jsonl", "psnr_table.csv", "ssim_table.csv", "psnr_vs_gamma.svg", "ssim_vs_gamma.svg"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    let plots = dir.path().join("plots");
    let o = run(bin().arg("plot").arg(&a).arg("--out").arg(&plots));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(plots.join("psnr_table.csv")).unwrap(),
        fs::read(a.join("psnr_table.csv")).unwrap()
    );
}

#[test]
fn eval_defaults_come_from_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("r");
    assert_eq!(code(&train(dir.path(), &run_dir, &["--epochs", "1"])), 0);
    let o = run(bin().arg("eval").arg(run_dir.join("last.ckpt.json")));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records = read_records(&run_dir.join("eval/records.jsonl")).unwrap();
    assert_eq!(records.iter().map(|r| r.gamma_db).collect::<Vec<_>>(), vec![2.0, 8.0]);
    assert!(records.iter().all(|r| r.n_images == 12 && r.seed == 5 && r.protocol == "df"));
}

#[test]
fn eval_with_separation_codec() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("r");
    assert_eq!(code(&train(dir.path(), &run_dir, &["--epochs", "1"])), 0);
    let codec = dir.path().join("copy.toml");
    fs::write(
        &codec,
        "name = \"png-copy\"\nencode = [\"cp\", \"{input}\", \"{output}\"]\n\
         decode = [\"cp\", \"{input}\", \"{output}\"]\nlevels = [0]\nversion = \"9.9\"\n",
    )
    .unwrap();
    let out = dir.path().join("e");
    let o = run(bin()
        .arg("eval")
        .arg(run_dir.join("best.ckpt.json"))
        .args(["--gamma-list", "8", "--codec"])
        .arg(&codec)
        .arg("--out")
        .arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records = read_records(&out.join("records.jsonl")).unwrap();
    let sep = records.iter().find(|r| r.protocol == "separation").expect("separation record");
    // k = 96 symbols: floor(192·log2(1 + 10^0.8))
    assert_eq!(sep.bit_budget, Some(550));
    assert_eq!(sep.codec.as_deref(), Some("png-copy (9.9)"));
    assert!(sep.overflow.is_some());

    fs::write(&codec, "name = \"gone\"\nencode = [\"no-such-codec-binary\"]\ndecode = [\"no-such-codec-binary\"]\nlevels = [0]\n").unwrap();
    let o = run(bin().arg("eval").arg(run_dir.join("best.ckpt.json")).arg("--codec").arg(&codec));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn eval_rejects_bad_checkpoint_path() {
    let o = run(bin().args(["eval", "/nonexistent/best.ckpt.json"]));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/best.ckpt.json"), "{}", stderr(&o));
}

#[test]
fn simulate_checks_channel_model() {
    let o = run(bin().args(["simulate", "--verify", "mrc", "--trials", "1e6", "--gamma", "3"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("(noiseless)") && text.contains("PASS"), "{text}");
    let o = run(bin().args(["simulate", "--verify", "af-noise", "--snr-sr", "4", "--gamma", "0", "--snr-rd", "9"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(bin().args(["simulate", "--verify", "af-noise", "--snr-sr", "4", "--trials", "100", "--tolerance", "1e-9"]));
    assert_eq!(code(&o), 2);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 2);
}

#[test]
fn synthetic_smoke_config_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic_smoke.toml");
    let run_dir = dir.path().join("smoke");
    let o = run(bin()
        .arg("train")
        .arg(&cfg)
        .args(["--epochs", "1", "--steps-per-epoch", "2", "--train-subset", "64", "--run-dir"])
        .arg(&run_dir));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(bin().arg("eval").arg(run_dir.join("best.ckpt.json")).args(["--subset", "16", "--gamma-list", "8"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("PF"), "{}", stdout(&o));
}
