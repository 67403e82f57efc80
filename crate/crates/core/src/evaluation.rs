//! SNR sweeps, the separation (compress-then-transmit) baseline and
//! line-delimited evaluation records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::SnrTriple;
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::metrics::{psnr_from_mse, ssim_per_image, mse_per_image, PSNR_SENTINEL_DB};
use crate::models::JsccModel;
use crate::protocols::run_batch;
use crate::tensor::Tensor;

pub const SEPARATION: &str = "separation";

/// One sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    /// `af`, `df`, `pf`, `noncoop` or `separation`.
    pub protocol: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(with = "crate::serde_db")]
    pub snr_sr_db: f64,
    pub gamma_db: f64,
    /// Mean per-image PSNR, each capped at the sentinel.
    pub psnr_db: f64,
    /// Mean SSIM, clipped to `[0, 1]`.
    pub ssim: f64,
    pub n_images: usize,
    pub seed: u64,
    pub model_id: String,
    /// False when γ lies outside the range the model was trained on.
    pub in_training_range: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codec: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bit_budget: Option<u64>,
    /// Images that did not fit the budget at any codec quality.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overflow: Option<usize>,
}

impl EvalRecord {
    /// Column label used by tables and plot legends.
    pub fn label(&self) -> String {
        match self.lambda {
            Some(l) => format!("{}(lambda={l})", self.protocol.to_uppercase()),
            None => self.protocol.to_uppercase(),
        }
    }
}

/// Per-pair PSNR (capped) and SSIM, summarized as record means.
fn score(reference: &Tensor, reconstruction: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let psnr = mse_per_image(reference, reconstruction)?
        .into_iter()
        .map(|m| psnr_from_mse(m).min(PSNR_SENTINEL_DB))
        .collect();
    Ok((psnr, ssim_per_image(reference, reconstruction)?))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub batch_size: usize,
    pub model_id: String,
    /// γ range (dB) the model was trained on; points outside are flagged.
    pub trained_gamma: Option<(f64, f64)>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            model_id: String::new(),
            trained_gamma: None,
        }
    }
}

fn sweep_seed(seed: u64, point: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(point as u64 + 1);
    rng.next_u64()
}

/// Evaluates `model` at `SNR_sd = SNR_rd = γ` for every γ in `gammas`.
/// Channel noise for point `j` comes from a stream fixed by `(seed, j)`.
pub fn sweep(
    model: &JsccModel,
    snr_sr_db: f64,
    gammas: &[f64],
    testset: &ImageSet,
    seed: u64,
    opts: &SweepOptions,
) -> Result<Vec<EvalRecord>> {
    if testset.is_empty() {
        return Err(Error::config("testset", "no images to evaluate"));
    }
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let spec = model.protocol();
    let idx: Vec<usize> = (0..testset.len()).collect();
    gammas
        .iter()
        .enumerate()
        .map(|(j, &gamma)| {
            let links = SnrTriple::with_gamma(snr_sr_db, gamma)?.links()?;
            let mut rng = ChaCha8Rng::seed_from_u64(sweep_seed(seed, j));
            let (mut psnr, mut ssim) = (Vec::new(), Vec::new());
            for chunk in idx.chunks(opts.batch_size) {
                let images = testset.batch(chunk);
                let out = run_batch(model, &images, &links, rng.next_u64())?;
                let (p, s) = score(&images, &out.reconstruction.clamp(0.0, 1.0))?;
                psnr.extend(p);
                ssim.extend(s);
            }
            let in_range = opts
                .trained_gamma
                .is_none_or(|(lo, hi)| gamma >= lo - 1e-9 && gamma <= hi + 1e-9);
            if !in_range {
                log::warn!("γ = {gamma} dB lies outside the training range {:?}", opts.trained_gamma);
            }
            Ok(EvalRecord {
                protocol: spec.kind.name().to_ascii_lowercase(),
                lambda: spec.lambda,
                snr_sr_db,
                gamma_db: gamma,
                psnr_db: mean(&psnr),
                ssim: mean(&ssim).clamp(0.0, 1.0),
                n_images: testset.len(),
                seed,
                model_id: opts.model_id.clone(),
                in_training_range: in_range,
                codec: None,
                bit_budget: None,
                overflow: None,
            })
        })
        .collect()
}

/// Capacity-limited bit budget of one image sent over `2k` channel uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationBudget {
    pub gamma_db: f64,
    pub k: usize,
    pub bit_budget: u64,
}

impl SeparationBudget {
    /// `floor(2k·log2(1 + 10^(γ/10)))`.
    pub fn new(gamma_db: f64, k: usize) -> Self {
        let capacity = (1.0 + 10f64.powf(gamma_db / 10.0)).log2();
        let bits = (2.0 * k as f64 * capacity).floor();
        Self {
            gamma_db,
            k,
            bit_budget: if bits.is_finite() && bits > 0.0 { bits as u64 } else { 0 },
        }
    }
}

/// An image compressor operated at discrete quality levels.
pub trait ImageCodec {
    /// Name and version, recorded with the results.
    fn identity(&self) -> String;
    /// Quality levels ordered from the lowest to the highest bit rate.
    fn levels(&self) -> Vec<i64>;
    /// Compresses one 8-bit `[C, H, W]` image.
    fn encode(&self, image: &[u8], dims: [usize; 3], level: i64) -> Result<Vec<u8>>;
    fn decode(&self, bitstream: &[u8], dims: [usize; 3]) -> Result<Vec<u8>>;
}

/// Result of fitting one image into a bit budget.
#[derive(Clone, Debug, PartialEq)]
pub struct Fitted {
    pub level: i64,
    pub bits: u64,
    pub overflow: bool,
    pub decoded: Vec<u8>,
}

/// Binary search for the highest-rate level whose bitstream fits `budget`
/// bits; falls back to the lowest-rate level with the overflow flag set.
pub fn fit_to_budget(codec: &dyn ImageCodec, image: &[u8], dims: [usize; 3], budget: u64) -> Result<Fitted> {
    let levels = codec.levels();
    if levels.is_empty() {
        return Err(Error::Codec("codec declares no quality levels".into()));
    }
    let bits = |i: usize| -> Result<(Vec<u8>, u64)> {
        let s = codec.encode(image, dims, levels[i])?;
        let b = 8 * s.len() as u64;
        Ok((s, b))
    };
    let (mut best_stream, mut best_bits) = bits(0)?;
    if best_bits > budget {
        return Ok(Fitted {
            level: levels[0],
            bits: best_bits,
            overflow: true,
            decoded: codec.decode(&best_stream, dims)?,
        });
    }
    let (mut lo, mut hi, mut best) = (1usize, levels.len(), 0usize);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        let (s, b) = bits(mid)?;
        if b <= budget {
            best = mid;
            best_stream = s;
            best_bits = b;
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    Ok(Fitted {
        level: levels[best],
        bits: best_bits,
        overflow: false,
        decoded: codec.decode(&best_stream, dims)?,
    })
}

/// Compresses every test image to the budget, decodes and scores it.
pub fn separation_baseline(
    testset: &ImageSet,
    budget: &SeparationBudget,
    codec: &dyn ImageCodec,
    snr_sr_db: f64,
) -> Result<(EvalRecord, Vec<Fitted>)> {
    if testset.is_empty() {
        return Err(Error::config("testset", "no images to evaluate"));
    }
    let dims = testset.dims();
    let [c, h, w] = dims;
    let mut fitted = Vec::with_capacity(testset.len());
    let (mut psnr, mut ssim) = (Vec::new(), Vec::new());
    for i in 0..testset.len() {
        let f = fit_to_budget(codec, testset.image_bytes(i), dims, budget.bit_budget)?;
        let decoded = ImageSet::new(dims, f.decoded.clone(), vec![0])?;
        let reference = testset.batch(&[i]);
        let (p, s) = score(&reference, &decoded.batch(&[0]).reshape(&[1, c, h, w]))?;
        psnr.extend(p);
        ssim.extend(s);
        fitted.push(f);
    }
    let record = EvalRecord {
        protocol: SEPARATION.to_string(),
        lambda: None,
        snr_sr_db,
        gamma_db: budget.gamma_db,
        psnr_db: mean(&psnr),
        ssim: mean(&ssim).clamp(0.0, 1.0),
        n_images: testset.len(),
        seed: 0,
        model_id: String::new(),
        in_training_range: true,
        codec: Some(codec.identity()),
        bit_budget: Some(budget.bit_budget),
        overflow: Some(fitted.iter().filter(|f| f.overflow).count()),
    };
    Ok((record, fitted))
}

/// An external codec driven through command templates. `{input}`,
/// `{output}` and `{quality}` are substituted in each argument; images are
/// exchanged as PNG files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandCodec {
    pub name: String,
    pub encode: Vec<String>,
    pub decode: Vec<String>,
    /// Quality arguments from the lowest to the highest bit rate.
    pub levels: Vec<i64>,
    #[serde(default)]
    pub version: Option<String>,
}

impl CommandCodec {
    /// BPG through `bpgenc`/`bpgdec`; quantizer 51 is the coarsest.
    pub fn bpg() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            name: "bpg".into(),
            encode: s(&["bpgenc", "-q", "{quality}", "-o", "{output}", "{input}"]),
            decode: s(&["bpgdec", "-o", "{output}", "{input}"]),
            levels: (0..=51).rev().collect(),
            version: None,
        }
    }

    /// Checks that both programs can be started and records a version
    /// string from the encoder's help banner.
    pub fn probe(mut self) -> Result<Self> {
        for argv in [&self.encode, &self.decode] {
            let program = argv
                .first()
                .ok_or_else(|| Error::config("codec", "empty command template"))?;
            let out = Command::new(program).arg("-h").output().map_err(|e| {
                Error::CodecUnavailable(format!("cannot run `{program}`: {e}"))
            })?;
            if self.version.is_none() && argv == &self.encode {
                let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
                self.version = text.lines().map(str::trim).find(|l| !l.is_empty()).map(str::to_string);
            }
        }
        Ok(self)
    }

    fn run(&self, template: &[String], input: &Path, output: &Path, quality: Option<i64>) -> Result<()> {
        let args: Vec<String> = template
            .iter()
            .map(|a| {
                let a = a
                    .replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &output.to_string_lossy());
                match quality {
                    Some(q) => a.replace("{quality}", &q.to_string()),
                    None => a,
                }
            })
            .collect();
        let (program, rest) = args
            .split_first()
            .ok_or_else(|| Error::config("codec", "empty command template"))?;
        let out = Command::new(program)
            .args(rest)
            .output()
            .map_err(|e| Error::CodecUnavailable(format!("cannot run `{program}`: {e}")))?;
        if !out.status.success() {
            return Err(Error::Codec(format!(
                "`{}` exited with {}: {}",
                args.join(" "),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(())
    }
}

fn to_png(image: &[u8], dims: [usize; 3], path: &Path) -> Result<()> {
    let [c, h, w] = dims;
    if c != 3 {
        return Err(Error::shape("3-channel images", format!("{c} channels")));
    }
    let plane = h * w;
    let mut rgb = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        rgb.extend([image[p], image[plane + p], image[2 * plane + p]]);
    }
    image::save_buffer(path, &rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Codec(e.to_string()))
}

fn from_png(path: &Path, dims: [usize; 3]) -> Result<Vec<u8>> {
    let [_, h, w] = dims;
    let img = image::open(path).map_err(|e| Error::Codec(e.to_string()))?.to_rgb8();
    if img.dimensions() != (w as u32, h as u32) {
        return Err(Error::Codec(format!("decoded size {:?}, expected {w}×{h}", img.dimensions())));
    }
    let plane = h * w;
    let mut out = vec![0u8; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            out[ch * plane + p] = px[ch];
        }
    }
    Ok(out)
}

impl ImageCodec for CommandCodec {
    fn identity(&self) -> String {
        match &self.version {
            Some(v) => format!("{} ({v})", self.name),
            None => self.name.clone(),
        }
    }

    fn levels(&self) -> Vec<i64> {
        self.levels.clone()
    }

    fn encode(&self, image: &[u8], dims: [usize; 3], level: i64) -> Result<Vec<u8>> {
        let dir = tempfile::tempdir()?;
        let (input, output) = (dir.path().join("in.png"), dir.path().join("out.bin"));
        to_png(image, dims, &input)?;
        self.run(&self.encode, &input, &output, Some(level))?;
        Ok(std::fs::read(&output)?)
    }

    fn decode(&self, bitstream: &[u8], dims: [usize; 3]) -> Result<Vec<u8>> {
        let dir = tempfile::tempdir()?;
        let (input, output) = (dir.path().join("in.bin"), dir.path().join("out.png"));
        std::fs::write(&input, bitstream)?;
        self.run(&self.decode, &input, &output, None)?;
        from_png(&output, dims)
    }
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Record files in `paths`, or every `*.jsonl` directly inside a directory.
pub fn collect_record_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}
