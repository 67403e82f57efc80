//! End-to-end forward passes and losses of the relaying schemes.
//!
//! All schemes split the channel into two periods of `k` uses each. In the
//! relay-receive period the source broadcasts `x_s` to relay and destination;
//! in the relay-transmit period the relay sends `z_r`. The non-cooperative
//! baseline uses only the first period.
//!
//! Channel noise is drawn from a ChaCha8 stream seeded per call, in the fixed
//! order `n_d` (S–D), `n_r` (S–R), `n_rd` (R–D); noiseless links draw nothing.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::channel::{self, LinkConfig, RelayLinks};
use crate::error::{Error, Result};
use crate::models::{conditioning, JsccModel, RelayNet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    /// Amplify-and-forward with MRC at the destination.
    Af,
    /// Decode-and-forward: the relay reconstructs and re-encodes the image.
    Df,
    /// Process-and-forward: a learned signal-space transform at the relay.
    Pf,
    /// Direct source-to-destination transmission, no relay.
    Noncoop,
}

impl ProtocolKind {
    pub fn uses_relay(self) -> bool {
        !matches!(self, ProtocolKind::Noncoop)
    }

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Af => "AF",
            ProtocolKind::Df => "DF",
            ProtocolKind::Pf => "PF",
            ProtocolKind::Noncoop => "NONCOOP",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "af" => Ok(ProtocolKind::Af),
            "df" => Ok(ProtocolKind::Df),
            "pf" => Ok(ProtocolKind::Pf),
            "noncoop" | "non-coop" | "direct" => Ok(ProtocolKind::Noncoop),
            other => Err(Error::config("protocol", format!("unknown protocol `{other}`"))),
        }
    }
}

/// Which scheme runs, with its loss weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    /// Weight λ of the relay reconstruction term; present iff `kind` is DF.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Rescale the AF relay codeword `β·y_sr` to exactly unit power per
    /// block. When false, `β` alone keeps the power at 1 in expectation.
    #[serde(default = "default_true")]
    pub af_block_normalize: bool,
}

fn default_true() -> bool {
    true
}

impl ProtocolSpec {
    pub fn af() -> Self {
        Self::of(ProtocolKind::Af)
    }

    pub fn df(lambda: f64) -> Self {
        Self {
            lambda: Some(lambda),
            ..Self::of(ProtocolKind::Df)
        }
    }

    pub fn pf() -> Self {
        Self::of(ProtocolKind::Pf)
    }

    pub fn noncoop() -> Self {
        Self::of(ProtocolKind::Noncoop)
    }

    fn of(kind: ProtocolKind) -> Self {
        Self {
            kind,
            lambda: None,
            af_block_normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.lambda) {
            (ProtocolKind::Df, None) => Err(Error::config("lambda", "decode-and-forward requires λ")),
            (ProtocolKind::Df, Some(l)) if !(l >= 0.0 && l.is_finite()) => {
                Err(Error::config("lambda", format!("must be finite and ≥ 0, got {l}")))
            }
            (ProtocolKind::Df, Some(_)) => Ok(()),
            (kind, Some(_)) => Err(Error::config("lambda", format!("λ only applies to DF, not {kind}"))),
            (_, None) => Ok(()),
        }
    }

    /// Channel uses consumed per image for `k` uses per period.
    pub fn channel_uses(&self, k: usize) -> usize {
        if self.kind.uses_relay() {
            2 * k
        } else {
            k
        }
    }

    /// Short label such as `DF(λ=0.5)`.
    pub fn label(&self) -> String {
        match self.lambda {
            Some(l) => format!("{}(λ={l})", self.kind),
            None => self.kind.to_string(),
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Destination reconstruction `S̃`, `[N, C, H, W]`.
    pub reconstruction: Var,
    /// Relay reconstruction `S̃_r` (DF only).
    pub relay_reconstruction: Option<Var>,
    /// Training objective.
    pub loss: Var,
    /// `MSE(S, S̃)`.
    pub dest_loss: Var,
    /// `MSE(S, S̃_r)` (DF only).
    pub relay_loss: Option<Var>,
    /// Every transmitted codeword block, `[N, 2k]` each: `x_s`, then `z_r`.
    pub codewords: Vec<Var>,
    /// Channel uses consumed per image.
    pub channel_uses: usize,
}

struct Channel {
    rng: ChaCha8Rng,
    uses: usize,
    k: usize,
}

impl Channel {
    fn new(seed: u64, k: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            uses: 0,
            k,
        }
    }

    /// Starts a transmission period of `k` channel uses.
    fn period(&mut self) {
        self.uses += self.k;
    }

    /// `α·x + n` inside the graph.
    fn link(&mut self, g: &mut Graph, x: Var, link: &LinkConfig) -> Var {
        let y = g.scale(x, link.alpha);
        if link.is_noiseless() {
            return y;
        }
        let shape = g.shape(x).to_vec();
        let count = shape.iter().product::<usize>() / 2;
        let noise = channel::sample_noise(&mut self.rng, count, link.noise_var);
        let packed = noise.iter().flat_map(|s| [s.re, s.im]).collect();
        let n = g.constant(Tensor::from_vec(&shape, packed));
        g.add(y, n)
    }
}

fn degenerate(e: crate::autograd::DegenerateBlock) -> Error {
    Error::DegenerateSignal { index: e.index }
}

fn check_images(model: &JsccModel, g: &Graph, images: Var) -> Result<usize> {
    let shape = g.shape(images);
    let dims = model.config().image_dims;
    if shape.len() != 4 || shape[1..] != dims[..] {
        return Err(Error::shape(format!("[N, {}, {}, {}]", dims[0], dims[1], dims[2]), format!("{shape:?}")));
    }
    Ok(shape[0])
}

fn expect_kind(model: &JsccModel, kind: ProtocolKind) -> Result<()> {
    if model.protocol().kind != kind {
        return Err(Error::config(
            "protocol",
            format!("model was built for {}, not {kind}", model.protocol().kind),
        ));
    }
    Ok(())
}

/// Runs the scheme the model was built for.
pub fn forward(model: &JsccModel, g: &mut Graph, images: Var, links: &RelayLinks, seed: u64) -> Result<ForwardPass> {
    match model.protocol().kind {
        ProtocolKind::Af => forward_af(model, g, images, links, seed),
        ProtocolKind::Df => {
            let lambda = model.protocol().lambda.unwrap_or(0.0);
            forward_df(model, g, images, links, lambda, seed)
        }
        ProtocolKind::Pf => forward_pf(model, g, images, links, seed),
        ProtocolKind::Noncoop => forward_noncoop(model, g, images, &links.sd, links, seed),
    }
}

/// Amplify-and-forward: `z_r = β·y_sr`, MRC of `(y_sd, y_rd)`, single-input decoder.
pub fn forward_af(model: &JsccModel, g: &mut Graph, images: Var, links: &RelayLinks, seed: u64) -> Result<ForwardPass> {
    expect_kind(model, ProtocolKind::Af)?;
    let n = check_images(model, g, images)?;
    let store = model.params();
    let snr = conditioning(g, links, n, model.config().snr_clamp_db);
    let mut ch = Channel::new(seed, model.channel_uses());

    let x_s = model.encoder().forward(g, store, images, snr)?;
    ch.period();
    let y_sd = ch.link(g, x_s, &links.sd);
    let y_sr = ch.link(g, x_s, &links.sr);

    let scaled = g.scale(y_sr, links.af_beta());
    let z_r = if model.protocol().af_block_normalize {
        g.power_normalize(scaled).map_err(degenerate)?
    } else {
        scaled
    };
    ch.period();
    let y_rd = ch.link(g, z_r, &links.rd);

    let w = channel::mrc_weights(links)?;
    let a = g.scale(y_sd, w.sd);
    let b = g.scale(y_rd, w.rd);
    let z_tilde = g.add(a, b);

    let recon = model.decoder().forward(g, store, &[z_tilde], snr)?;
    let loss = g.mse(recon, images);
    Ok(ForwardPass {
        reconstruction: recon,
        relay_reconstruction: None,
        loss,
        dest_loss: loss,
        relay_loss: None,
        codewords: vec![x_s, z_r],
        channel_uses: ch.uses,
    })
}

/// Shared DF/PF pipeline; the destination decodes the concatenation of
/// `y_sd` and `y_rd`.
fn forward_learned_relay(
    model: &JsccModel,
    g: &mut Graph,
    images: Var,
    links: &RelayLinks,
    lambda: f64,
    seed: u64,
) -> Result<ForwardPass> {
    let n = check_images(model, g, images)?;
    let store = model.params();
    let relay: &RelayNet = model
        .relay()
        .ok_or_else(|| Error::config("protocol", "model has no relay network"))?;
    let snr = conditioning(g, links, n, model.config().snr_clamp_db);
    let mut ch = Channel::new(seed, model.channel_uses());

    let x_s = model.encoder().forward(g, store, images, snr)?;
    ch.period();
    let y_sd = ch.link(g, x_s, &links.sd);
    let y_sr = ch.link(g, x_s, &links.sr);

    let relay_out = relay.forward(g, store, y_sr, snr)?;
    ch.period();
    let y_rd = ch.link(g, relay_out.z_r, &links.rd);

    let recon = model.decoder().forward(g, store, &[y_sd, y_rd], snr)?;
    let dest_loss = g.mse(recon, images);
    let (loss, relay_loss) = match relay_out.s_tilde_r {
        Some(s_r) => {
            let relay_loss = g.mse(s_r, images);
            let weighted = g.scale(relay_loss, lambda);
            (g.add(dest_loss, weighted), Some(relay_loss))
        }
        None => (dest_loss, None),
    };
    Ok(ForwardPass {
        reconstruction: recon,
        relay_reconstruction: relay_out.s_tilde_r,
        loss,
        dest_loss,
        relay_loss,
        codewords: vec![x_s, relay_out.z_r],
        channel_uses: ch.uses,
    })
}

/// Decode-and-forward with loss `MSE(S, S̃) + λ·MSE(S, S̃_r)`.
pub fn forward_df(
    model: &JsccModel,
    g: &mut Graph,
    images: Var,
    links: &RelayLinks,
    lambda: f64,
    seed: u64,
) -> Result<ForwardPass> {
    expect_kind(model, ProtocolKind::Df)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config("lambda", format!("must be finite and ≥ 0, got {lambda}")));
    }
    forward_learned_relay(model, g, images, links, lambda, seed)
}

/// Process-and-forward with loss `MSE(S, S̃)`.
pub fn forward_pf(model: &JsccModel, g: &mut Graph, images: Var, links: &RelayLinks, seed: u64) -> Result<ForwardPass> {
    expect_kind(model, ProtocolKind::Pf)?;
    forward_learned_relay(model, g, images, links, 0.0, seed)
}

/// Direct transmission over the S–D link only, `k` channel uses.
///
/// `links` supplies the SNR conditioning; only `link_sd` carries the signal.
/// Any model with a single-observation decoder (AF or non-cooperative) can
/// run this pipeline.
pub fn forward_noncoop(
    model: &JsccModel,
    g: &mut Graph,
    images: Var,
    link_sd: &LinkConfig,
    links: &RelayLinks,
    seed: u64,
) -> Result<ForwardPass> {
    if model.decoder().in_channels() != model.config().c_out {
        return Err(Error::config(
            "protocol",
            format!("{} model decodes two observations", model.protocol().kind),
        ));
    }
    let n = check_images(model, g, images)?;
    let store = model.params();
    let snr = conditioning(g, links, n, model.config().snr_clamp_db);
    let mut ch = Channel::new(seed, model.channel_uses());

    let x_s = model.encoder().forward(g, store, images, snr)?;
    ch.period();
    let y_sd = ch.link(g, x_s, link_sd);
    let recon = model.decoder().forward(g, store, &[y_sd], snr)?;
    let loss = g.mse(recon, images);
    Ok(ForwardPass {
        reconstruction: recon,
        relay_reconstruction: None,
        loss,
        dest_loss: loss,
        relay_loss: None,
        codewords: vec![x_s],
        channel_uses: ch.uses,
    })
}

/// Values of one inference pass.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub reconstruction: Tensor,
    pub relay_reconstruction: Option<Tensor>,
    pub loss: f64,
    pub dest_loss: f64,
    pub relay_loss: Option<f64>,
}

/// Forward pass without keeping the graph.
pub fn run_batch(model: &JsccModel, images: &Tensor, links: &RelayLinks, seed: u64) -> Result<BatchOutput> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let pass = forward(model, &mut g, x, links, seed)?;
    Ok(BatchOutput {
        reconstruction: g.value(pass.reconstruction).clone(),
        relay_reconstruction: pass.relay_reconstruction.map(|v| g.value(v).clone()),
        loss: g.value(pass.loss).item(),
        dest_loss: g.value(pass.dest_loss).item(),
        relay_loss: pass.relay_loss.map(|v| g.value(v).item()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::SnrTriple;
    use crate::models::EncoderConfig;

    fn cfg() -> EncoderConfig {
        let mut c = EncoderConfig::for_cpp([3, 16, 16], 0.125, 2, 6).unwrap();
        c.blocks_per_stage = 1;
        c
    }

    fn images() -> Tensor {
        Tensor::from_vec(
            &[2, 3, 16, 16],
            (0..2 * 768).map(|i| ((i * 37 % 97) as f64) / 96.0).collect(),
        )
    }

    fn links() -> RelayLinks {
        SnrTriple::with_gamma(12.0, 4.0).unwrap().links().unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(ProtocolSpec::df(0.5).validate().is_ok());
        assert!(ProtocolSpec::df(-1.0).validate().is_err());
        assert!(ProtocolSpec { lambda: None, ..ProtocolSpec::df(1.0) }.validate().is_err());
        assert!(ProtocolSpec { lambda: Some(1.0), ..ProtocolSpec::pf() }.validate().is_err());
        assert_eq!(ProtocolSpec::df(0.5).label(), "DF(λ=0.5)");
        assert_eq!("pf".parse::<ProtocolKind>().unwrap(), ProtocolKind::Pf);
        assert!("cf".parse::<ProtocolKind>().is_err());
    }

    #[test]
    fn bandwidth_accounting() {
        let k = cfg().channel_uses();
        for spec in [ProtocolSpec::af(), ProtocolSpec::df(1.0), ProtocolSpec::pf(), ProtocolSpec::noncoop()] {
            let model = JsccModel::new(cfg(), spec.clone(), 0).unwrap();
            let mut g = Graph::new();
            let x = g.constant(images());
            let pass = forward(&model, &mut g, x, &links(), 1).unwrap();
            assert_eq!(pass.channel_uses, spec.channel_uses(k));
            let expected = if spec.kind.uses_relay() { 2 * k } else { k };
            assert_eq!(pass.channel_uses, expected);
        }
    }

    #[test]
    fn forward_is_deterministic_in_seed() {
        for spec in [ProtocolSpec::af(), ProtocolSpec::df(1.0), ProtocolSpec::pf(), ProtocolSpec::noncoop()] {
            let model = JsccModel::new(cfg(), spec, 0).unwrap();
            let a = run_batch(&model, &images(), &links(), 5).unwrap();
            let b = run_batch(&model, &images(), &links(), 5).unwrap();
            let c = run_batch(&model, &images(), &links(), 6).unwrap();
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.reconstruction, b.reconstruction);
            assert_ne!(a.loss, c.loss);
        }
    }

    #[test]
    fn df_loss_decomposition() {
        let model = JsccModel::new(cfg(), ProtocolSpec::df(1.0), 3).unwrap();
        let img = images();
        let run = |lambda: f64| {
            let mut g = Graph::new();
            let x = g.constant(img.clone());
            let p = forward_df(&model, &mut g, x, &links(), lambda, 9).unwrap();
            (
                g.value(p.loss).item(),
                g.value(p.dest_loss).item(),
                g.value(p.relay_loss.unwrap()).item(),
            )
        };
        let (l0, d0, r0) = run(0.0);
        assert_eq!(l0, d0);
        assert!(d0 >= 0.0 && r0 >= 0.0);
        let (l2, d2, _) = run(2.0);
        assert_eq!(d0, d2);
        assert!((l2 - l0 - 2.0 * r0).abs() < 1e-12);
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        assert!(forward_df(&model, &mut g, x, &links(), -1.0, 0).is_err());
    }

    #[test]
    fn dead_relay_af_matches_direct_pipeline() {
        let model = JsccModel::new(cfg(), ProtocolSpec::af(), 2).unwrap();
        let mut dead = links();
        dead.rd = LinkConfig::new(0.0, dead.rd.noise_var).unwrap();
        let img = images();
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let af = forward_af(&model, &mut g, x, &dead, 11).unwrap();
        let af_loss = g.value(af.loss).item();
        let mut g = Graph::new();
        let x = g.constant(img);
        let direct = forward_noncoop(&model, &mut g, x, &dead.sd, &dead, 11).unwrap();
        let direct_loss = g.value(direct.loss).item();
        assert!((af_loss - direct_loss).abs() < 1e-12, "{af_loss} vs {direct_loss}");
    }

    #[test]
    fn codewords_have_unit_power() {
        for spec in [ProtocolSpec::af(), ProtocolSpec::df(1.0), ProtocolSpec::pf(), ProtocolSpec::noncoop()] {
            let model = JsccModel::new(cfg(), spec, 0).unwrap();
            let mut g = Graph::new();
            let x = g.constant(images());
            let pass = forward(&model, &mut g, x, &links(), 3).unwrap();
            for &c in &pass.codewords {
                let t = g.value(c);
                for i in 0..t.batch() {
                    let p: f64 = t.item_slice(i).iter().map(|v| v * v).sum::<f64>() * 2.0 / t.per_item() as f64;
                    assert!((p - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn wrong_protocol_is_rejected() {
        let model = JsccModel::new(cfg(), ProtocolSpec::pf(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images());
        assert!(forward_af(&model, &mut g, x, &links(), 0).is_err());
        assert!(forward_noncoop(&model, &mut g, x, &links().sd, &links(), 0).is_err());
    }
}
