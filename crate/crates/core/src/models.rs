//! Source encoder, destination decoder and relay networks.
//!
//! Every network is a stack of stages operating at one spatial resolution:
//! a 5×5 strided convolution (or pixel-shuffle upsampling in the decoder),
//! ResNet blocks with GDN, and an SNR-conditioned channel-attention gate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::channel::{ComplexSignal, RelayLinks, DEFAULT_SNR_CLAMP_DB};
use crate::error::{Error, Result};
use crate::nn::{ChannelAttention, Conv, Gdn, ResBlock};
use crate::protocols::{ProtocolKind, ProtocolSpec};
use crate::tensor::Tensor;

/// Architecture of every network in a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Source image shape `[C, H, W]`.
    pub image_dims: [usize; 3],
    /// Bandwidth ratio ρ: channel uses per source pixel.
    pub cpp: f64,
    /// Feature channels of every hidden layer.
    pub c_feat: usize,
    /// Channels of the latent map; `c_out·(H/2ⁿ)·(W/2ⁿ) = 2k`.
    pub c_out: usize,
    /// Number of stride-2 stages.
    pub n_downsample: usize,
    #[serde(default = "defaults::blocks_per_stage")]
    pub blocks_per_stage: usize,
    #[serde(default = "defaults::down_kernel")]
    pub down_kernel: usize,
    #[serde(default = "defaults::res_kernel")]
    pub res_kernel: usize,
    /// Channel-attention modules on (off is the fixed-SNR ablation).
    #[serde(default = "defaults::yes")]
    pub use_ca: bool,
    /// Identity shortcuts in ResNet blocks and the PF relay.
    #[serde(default = "defaults::yes")]
    pub residual: bool,
    /// SNR conditioning inputs are clamped to `±snr_clamp_db`.
    #[serde(default = "defaults::snr_clamp_db")]
    pub snr_clamp_db: f64,
    /// Hidden width of the lightweight PF relay.
    #[serde(default)]
    pub relay_feat: Option<usize>,
}

mod defaults {
    pub fn blocks_per_stage() -> usize {
        2
    }
    pub fn down_kernel() -> usize {
        5
    }
    pub fn res_kernel() -> usize {
        3
    }
    pub fn yes() -> bool {
        true
    }
    pub fn snr_clamp_db() -> f64 {
        super::DEFAULT_SNR_CLAMP_DB
    }
}

impl EncoderConfig {
    /// Derives `c_out` from the bandwidth ratio: `c_out = 2ρ·C·4ⁿ`.
    pub fn for_cpp(image_dims: [usize; 3], cpp: f64, n_downsample: usize, c_feat: usize) -> Result<Self> {
        let c_out_exact = 2.0 * cpp * image_dims[0] as f64 * 4f64.powi(n_downsample as i32);
        let c_out = c_out_exact.round() as usize;
        if c_out == 0 || (c_out_exact - c_out as f64).abs() > 1e-9 {
            return Err(Error::config(
                "cpp",
                format!("ρ={cpp} gives a non-integer latent channel count {c_out_exact}"),
            ));
        }
        let cfg = Self {
            image_dims,
            cpp,
            c_feat,
            c_out,
            n_downsample,
            blocks_per_stage: defaults::blocks_per_stage(),
            down_kernel: defaults::down_kernel(),
            res_kernel: defaults::res_kernel(),
            use_ca: true,
            residual: true,
            snr_clamp_db: DEFAULT_SNR_CLAMP_DB,
            relay_feat: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// CIFAR-10 defaults: 3×32×32 images, ρ = 1/8, 256 features, two stages.
    pub fn cifar10() -> Self {
        Self::for_cpp([3, 32, 32], 0.125, 2, 256).expect("valid default configuration")
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image_dims;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("image_dims", "all dimensions must be positive"));
        }
        let f = 1usize << self.n_downsample;
        if h % f != 0 || w % f != 0 {
            return Err(Error::config(
                "image_dims",
                format!("{h}×{w} is not divisible by 2^{}", self.n_downsample),
            ));
        }
        for (name, v) in [
            ("c_feat", self.c_feat),
            ("c_out", self.c_out),
            ("down_kernel", self.down_kernel),
            ("res_kernel", self.res_kernel),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.down_kernel.is_multiple_of(2) || self.res_kernel.is_multiple_of(2) {
            return Err(Error::config("kernel", "kernel sizes must be odd"));
        }
        if !(self.cpp > 0.0 && self.cpp.is_finite()) {
            return Err(Error::config("cpp", "must be positive"));
        }
        let k_exact = self.cpp * (c * h * w) as f64;
        let reals = self.c_out * (h / f) * (w / f);
        if (k_exact - k_exact.round()).abs() > 1e-9 || reals != 2 * k_exact.round() as usize {
            return Err(Error::config(
                "c_out",
                format!(
                    "latent carries {reals} reals but ρ·C·H·W = {k_exact} needs {} (c_out·(H/2ⁿ)·(W/2ⁿ) = 2k)",
                    2.0 * k_exact
                ),
            ));
        }
        if self.relay_feat == Some(0) {
            return Err(Error::config("relay_feat", "must be positive"));
        }
        if self.snr_clamp_db.is_nan() || self.snr_clamp_db <= 0.0 {
            return Err(Error::config("snr_clamp_db", "must be positive"));
        }
        Ok(())
    }

    /// Latent map shape `[c_out, H/2ⁿ, W/2ⁿ]`.
    pub fn latent_dims(&self) -> [usize; 3] {
        let f = 1usize << self.n_downsample;
        [self.c_out, self.image_dims[1] / f, self.image_dims[2] / f]
    }

    /// Channel uses `k` per transmission period.
    pub fn channel_uses(&self) -> usize {
        self.latent_dims().iter().product::<usize>() / 2
    }

    pub fn relay_width(&self) -> usize {
        self.relay_feat.unwrap_or((self.c_feat / 2).max(1))
    }
}

/// SNR conditioning rows `[N, 3]` for a batch.
pub fn conditioning(g: &mut Graph, links: &RelayLinks, batch: usize, clamp_db: f64) -> Var {
    let row = links.conditioning(clamp_db);
    let data = (0..batch).flat_map(|_| row).collect();
    g.constant(Tensor::from_vec(&[batch, 3], data))
}

#[derive(Clone, Debug)]
struct EncoderStage {
    down: Conv,
    gdn: Gdn,
    blocks: Vec<ResBlock>,
    ca: Option<ChannelAttention>,
}

/// Image → power-normalized packed channel symbols `[N, 2k]`.
#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<EncoderStage>,
    head: Conv,
    image_dims: [usize; 3],
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &EncoderConfig) -> Self {
        let mut stages = Vec::with_capacity(cfg.n_downsample);
        let mut c_in = cfg.image_dims[0];
        for s in 0..cfg.n_downsample {
            let p = format!("{name}.stage{s}");
            stages.push(EncoderStage {
                down: Conv::new(store, rng, &format!("{p}.down"), c_in, cfg.c_feat, cfg.down_kernel, 2),
                gdn: Gdn::new(store, &format!("{p}.gdn"), cfg.c_feat, false),
                blocks: (0..cfg.blocks_per_stage)
                    .map(|b| {
                        ResBlock::new(
                            store,
                            rng,
                            &format!("{p}.res{b}"),
                            cfg.c_feat,
                            cfg.res_kernel,
                            false,
                            cfg.residual,
                        )
                    })
                    .collect(),
                ca: cfg
                    .use_ca
                    .then(|| ChannelAttention::new(store, rng, &format!("{p}.ca"), cfg.c_feat)),
            });
            c_in = cfg.c_feat;
        }
        let head = Conv::new(store, rng, &format!("{name}.head"), c_in, cfg.c_out, cfg.res_kernel, 1);
        Self {
            stages,
            head,
            image_dims: cfg.image_dims,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var, snr: Var) -> Result<Var> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != self.image_dims[..] {
            return Err(Error::shape(
                format!("[N, {}, {}, {}]", self.image_dims[0], self.image_dims[1], self.image_dims[2]),
                format!("{shape:?}"),
            ));
        }
        let mut h = images;
        for stage in &self.stages {
            h = stage.down.forward(g, store, h);
            h = stage.gdn.forward(g, store, h);
            h = g.gelu(h);
            for block in &stage.blocks {
                h = block.forward(g, store, h);
            }
            if let Some(ca) = &stage.ca {
                h = ca.forward(g, store, h, snr);
            }
        }
        let latent = self.head.forward(g, store, h);
        let n = shape[0];
        let reals = g.value(latent).per_item();
        let flat = g.reshape(latent, &[n, reals]);
        g.power_normalize(flat)
            .map_err(|e| Error::DegenerateSignal { index: e.index })
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    blocks: Vec<ResBlock>,
    ca: Option<ChannelAttention>,
    up: Conv,
    igdn: Option<Gdn>,
}

/// Latent map(s) → image in (0, 1).
#[derive(Clone, Debug)]
pub struct Decoder {
    head: Conv,
    head_igdn: Gdn,
    stages: Vec<DecoderStage>,
    in_channels: usize,
    latent_hw: [usize; 2],
}

impl Decoder {
    /// `in_channels` is `c_out` for a single observation and `2·c_out` for
    /// the concatenated direct and relay observations.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &EncoderConfig,
        in_channels: usize,
    ) -> Self {
        let head = Conv::new(store, rng, &format!("{name}.head"), in_channels, cfg.c_feat, cfg.res_kernel, 1);
        let head_igdn = Gdn::new(store, &format!("{name}.head_igdn"), cfg.c_feat, true);
        let mut stages = Vec::with_capacity(cfg.n_downsample);
        for s in 0..cfg.n_downsample {
            let p = format!("{name}.stage{s}");
            let last = s + 1 == cfg.n_downsample;
            let c_next = if last { cfg.image_dims[0] } else { cfg.c_feat };
            stages.push(DecoderStage {
                blocks: (0..cfg.blocks_per_stage)
                    .map(|b| {
                        ResBlock::new(
                            store,
                            rng,
                            &format!("{p}.res{b}"),
                            cfg.c_feat,
                            cfg.res_kernel,
                            true,
                            cfg.residual,
                        )
                    })
                    .collect(),
                ca: cfg
                    .use_ca
                    .then(|| ChannelAttention::new(store, rng, &format!("{p}.ca"), cfg.c_feat)),
                up: Conv::new(store, rng, &format!("{p}.up"), cfg.c_feat, 4 * c_next, cfg.down_kernel, 1),
                igdn: (!last).then(|| Gdn::new(store, &format!("{p}.igdn"), c_next, true)),
            });
        }
        let [_, lh, lw] = cfg.latent_dims();
        Self {
            head,
            head_igdn,
            stages,
            in_channels,
            latent_hw: [lh, lw],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Decodes packed observations, each `[N, 2k]`, concatenated along channels.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, observations: &[Var], snr: Var) -> Result<Var> {
        let [lh, lw] = self.latent_hw;
        let mut maps = Vec::with_capacity(observations.len());
        let mut channels = 0;
        for &obs in observations {
            let shape = g.shape(obs).to_vec();
            let per = shape[1..].iter().product::<usize>();
            if per % (lh * lw) != 0 {
                return Err(Error::shape(format!("a multiple of {} reals", lh * lw), per));
            }
            let c = per / (lh * lw);
            channels += c;
            maps.push(g.reshape(obs, &[shape[0], c, lh, lw]));
        }
        if channels != self.in_channels {
            return Err(Error::shape(
                format!("{} latent channels", self.in_channels),
                format!("{channels}"),
            ));
        }
        let x = if maps.len() == 1 { maps[0] } else { g.concat(&maps) };
        let mut h = self.head.forward(g, store, x);
        h = self.head_igdn.forward(g, store, h);
        h = g.gelu(h);
        for stage in &self.stages {
            for block in &stage.blocks {
                h = block.forward(g, store, h);
            }
            if let Some(ca) = &stage.ca {
                h = ca.forward(g, store, h, snr);
            }
            h = stage.up.forward(g, store, h);
            h = g.pixel_shuffle(h, 2);
            if let Some(igdn) = &stage.igdn {
                h = igdn.forward(g, store, h);
                h = g.gelu(h);
            }
        }
        Ok(g.sigmoid(h))
    }
}

/// Lightweight signal-space relay transform (no image reconstruction).
#[derive(Clone, Debug)]
pub struct PfRelay {
    head: Conv,
    gdn: Gdn,
    block: ResBlock,
    ca: Option<ChannelAttention>,
    tail: Conv,
    residual: bool,
    latent_dims: [usize; 3],
}

impl PfRelay {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &EncoderConfig) -> Self {
        let width = cfg.relay_width();
        Self {
            head: Conv::new(store, rng, &format!("{name}.head"), cfg.c_out, width, cfg.res_kernel, 1),
            gdn: Gdn::new(store, &format!("{name}.gdn"), width, false),
            block: ResBlock::new(store, rng, &format!("{name}.res0"), width, cfg.res_kernel, false, cfg.residual),
            ca: cfg
                .use_ca
                .then(|| ChannelAttention::new(store, rng, &format!("{name}.ca"), width)),
            tail: Conv::new(store, rng, &format!("{name}.tail"), width, cfg.c_out, cfg.res_kernel, 1),
            residual: cfg.residual,
            latent_dims: cfg.latent_dims(),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, y_sr: Var, snr: Var) -> Result<Var> {
        let n = g.value(y_sr).batch();
        let [c, h, w] = self.latent_dims;
        let x = g.reshape(y_sr, &[n, c, h, w]);
        let mut t = self.head.forward(g, store, x);
        t = self.gdn.forward(g, store, t);
        t = g.gelu(t);
        t = self.block.forward(g, store, t);
        if let Some(ca) = &self.ca {
            t = ca.forward(g, store, t, snr);
        }
        let mut out = self.tail.forward(g, store, t);
        if self.residual {
            out = g.add(out, x);
        }
        let flat = g.reshape(out, &[n, c * h * w]);
        g.power_normalize(flat)
            .map_err(|e| Error::DegenerateSignal { index: e.index })
    }
}

/// Processing at the relay for the learned protocols.
#[derive(Clone, Debug)]
pub enum RelayNet {
    /// Relay decoder `g_r` followed by relay encoder `f_r`.
    DecodeForward { decoder: Decoder, encoder: Encoder },
    /// Signal-space transform `f_PF`.
    ProcessForward(PfRelay),
}

/// Output of the relay networks inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct RelayOutput {
    /// Power-normalized relay codeword `z_r`, `[N, 2k]`.
    pub z_r: Var,
    /// Relay image estimate `S̃_r` (decode-and-forward only).
    pub s_tilde_r: Option<Var>,
}

impl RelayNet {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, y_sr: Var, snr: Var) -> Result<RelayOutput> {
        match self {
            RelayNet::DecodeForward { decoder, encoder } => {
                let s_tilde_r = decoder.forward(g, store, &[y_sr], snr)?;
                let z_r = encoder.forward(g, store, s_tilde_r, snr)?;
                Ok(RelayOutput {
                    z_r,
                    s_tilde_r: Some(s_tilde_r),
                })
            }
            RelayNet::ProcessForward(pf) => Ok(RelayOutput {
                z_r: pf.forward(g, store, y_sr, snr)?,
                s_tilde_r: None,
            }),
        }
    }
}

/// Parameter-name prefixes of the three networks.
pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const RELAY_PREFIX: &str = "relay.";

/// All networks of one relaying scheme together with their parameters.
#[derive(Clone, Debug)]
pub struct JsccModel {
    config: EncoderConfig,
    protocol: ProtocolSpec,
    pub(crate) store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    relay: Option<RelayNet>,
}

impl JsccModel {
    /// Builds and randomly initializes the networks `protocol` needs.
    pub fn new(config: EncoderConfig, protocol: ProtocolSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        protocol.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, "encoder", &config);
        let dec_in = match protocol.kind {
            ProtocolKind::Af | ProtocolKind::Noncoop => config.c_out,
            ProtocolKind::Df | ProtocolKind::Pf => 2 * config.c_out,
        };
        let decoder = Decoder::new(&mut store, &mut rng, "decoder", &config, dec_in);
        let relay = match protocol.kind {
            ProtocolKind::Df => Some(RelayNet::DecodeForward {
                decoder: Decoder::new(&mut store, &mut rng, "relay.decoder", &config, config.c_out),
                encoder: Encoder::new(&mut store, &mut rng, "relay.encoder", &config),
            }),
            ProtocolKind::Pf => Some(RelayNet::ProcessForward(PfRelay::new(
                &mut store, &mut rng, "relay.pf", &config,
            ))),
            ProtocolKind::Af | ProtocolKind::Noncoop => None,
        };
        Ok(Self {
            config,
            protocol,
            store,
            encoder,
            decoder,
            relay,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn protocol(&self) -> &ProtocolSpec {
        &self.protocol
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn relay(&self) -> Option<&RelayNet> {
        self.relay.as_ref()
    }

    /// Scalar parameter count of the relay networks (0 without a learned relay).
    pub fn relay_param_count(&self) -> usize {
        self.store.numel_with_prefix(RELAY_PREFIX)
    }

    pub fn channel_uses(&self) -> usize {
        self.config.channel_uses()
    }

    fn snr_var(&self, g: &mut Graph, links: &RelayLinks, batch: usize) -> Var {
        conditioning(g, links, batch, self.config.snr_clamp_db)
    }

    /// Source encoding `x_s = f_s(S)` of a batch `[N, C, H, W]`.
    pub fn encode(&self, images: &Tensor, links: &RelayLinks) -> Result<Vec<ComplexSignal>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let snr = self.snr_var(&mut g, links, images.batch());
        let out = self.encoder.forward(&mut g, &self.store, x, snr)?;
        unpack(g.value(out))
    }

    /// Destination decoding. AF and non-cooperative models take a single
    /// observation per image; DF/PF models also take the relay observation.
    pub fn decode(
        &self,
        y_first: &[ComplexSignal],
        y_second: Option<&[ComplexSignal]>,
        links: &RelayLinks,
    ) -> Result<Tensor> {
        let k = self.channel_uses();
        let mut g = Graph::new();
        let mut obs = vec![g.constant(pack(y_first, k)?)];
        if let Some(second) = y_second {
            if second.len() != y_first.len() {
                return Err(Error::shape(y_first.len(), second.len()));
            }
            obs.push(g.constant(pack(second, k)?));
        }
        let snr = self.snr_var(&mut g, links, y_first.len());
        let out = self.decoder.forward(&mut g, &self.store, &obs, snr)?;
        Ok(g.value(out).clone())
    }

    /// Relay processing of the received `y_sr`; returns `z_r` and, for
    /// decode-and-forward, the relay's image estimate.
    pub fn relay_forward(
        &self,
        y_sr: &[ComplexSignal],
        links: &RelayLinks,
    ) -> Result<(Vec<ComplexSignal>, Option<Tensor>)> {
        let relay = self
            .relay
            .as_ref()
            .ok_or_else(|| Error::config("protocol", "this model has no learned relay"))?;
        let mut g = Graph::new();
        let y = g.constant(pack(y_sr, self.channel_uses())?);
        let snr = self.snr_var(&mut g, links, y_sr.len());
        let out = relay.forward(&mut g, &self.store, y, snr)?;
        let z = unpack(g.value(out.z_r))?;
        Ok((z, out.s_tilde_r.map(|v| g.value(v).clamp(0.0, 1.0))))
    }
}

/// Packs per-image signals into a `[N, 2k]` tensor.
pub fn pack(signals: &[ComplexSignal], k: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(signals.len() * 2 * k);
    for s in signals {
        if s.len() != k {
            return Err(Error::shape(format!("{k} symbols"), s.len()));
        }
        data.extend(s.to_packed());
    }
    Ok(Tensor::from_vec(&[signals.len(), 2 * k], data))
}

/// Splits a `[N, 2k]` tensor into per-image signals.
pub fn unpack(t: &Tensor) -> Result<Vec<ComplexSignal>> {
    (0..t.batch())
        .map(|i| ComplexSignal::from_packed(t.item_slice(i)))
        .collect()
}
