//! The multi-scale, multi-branch dehazing network: two three-scale
//! branches built from residual dense blocks, a fusion network and a patch
//! discriminator.
//!
//! Each scale sub-network is
//!
//! ```text
//! [upsample: conv → pixel_shuffle(2)] → concat with hazy at this scale
//!   → shallow conv → RDB × n (+ shallow skip) → body convs → head conv
//!   → + hazy at this scale
//! ```
//!
//! `conv_count` counts the plain convolutions around the RDB stack:
//! shallow, `conv_count − 2` body convs, and the image head. The input of
//! the head is the penultimate feature map.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Result, Shape, Tensor, TensorError};

/// Slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Factor applied to the He initialisation of RDB local-fusion convs.
pub const RDB_FUSE_SCALE: f64 = 0.1;
/// Standard deviation of image-head initial weights.
pub const HEAD_INIT_STD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Shadow,
    Medium,
    Deep,
    Desk,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Shadow, Preset::Medium, Preset::Deep, Preset::Desk];

    /// `(rdb_count, conv_count)` for coarse, mid, fine and fusion.
    pub fn stage_counts(self) -> [(usize, usize); 4] {
        match self {
            Preset::Shadow => [(4, 3), (6, 4), (8, 5), (10, 6)],
            Preset::Medium => [(5, 3), (7, 4), (9, 5), (12, 6)],
            Preset::Deep => [(6, 3), (8, 4), (10, 5), (15, 6)],
            Preset::Desk => [(2, 2), (2, 2), (2, 2), (3, 3)],
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shadow" => Ok(Preset::Shadow),
            "medium" => Ok(Preset::Medium),
            "deep" => Ok(Preset::Deep),
            "desk" => Ok(Preset::Desk),
            other => Err(format!("unknown preset {other:?}")),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Shadow => "shadow",
            Preset::Medium => "medium",
            Preset::Deep => "deep",
            Preset::Desk => "desk",
        })
    }
}

/// What one scale passes to the next.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HandoffMode {
    /// The 3-channel image output, detached from the graph.
    Image,
    /// The penultimate feature map, kept on the graph.
    Feature,
}

impl fmt::Display for HandoffMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HandoffMode::Image => "image",
            HandoffMode::Feature => "feature",
        })
    }
}

impl FromStr for HandoffMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "image" => Ok(HandoffMode::Image),
            "feature" => Ok(HandoffMode::Feature),
            other => Err(format!("unknown handoff mode {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub rdb_count: usize,
    pub conv_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Preset the counts came from, if any.
    pub preset: Option<Preset>,
    pub coarse: StageConfig,
    pub mid: StageConfig,
    pub fine: StageConfig,
    pub fusion: StageConfig,
    /// Feature width C0 between blocks.
    pub base_channels: usize,
    /// Growth rate G of the dense layers.
    pub growth: usize,
    /// Dense layers per RDB.
    pub dense_layers: usize,
    pub mode: HandoffMode,
}

impl NetworkConfig {
    pub fn preset(preset: Preset, mode: HandoffMode) -> Self {
        let [c, m, f, u] = preset.stage_counts().map(|(rdb_count, conv_count)| StageConfig { rdb_count, conv_count });
        let (base_channels, growth, dense_layers) = match preset {
            Preset::Desk => (32, 16, 2),
            _ => (32, 32, 4),
        };
        Self {
            preset: Some(preset),
            coarse: c,
            mid: m,
            fine: f,
            fusion: u,
            base_channels,
            growth,
            dense_layers,
            mode,
        }
    }

    pub fn stages(&self) -> [StageConfig; 3] {
        [self.coarse, self.mid, self.fine]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("coarse", self.coarse), ("mid", self.mid), ("fine", self.fine), ("fusion", self.fusion)] {
            if s.rdb_count == 0 || s.conv_count < 2 {
                return Err(TensorError::InvalidArgument {
                    op: "network_config",
                    reason: format!("{name} stage needs ≥ 1 RDB and ≥ 2 convs, got {}/{}", s.rdb_count, s.conv_count),
                });
            }
        }
        if self.base_channels == 0 || self.growth == 0 || self.dense_layers == 0 {
            return Err(TensorError::InvalidArgument {
                op: "network_config",
                reason: "channel widths and dense layer count must be positive".into(),
            });
        }
        Ok(())
    }

    /// Channels handed from one scale to the next.
    pub fn handoff_channels(&self) -> usize {
        match self.mode {
            HandoffMode::Image => 3,
            HandoffMode::Feature => self.base_channels,
        }
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, n: usize, std: f64) -> Vec<f32> {
        let d = Normal::new(0.0, std).expect("valid std");
        (0..n).map(|_| d.sample(&mut self.rng) as f32).collect()
    }

    /// He initialisation for a leaky ReLU of slope 0.2.
    fn kaiming_std(fan_in: usize) -> f64 {
        (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt() / (fan_in as f64).sqrt()
    }
}

/// Square convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    fn new(init: &mut Init, c_in: usize, c_out: usize, k: usize, stride: usize, std: Option<f64>) -> Self {
        let std = std.unwrap_or_else(|| Init::kaiming_std(c_in * k * k));
        let shape = Shape::new(c_out, c_in, k, k);
        Self {
            weight: Tensor::param(shape, init.normal(shape.numel(), std)),
            bias: Tensor::param(Shape::new(1, c_out, 1, 1), vec![0.0; c_out]),
            stride,
            pad: k / 2,
        }
    }

    /// 3×3 conv feeding `pixel_shuffle(r)`. The r² kernels behind each
    /// output channel start equal, so the upsampler begins as
    /// nearest-neighbour and does not imprint a checkerboard.
    fn subpixel(init: &mut Init, c: usize, r: usize) -> Self {
        let base = Self::new(init, c, c, 3, 1, None);
        let k = c * 9;
        let w = base.weight.data();
        let data = (0..c * r * r).flat_map(|o| w[(o / (r * r)) * k..][..k].to_vec()).collect();
        Self {
            weight: Tensor::param(Shape::new(c * r * r, c, 3, 3), data),
            bias: Tensor::param(Shape::new(1, c * r * r, 1, 1), vec![0.0; c * r * r]),
            stride: 1,
            pad: 1,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.pad)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.weight.clone()));
        out.push((format!("{prefix}.b"), self.bias.clone()));
    }
}

/// Residual dense block: densely connected 3×3 convs, 1×1 local fusion,
/// and a residual connection from the block input.
#[derive(Clone, Debug)]
pub struct Rdb {
    pub dense: Vec<Conv>,
    pub fuse: Conv,
}

impl Rdb {
    fn new(init: &mut Init, c0: usize, growth: usize, layers: usize) -> Self {
        let dense = (0..layers).map(|i| Conv::new(init, c0 + i * growth, growth, 3, 1, None)).collect();
        // Scaled down so stacked residual blocks start near identity.
        let fan_in = c0 + layers * growth;
        let fuse = Conv::new(init, fan_in, c0, 1, 1, Some(RDB_FUSE_SCALE * Init::kaiming_std(fan_in)));
        Self { dense, fuse }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c0 = self.fuse.weight.shape().n;
        if x.shape().c != c0 {
            return Err(TensorError::ShapeMismatch {
                op: "rdb",
                dim: "C",
                expected: c0,
                got: x.shape().c,
            });
        }
        let mut features = vec![x.clone()];
        for conv in &self.dense {
            let refs: Vec<&Tensor> = features.iter().collect();
            let input = Tensor::concat_channels(&refs)?;
            features.push(conv.forward(&input)?.leaky_relu(LEAKY_SLOPE));
        }
        let refs: Vec<&Tensor> = features.iter().collect();
        let stacked = Tensor::concat_channels(&refs)?;
        x.add(&self.fuse.forward(&stacked)?)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, c) in self.dense.iter().enumerate() {
            c.collect(&format!("{prefix}.dense{i}"), out);
        }
        self.fuse.collect(&format!("{prefix}.fuse"), out);
    }
}

/// Outputs of one scale sub-network.
#[derive(Clone, Debug)]
pub struct StageOutput {
    /// Head output plus the hazy input at this scale.
    pub image: Tensor,
    /// Penultimate feature map.
    pub features: Tensor,
}

/// Offset removed from images in [0, 1] before they enter a conv stack.
pub const INPUT_SHIFT: f64 = 0.5;

fn centered(img: &Tensor) -> Tensor {
    img.add_scalar(-INPUT_SHIFT)
}

/// Network input for a handoff: images are centred like the hazy input,
/// feature maps pass through.
fn handoff_input(x: &Tensor, mode: HandoffMode) -> Tensor {
    match mode {
        HandoffMode::Image => centered(x),
        HandoffMode::Feature => x.clone(),
    }
}

/// One scale sub-network, also used (without upsampler) as the fusion
/// network.
#[derive(Clone, Debug)]
pub struct ScaleNet {
    pub upsample: Option<Conv>,
    pub shallow: Conv,
    /// What the handoffs this net consumes carry.
    pub mode: HandoffMode,
    pub rdbs: Vec<Rdb>,
    pub body: Vec<Conv>,
    pub head: Conv,
}

impl ScaleNet {
    fn new(init: &mut Init, cfg: &NetworkConfig, stage: StageConfig, c_in: usize, upsample_ch: Option<usize>) -> Self {
        let c0 = cfg.base_channels;
        let upsample = upsample_ch.map(|h| Conv::subpixel(init, h, 2));
        let shallow = Conv::new(init, c_in, c0, 3, 1, None);
        let rdbs = (0..stage.rdb_count)
            .map(|_| Rdb::new(init, c0, cfg.growth, cfg.dense_layers))
            .collect();
        let body = (0..stage.conv_count - 2).map(|_| Conv::new(init, c0, c0, 3, 1, None)).collect();
        let head = Conv::new(init, c0, 3, 3, 1, Some(HEAD_INIT_STD));
        Self {
            upsample,
            shallow,
            mode: cfg.mode,
            rdbs,
            body,
            head,
        }
    }

    /// `hazy` is the hazy image at this scale; `prior` is the handoff from
    /// the previous (half resolution) scale, required iff this net has an
    /// upsampler.
    pub fn forward(&self, hazy: &Tensor, prior: Option<&Tensor>) -> Result<StageOutput> {
        let input = match (&self.upsample, prior) {
            (Some(up), Some(p)) => {
                let lifted = up.forward(&handoff_input(p, self.mode))?.pixel_shuffle(2)?;
                Tensor::concat_channels(&[&centered(hazy), &lifted])?
            }
            (None, None) => centered(hazy),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "scale_net",
                    reason: "handoff must be given exactly when the stage upsamples".into(),
                })
            }
        };
        self.run(&input, hazy)
    }

    /// Body shared with the fusion network: `input` is already the full
    /// concatenated input, `residual` the 3-channel image to add.
    fn run(&self, input: &Tensor, residual: &Tensor) -> Result<StageOutput> {
        let f0 = self.shallow.forward(input)?;
        let mut h = f0.clone();
        for rdb in &self.rdbs {
            h = rdb.forward(&h)?;
        }
        let mut h = h.add(&f0)?;
        for conv in &self.body {
            h = conv.forward(&h)?.leaky_relu(LEAKY_SLOPE);
        }
        let image = self.head.forward(&h)?.add(residual)?;
        Ok(StageOutput { image, features: h })
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let Some(up) = &self.upsample {
            up.collect(&format!("{prefix}.up"), out);
        }
        self.shallow.collect(&format!("{prefix}.shallow"), out);
        for (i, r) in self.rdbs.iter().enumerate() {
            r.collect(&format!("{prefix}.rdb{i}"), out);
        }
        for (i, c) in self.body.iter().enumerate() {
            c.collect(&format!("{prefix}.body{i}"), out);
        }
        self.head.collect(&format!("{prefix}.head"), out);
    }
}

/// Coarse (×1/4), mid (×1/2) and fine (×1) outputs of a branch.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub scales: [StageOutput; 3],
    pub mode: HandoffMode,
}

impl BranchOutput {
    pub fn images(&self) -> [&Tensor; 3] {
        [&self.scales[0].image, &self.scales[1].image, &self.scales[2].image]
    }

    pub fn fine(&self) -> &Tensor {
        &self.scales[2].image
    }

    /// What the fusion network receives from this branch.
    pub fn handoff(&self) -> Tensor {
        handoff(&self.scales[2], self.mode)
    }
}

fn handoff(s: &StageOutput, mode: HandoffMode) -> Tensor {
    match mode {
        HandoffMode::Image => s.image.detach(),
        HandoffMode::Feature => s.features.clone(),
    }
}

/// Hazy input at the three branch scales.
pub fn pyramid(hazy: &Tensor) -> Result<[Tensor; 3]> {
    let s = hazy.shape();
    if s.h % 4 != 0 || s.w % 4 != 0 || s.h == 0 || s.w == 0 {
        return Err(TensorError::InvalidArgument {
            op: "pyramid",
            reason: format!("height and width must be positive multiples of 4, got {}×{}", s.h, s.w),
        });
    }
    Ok([
        hazy.bilinear_resize(s.h / 4, s.w / 4)?,
        hazy.bilinear_resize(s.h / 2, s.w / 2)?,
        hazy.clone(),
    ])
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub coarse: ScaleNet,
    pub mid: ScaleNet,
    pub fine: ScaleNet,
    pub mode: HandoffMode,
}

impl Branch {
    fn new(init: &mut Init, cfg: &NetworkConfig) -> Self {
        let h = cfg.handoff_channels();
        Self {
            coarse: ScaleNet::new(init, cfg, cfg.coarse, 3, None),
            mid: ScaleNet::new(init, cfg, cfg.mid, 3 + h, Some(h)),
            fine: ScaleNet::new(init, cfg, cfg.fine, 3 + h, Some(h)),
            mode: cfg.mode,
        }
    }

    pub fn forward(&self, hazy: &Tensor) -> Result<BranchOutput> {
        self.forward_pyramid(&pyramid(hazy)?)
    }

    pub fn forward_pyramid(&self, pyr: &[Tensor; 3]) -> Result<BranchOutput> {
        let c = self.coarse.forward(&pyr[0], None)?;
        let m = self.mid.forward(&pyr[1], Some(&handoff(&c, self.mode)))?;
        let f = self.fine.forward(&pyr[2], Some(&handoff(&m, self.mode)))?;
        Ok(BranchOutput {
            scales: [c, m, f],
            mode: self.mode,
        })
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.coarse.collect(&format!("{prefix}.coarse"), &mut out);
        self.mid.collect(&format!("{prefix}.mid"), &mut out);
        self.fine.collect(&format!("{prefix}.fine"), &mut out);
        out
    }
}

/// Merges the hazy image with both branch handoffs.
#[derive(Clone, Debug)]
pub struct FusionNet {
    pub net: ScaleNet,
}

impl FusionNet {
    fn new(init: &mut Init, cfg: &NetworkConfig) -> Self {
        let c_in = 3 + 2 * cfg.handoff_channels();
        Self {
            net: ScaleNet::new(init, cfg, cfg.fusion, c_in, None),
        }
    }

    /// Unclamped output used for training losses.
    pub fn forward(&self, hazy: &Tensor, mse: &Tensor, ssim: &Tensor) -> Result<Tensor> {
        let mode = self.net.mode;
        let input = Tensor::concat_channels(&[&centered(hazy), &handoff_input(mse, mode), &handoff_input(ssim, mode)])?;
        Ok(self.net.run(&input, hazy)?.image)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.net.collect(prefix, &mut out);
        out
    }
}

/// Patch discriminator emitting a logit map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub convs: Vec<Conv>,
}

impl Discriminator {
    const CHANNELS: [usize; 5] = [3, 32, 64, 128, 1];

    fn new(init: &mut Init) -> Self {
        let convs = Self::CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, io)| Conv::new(init, io[0], io[1], 3, if i < 3 { 2 } else { 1 }, None))
            .collect();
        Self { convs }
    }

    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let s = img.shape();
        if s.h < 32 || s.w < 32 {
            return Err(TensorError::InvalidArgument {
                op: "discriminator",
                reason: format!("input must be at least 32×32, got {}×{}", s.h, s.w),
            });
        }
        let mut h = img.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i < last {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.collect(&format!("{prefix}.conv{i}"), &mut out);
        }
        out
    }
}

/// Independently optimised parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    BranchMse,
    BranchSsim,
    Fusion,
    Discriminator,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::BranchMse, Group::BranchSsim, Group::Fusion, Group::Discriminator];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::BranchMse => "mse",
            Group::BranchSsim => "ssim",
            Group::Fusion => "fusion",
            Group::Discriminator => "disc",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::BranchMse => "mse branch",
            Group::BranchSsim => "ssim branch",
            Group::Fusion => "fusion net",
            Group::Discriminator => "discriminator",
        })
    }
}

/// Everything the network produces for one hazy batch.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub mse: BranchOutput,
    pub ssim: BranchOutput,
    /// Unclamped fusion output.
    pub dehazed: Tensor,
}

#[derive(Clone, Debug)]
pub struct IdsModel {
    pub config: NetworkConfig,
    pub branch_mse: Branch,
    pub branch_ssim: Branch,
    pub fusion: FusionNet,
    pub discriminator: Discriminator,
}

pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<IdsModel> {
    cfg.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    Ok(IdsModel {
        config: cfg.clone(),
        branch_mse: Branch::new(&mut init, cfg),
        branch_ssim: Branch::new(&mut init, cfg),
        fusion: FusionNet::new(&mut init, cfg),
        discriminator: Discriminator::new(&mut init),
    })
}

impl IdsModel {
    pub fn forward(&self, hazy: &Tensor) -> Result<ModelOutput> {
        let pyr = pyramid(hazy)?;
        let mse = self.branch_mse.forward_pyramid(&pyr)?;
        let ssim = self.branch_ssim.forward_pyramid(&pyr)?;
        let dehazed = self.fusion.forward(hazy, &mse.handoff(), &ssim.handoff())?;
        Ok(ModelOutput { mse, ssim, dehazed })
    }

    /// Inference: fusion output clamped to [0, 1], off the tape.
    pub fn dehaze(&self, hazy: &Tensor) -> Result<Tensor> {
        let out = self.forward(&hazy.detach())?.dehazed;
        let data = out.data().iter().map(|&v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Tensor::new(out.shape(), data)
    }

    /// [`dehaze`](Self::dehaze) for any size: reflect-pads bottom and right
    /// to a multiple of 4, then crops back.
    pub fn dehaze_any(&self, hazy: &Tensor) -> Result<Tensor> {
        let s = hazy.shape();
        let (ph, pw) = (s.h.next_multiple_of(4), s.w.next_multiple_of(4));
        if (ph, pw) == (s.h, s.w) {
            return self.dehaze(hazy);
        }
        let padded = reflect_pad(hazy, ph, pw)?;
        crop(&self.dehaze(&padded)?, s.h, s.w)
    }

    pub fn group_params(&self, group: Group) -> Vec<(String, Tensor)> {
        let p = group.prefix();
        match group {
            Group::BranchMse => self.branch_mse.named_params(p),
            Group::BranchSsim => self.branch_ssim.named_params(p),
            Group::Fusion => self.fusion.named_params(p),
            Group::Discriminator => self.discriminator.named_params(p),
        }
    }

    /// All parameters in a fixed order: mse, ssim, fusion, disc.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        Group::ALL.iter().flat_map(|&g| self.group_params(g)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }

    /// Recovers the architecture from parameter names and shapes.
    pub fn infer_config(params: &[(String, Shape)]) -> Result<NetworkConfig> {
        let find = |name: &str| -> Result<Shape> {
            params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| *s)
                .ok_or_else(|| TensorError::InvalidArgument {
                    op: "infer_config",
                    reason: format!("missing parameter {name}"),
                })
        };
        let count = |prefix: &str, part: &str| -> usize {
            (0..)
                .take_while(|i| params.iter().any(|(n, _)| n.starts_with(&format!("{prefix}.{part}{i}."))))
                .count()
        };
        let shallow = find("mse.coarse.shallow.w")?;
        let base_channels = shallow.n;
        let dense_layers = count("mse.coarse.rdb0", "dense");
        let growth = find("mse.coarse.rdb0.dense0.w")?.n;
        let handoff = find("mse.mid.up.w")?.c;
        let mode = if handoff == 3 { HandoffMode::Image } else { HandoffMode::Feature };
        let stage = |prefix: &str| StageConfig {
            rdb_count: count(prefix, "rdb"),
            conv_count: count(prefix, "body") + 2,
        };
        let mut cfg = NetworkConfig {
            preset: None,
            coarse: stage("mse.coarse"),
            mid: stage("mse.mid"),
            fine: stage("mse.fine"),
            fusion: stage("fusion"),
            base_channels,
            growth,
            dense_layers,
            mode,
        };
        cfg.preset = Preset::ALL
            .into_iter()
            .find(|&p| NetworkConfig { preset: Some(p), ..cfg.clone() } == NetworkConfig::preset(p, mode));
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mirror padding (edge excluded) on the bottom and right, off the tape.
pub fn reflect_pad(img: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = img.shape();
    if h < s.h || w < s.w || h - s.h >= s.h || w - s.w >= s.w {
        return Err(TensorError::InvalidArgument {
            op: "reflect_pad",
            reason: format!("cannot reflect-pad {}×{} to {h}×{w}", s.h, s.w),
        });
    }
    let mirror = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let d = img.data();
    let mut out = Vec::with_capacity(s.n * s.c * h * w);
    for nc in 0..s.n * s.c {
        for y in 0..h {
            let row = nc * s.plane() + mirror(y, s.h) * s.w;
            out.extend((0..w).map(|x| d[row + mirror(x, s.w)]));
        }
    }
    Tensor::new(Shape::new(s.n, s.c, h, w), out)
}

/// Top-left `h×w` window, off the tape.
pub fn crop(img: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = img.shape();
    if h > s.h || w > s.w {
        return Err(TensorError::InvalidArgument {
            op: "crop",
            reason: format!("cannot crop {}×{} to {h}×{w}", s.h, s.w),
        });
    }
    let d = img.data();
    let mut out = Vec::with_capacity(s.n * s.c * h * w);
    for nc in 0..s.n * s.c {
        for y in 0..h {
            let row = nc * s.plane() + y * s.w;
            out.extend_from_slice(&d[row..row + w]);
        }
    }
    Tensor::new(Shape::new(s.n, s.c, h, w), out)
}
