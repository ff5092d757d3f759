//! The three networks: U-Net generator (latent → four-map stack), PIDI
//! extractor (stack → embedding plus four intermediate feature maps), and the
//! patch discriminator that fuses those feature maps.
//!
//! All convolutions use 4×4 kernels with TF-style "same" padding; transposed
//! layers use stride 2, padding 1, so every stride-2 step halves or doubles
//! the spatial size exactly. Tensors are NCHW.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::nn::VarStore;
use tch::{Device, Kind, Tensor};

use crate::error::{Error, IoContext, Result};
use crate::image::{FingerprintImage, MapStack, Plane, SIZE_MULTIPLE};

pub const KERNEL: i64 = 4;
pub const INIT_STD: f64 = 0.02;
const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Square input side in pixels; multiple of 16.
    pub input_size: usize,
    /// Hidden channel counts are the full-width counts divided by this.
    pub width_divisor: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            width_divisor: 1,
        }
    }
}

impl NetConfig {
    pub fn new(input_size: usize, width_divisor: usize) -> Self {
        Self {
            input_size,
            width_divisor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % SIZE_MULTIPLE != 0 {
            return Err(Error::validation("net.input_size", "must be a positive multiple of 16"));
        }
        if !self.width_divisor.is_power_of_two() || self.width_divisor > 64 {
            return Err(Error::validation("net.width_divisor", "must be a power of two in [1, 64]"));
        }
        Ok(())
    }

    fn ch(&self, c: i64) -> i64 {
        c / self.width_divisor as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Conv,
    /// Transposed convolution, stride 2.
    Deconv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Act {
    Relu,
    Sigmoid,
    Identity,
}

/// What a layer's output is depth-concatenated with before the next layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Concat {
    /// Output of an earlier layer of the same network (1-based).
    Layer(usize),
    /// PIDI extractor feature map (1-based layer).
    Pidi(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub op: Op,
    pub stride: i64,
    pub in_c: i64,
    pub out_c: i64,
    pub bn: bool,
    pub act: Act,
    pub concat: Option<Concat>,
}

impl LayerSpec {
    fn weight_shape(&self) -> [i64; 4] {
        match self.op {
            Op::Conv => [self.out_c, self.in_c, KERNEL, KERNEL],
            Op::Deconv => [self.in_c, self.out_c, KERNEL, KERNEL],
        }
    }

    pub fn param_count(&self) -> i64 {
        let w: i64 = self.weight_shape().iter().product();
        w + self.out_c + if self.bn { 2 * self.out_c } else { 0 }
    }

    /// Compact layer type string, e.g. `C, B, R`.
    pub fn type_label(&self) -> String {
        let mut parts = vec![match self.op {
            Op::Conv => "C",
            Op::Deconv => "D",
        }];
        if self.bn {
            parts.push("B");
        }
        match self.act {
            Act::Relu => parts.push("R"),
            Act::Sigmoid => parts.push("S"),
            Act::Identity => {}
        }
        parts.join(", ")
    }
}

fn layer(index: usize, op: Op, stride: i64, in_c: i64, out_c: i64) -> LayerSpec {
    LayerSpec {
        index,
        op,
        stride,
        in_c,
        out_c,
        bn: true,
        act: Act::Relu,
        concat: None,
    }
}

pub fn generator_specs(cfg: &NetConfig) -> Vec<LayerSpec> {
    let c = |v| cfg.ch(v);
    let enc = [
        (1, 64),
        (2, 128),
        (1, 128),
        (2, 256),
        (1, 256),
        (2, 512),
        (1, 512),
        (2, 512),
        (1, 512),
        (1, 512),
    ];
    let mut specs = Vec::new();
    let mut in_c = 1;
    for (i, (stride, out)) in enc.into_iter().enumerate() {
        specs.push(layer(i + 1, Op::Conv, stride, in_c, c(out)));
        in_c = c(out);
    }
    // (transposed out, skip source, following conv out)
    let dec = [(512, 7, 512), (256, 5, 256), (128, 3, 128), (64, 1, 64)];
    let mut idx = 11;
    for (up, skip, conv) in dec {
        let mut d = layer(idx, Op::Deconv, 2, in_c, c(up));
        d.concat = Some(Concat::Layer(skip));
        specs.push(d);
        let skip_c = specs[skip - 1].out_c;
        in_c = c(up) + skip_c;
        idx += 1;
        if idx == 18 {
            break;
        }
        specs.push(layer(idx, Op::Conv, 1, in_c, c(conv)));
        in_c = c(conv);
        idx += 1;
    }
    specs.push(LayerSpec {
        index: 18,
        op: Op::Conv,
        stride: 1,
        in_c,
        out_c: 4,
        bn: false,
        act: Act::Sigmoid,
        concat: None,
    });
    specs
}

pub fn pidi_specs(cfg: &NetConfig) -> Vec<LayerSpec> {
    let outs = [64, 128, 256, 512, 512, 512, 512];
    let mut in_c = 4;
    outs.iter()
        .enumerate()
        .map(|(i, &o)| {
            let mut s = layer(i + 1, Op::Conv, 2, in_c, cfg.ch(o));
            if i == 6 {
                s.bn = false;
                s.act = Act::Identity;
            }
            in_c = cfg.ch(o);
            s
        })
        .collect()
}

/// Discriminator layers; `fused` adds the PIDI concatenations after L1–L4.
pub fn discriminator_specs(cfg: &NetConfig, fused: bool) -> Vec<LayerSpec> {
    let pidi = pidi_specs(cfg);
    let mut in_c = 5;
    let mut specs = Vec::new();
    for (i, o) in [64, 128, 256, 512].into_iter().enumerate() {
        let mut s = layer(i + 1, Op::Conv, 2, in_c, cfg.ch(o));
        in_c = cfg.ch(o);
        if fused {
            s.concat = Some(Concat::Pidi(i + 1));
            in_c += pidi[i].out_c;
        }
        specs.push(s);
    }
    specs.push(LayerSpec {
        index: 5,
        op: Op::Conv,
        stride: 1,
        in_c,
        out_c: 1,
        bn: false,
        act: Act::Sigmoid,
        concat: None,
    });
    specs
}

/// `(before, after)` padding so a stride-`s` 4-tap conv yields `ceil(n/s)`.
pub fn same_pad(n: i64, stride: i64) -> (i64, i64) {
    let out = (n + stride - 1) / stride;
    let total = ((out - 1) * stride + KERNEL - n).max(0);
    (total / 2, total - total / 2)
}

/// Spatial-by-channel shape of one activation, printed as `HxWxC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub h: i64,
    pub w: i64,
    pub c: i64,
}

impl TensorSpec {
    pub fn new(h: i64, w: i64, c: i64) -> Self {
        Self { h, w, c }
    }

    fn of(t: &Tensor) -> Self {
        let s = t.size();
        match s.len() {
            4 => Self::new(s[2], s[3], s[1]),
            2 => Self::new(s[1], 1, 1),
            _ => Self::new(0, 0, 0),
        }
    }
}

impl fmt::Display for TensorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.w == 1 && self.c == 1 && self.h > 1 {
            write!(f, "{}x1", self.h)
        } else {
            write!(f, "{}x{}x{}", self.h, self.w, self.c)
        }
    }
}

/// Per-layer shapes observed during a forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub index: usize,
    pub input: TensorSpec,
    pub output: TensorSpec,
    /// After any concatenation (equal to `output` when there is none).
    pub final_output: TensorSpec,
}

struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

struct Layer {
    spec: LayerSpec,
    weight: Tensor,
    bias: Tensor,
    bn: Option<BatchNorm>,
}

impl Layer {
    fn build(vs: &VarStore, spec: LayerSpec, rng: &mut ChaCha8Rng, std: f64) -> Self {
        let root = vs.root();
        let p = root.sub(format!("l{}", spec.index));
        let shape = spec.weight_shape();
        let n: i64 = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        let vals: Vec<f32> = (0..n).map(|_| normal.sample(rng) as f32).collect();
        let weight = p.add("weight", Tensor::from_slice(&vals).reshape(shape), true);
        let bias = p.add("bias", Tensor::zeros([spec.out_c], (Kind::Float, Device::Cpu)), true);
        let bn = spec.bn.then(|| {
            let b = p.sub("bn");
            BatchNorm {
                gamma: b.add("weight", Tensor::ones([spec.out_c], (Kind::Float, Device::Cpu)), true),
                beta: b.add("bias", Tensor::zeros([spec.out_c], (Kind::Float, Device::Cpu)), true),
                running_mean: b.zeros_no_train("running_mean", &[spec.out_c]),
                running_var: b.ones_no_train("running_var", &[spec.out_c]),
            }
        });
        Self {
            spec,
            weight,
            bias,
            bn,
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let s = &self.spec;
        let size = x.size();
        if size.len() != 4 || size[1] != s.in_c {
            return Err(Error::Shape(format!(
                "layer {} expects {} input channels, got shape {:?}",
                s.index, s.in_c, size
            )));
        }
        let y = match s.op {
            Op::Conv => {
                let (t, b) = same_pad(size[2], s.stride);
                let (l, r) = same_pad(size[3], s.stride);
                if t == b && l == r {
                    x.f_conv2d(&self.weight, Some(&self.bias), [s.stride, s.stride], [t, l], [1, 1], 1)?
                } else {
                    x.f_constant_pad_nd([l, r, t, b])?.f_conv2d(
                        &self.weight,
                        Some(&self.bias),
                        [s.stride, s.stride],
                        [0, 0],
                        [1, 1],
                        1,
                    )?
                }
            }
            Op::Deconv => x.f_conv_transpose2d(&self.weight, Some(&self.bias), [2, 2], [1, 1], [0, 0], 1, [1, 1])?,
        };
        let y = match &self.bn {
            Some(bn) => y.f_batch_norm(
                Some(&bn.gamma),
                Some(&bn.beta),
                Some(&bn.running_mean),
                Some(&bn.running_var),
                train,
                BN_MOMENTUM,
                BN_EPS,
                false,
            )?,
            None => y,
        };
        Ok(match s.act {
            Act::Relu => y.relu(),
            Act::Sigmoid => y.sigmoid(),
            Act::Identity => y,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Generator,
    Pidi,
    Discriminator,
    DiscriminatorNoPidi,
}

impl NetKind {
    pub fn specs(self, cfg: &NetConfig) -> Vec<LayerSpec> {
        match self {
            NetKind::Generator => generator_specs(cfg),
            NetKind::Pidi => pidi_specs(cfg),
            NetKind::Discriminator => discriminator_specs(cfg, true),
            NetKind::DiscriminatorNoPidi => discriminator_specs(cfg, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NetKind::Generator => "generator",
            NetKind::Pidi => "pidi",
            NetKind::Discriminator => "discriminator",
            NetKind::DiscriminatorNoPidi => "discriminator_no_pidi",
        }
    }
}

/// Hex digest identifying the parameter layout of a network.
pub fn architecture_hash(kind: NetKind, cfg: &NetConfig) -> String {
    let desc = serde_json::json!({
        "kind": kind,
        "width_divisor": cfg.width_divisor,
        "kernel": KERNEL,
        "layers": kind.specs(cfg),
    });
    let digest = Sha256::digest(desc.to_string().as_bytes());
    hex::encode(&digest[..16])
}

/// A network instance: its parameters plus the layer specs they realise.
pub struct Net {
    kind: NetKind,
    cfg: NetConfig,
    vs: VarStore,
    layers: Vec<Layer>,
}

impl fmt::Debug for Net {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Net")
            .field("kind", &self.kind)
            .field("cfg", &self.cfg)
            .field("params", &self.count_params())
            .finish()
    }
}

impl Net {
    /// Fresh parameters: conv weights N(0, 0.02), biases 0, BN scale 1 and
    /// shift 0. The sigmoid head of the discriminator starts 10x smaller so
    /// initial patch decisions sit near 0.5.
    pub fn new(kind: NetKind, cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vs = VarStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = kind.specs(&cfg);
        let n = specs.len();
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let head = i + 1 == n && matches!(kind, NetKind::Discriminator | NetKind::DiscriminatorNoPidi);
                Layer::build(&vs, s, &mut rng, if head { INIT_STD / 10.0 } else { INIT_STD })
            })
            .collect();
        Ok(Self { kind, cfg, vs, layers })
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn config(&self) -> NetConfig {
        self.cfg
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut VarStore {
        &mut self.vs
    }

    pub fn architecture_hash(&self) -> String {
        architecture_hash(self.kind, &self.cfg)
    }

    /// Learnable parameters (conv weights and biases, BN scale and shift).
    pub fn count_params(&self) -> i64 {
        self.vs.trainable_variables().iter().map(|t| t.numel() as i64).sum()
    }

    /// Trainable tensors by name, in a stable order.
    pub fn named_trainables(&self) -> Vec<(String, Tensor)> {
        let mut v: Vec<(String, Tensor)> = self
            .vs
            .variables()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// All tensors (including BN running statistics) by name, sorted.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut v: Vec<(String, Tensor)> = self.vs.variables().into_iter().collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// SHA-256 over every tensor's name, shape and raw values, in name order.
    pub fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update(format!("{:?}{:?}", t.size(), t.kind()).as_bytes());
            let flat = t.detach().to_kind(Kind::Double).flatten(0, -1);
            let vals = Vec::<f64>::try_from(&flat).unwrap_or_default();
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Switches every parameter to `Kind::Double` (used by gradient checks).
    pub fn to_double(&mut self) {
        self.vs.double();
    }

    pub fn set_trainable(&mut self, on: bool) {
        if on {
            self.vs.unfreeze()
        } else {
            self.vs.freeze()
        }
    }

    /// Copies all parameter and statistic values from `other`.
    pub fn copy_from(&mut self, other: &Net) -> Result<()> {
        if other.architecture_hash() != self.architecture_hash() {
            return Err(Error::ArchitectureMismatch {
                expected: self.architecture_hash(),
                found: other.architecture_hash(),
            });
        }
        self.vs.copy(&other.vs)?;
        Ok(())
    }

    fn check_input(&self, x: &Tensor, channels: i64) -> Result<()> {
        let s = x.size();
        if s.len() != 4 || s[1] != channels || s[2] % SIZE_MULTIPLE as i64 != 0 || s[3] % SIZE_MULTIPLE as i64 != 0 {
            return Err(Error::Shape(format!(
                "{} expects N x {channels} x H x W with H, W multiples of 16, got {s:?}",
                self.kind.name()
            )));
        }
        Ok(())
    }
}

/// Generator forward: `[N,1,H,W]` latent → `[N,4,H,W]` maps in (0,1).
pub fn generator_forward(g: &Net, latent: &Tensor, train: bool) -> Result<Tensor> {
    Ok(generator_forward_traced(g, latent, train)?.0)
}

pub fn generator_forward_traced(g: &Net, latent: &Tensor, train: bool) -> Result<(Tensor, Vec<LayerTrace>)> {
    expect_kind(g, &[NetKind::Generator])?;
    g.check_input(latent, 1)?;
    let mut outs: Vec<Tensor> = Vec::with_capacity(g.layers.len());
    let mut trace = Vec::with_capacity(g.layers.len());
    let mut x = latent.shallow_clone();
    for l in &g.layers {
        let input = TensorSpec::of(&x);
        let y = l.forward(&x, train)?;
        let output = TensorSpec::of(&y);
        outs.push(y.shallow_clone());
        x = match l.spec.concat {
            Some(Concat::Layer(j)) => Tensor::f_cat(&[&y, &outs[j - 1]], 1)?,
            _ => y,
        };
        trace.push(LayerTrace {
            index: l.spec.index,
            input,
            output,
            final_output: TensorSpec::of(&x),
        });
    }
    Ok((x, trace))
}

/// PIDI extractor outputs.
#[derive(Debug)]
pub struct PidiFeatures {
    /// Layer 1–4 activations.
    pub maps: [Tensor; 4],
    /// Flattened layer-7 output, `[N, E]`.
    pub embedding: Tensor,
}

impl PidiFeatures {
    pub fn detach(&self) -> PidiFeatures {
        PidiFeatures {
            maps: [
                self.maps[0].detach(),
                self.maps[1].detach(),
                self.maps[2].detach(),
                self.maps[3].detach(),
            ],
            embedding: self.embedding.detach(),
        }
    }
}

pub fn pidi_forward(p: &Net, stack: &Tensor, train: bool) -> Result<PidiFeatures> {
    Ok(pidi_forward_traced(p, stack, train)?.0)
}

pub fn pidi_forward_traced(p: &Net, stack: &Tensor, train: bool) -> Result<(PidiFeatures, Vec<LayerTrace>)> {
    expect_kind(p, &[NetKind::Pidi])?;
    p.check_input(stack, 4)?;
    let mut x = stack.shallow_clone();
    let mut maps = Vec::with_capacity(4);
    let mut trace = Vec::new();
    for l in &p.layers {
        let input = TensorSpec::of(&x);
        x = l.forward(&x, train)?;
        let output = TensorSpec::of(&x);
        if l.spec.index <= 4 {
            maps.push(x.shallow_clone());
        }
        let final_output = if l.spec.index == 7 {
            TensorSpec::new(output.h * output.w * output.c, 1, 1)
        } else {
            output
        };
        trace.push(LayerTrace {
            index: l.spec.index,
            input,
            output,
            final_output,
        });
    }
    let embedding = x.flatten(1, -1);
    let maps: [Tensor; 4] = maps.try_into().expect("four feature maps");
    Ok((PidiFeatures { maps, embedding }, trace))
}

/// Discriminator forward: patch decisions `[N,1,H/16,W/16]` in (0,1).
/// `pidi` must be given for the fused network and `None` for the ablation.
pub fn discriminator_forward(
    d: &Net,
    latent: &Tensor,
    stack: &Tensor,
    pidi: Option<&PidiFeatures>,
    train: bool,
) -> Result<Tensor> {
    Ok(discriminator_forward_traced(d, latent, stack, pidi, train)?.0)
}

pub fn discriminator_forward_traced(
    d: &Net,
    latent: &Tensor,
    stack: &Tensor,
    pidi: Option<&PidiFeatures>,
    train: bool,
) -> Result<(Tensor, Vec<LayerTrace>)> {
    expect_kind(d, &[NetKind::Discriminator, NetKind::DiscriminatorNoPidi])?;
    let fused = d.kind == NetKind::Discriminator;
    match (fused, pidi.is_some()) {
        (true, false) => return Err(Error::Shape("fused discriminator requires PIDI features".into())),
        (false, true) => return Err(Error::Shape("ablation discriminator takes no PIDI features".into())),
        _ => {}
    }
    d.check_input(latent, 1)?;
    d.check_input(stack, 4)?;
    if latent.size()[2..] != stack.size()[2..] || latent.size()[0] != stack.size()[0] {
        return Err(Error::Shape(format!(
            "latent {:?} and stack {:?} disagree",
            latent.size(),
            stack.size()
        )));
    }
    let mut x = Tensor::f_cat(&[latent, stack], 1)?;
    let mut trace = Vec::new();
    for l in &d.layers {
        let input = TensorSpec::of(&x);
        let y = l.forward(&x, train)?;
        let output = TensorSpec::of(&y);
        x = match (l.spec.concat, pidi) {
            (Some(Concat::Pidi(j)), Some(p)) => {
                let m = &p.maps[j - 1];
                if m.size()[2..] != y.size()[2..] {
                    return Err(Error::Shape(format!(
                        "PIDI map {j} is {:?}, discriminator layer {} output is {:?}",
                        m.size(),
                        l.spec.index,
                        y.size()
                    )));
                }
                Tensor::f_cat(&[&y, m], 1)?
            }
            _ => y,
        };
        trace.push(LayerTrace {
            index: l.spec.index,
            input,
            output,
            final_output: TensorSpec::of(&x),
        });
    }
    Ok((x, trace))
}

fn expect_kind(net: &Net, kinds: &[NetKind]) -> Result<()> {
    if kinds.contains(&net.kind) {
        Ok(())
    } else {
        Err(Error::Shape(format!("expected a {:?} network, got {:?}", kinds, net.kind)))
    }
}

/// Per-layer row for architecture summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRow {
    pub index: usize,
    pub type_label: String,
    pub stride: i64,
    pub kernels: i64,
    pub input: TensorSpec,
    pub output: TensorSpec,
    pub concat: Option<String>,
    pub final_output: TensorSpec,
    pub params: i64,
}

/// Runs a zero-input forward pass at the configured size and reports shapes
/// and parameter counts per layer.
pub fn summarize(net: &Net) -> Result<Vec<LayerRow>> {
    let _guard = tch::no_grad_guard();
    let n = net.cfg.input_size as i64;
    let opts = (Kind::Float, Device::Cpu);
    let trace = match net.kind {
        NetKind::Generator => generator_forward_traced(net, &Tensor::zeros([1, 1, n, n], opts), false)?.1,
        NetKind::Pidi => pidi_forward_traced(net, &Tensor::zeros([1, 4, n, n], opts), false)?.1,
        NetKind::Discriminator | NetKind::DiscriminatorNoPidi => {
            let latent = Tensor::zeros([1, 1, n, n], opts);
            let stack = Tensor::zeros([1, 4, n, n], opts);
            let pidi_net = Net::new(NetKind::Pidi, net.cfg, 0)?;
            let feats = pidi_forward(&pidi_net, &stack, false)?;
            let pidi = (net.kind == NetKind::Discriminator).then_some(&feats);
            discriminator_forward_traced(net, &latent, &stack, pidi, false)?.1
        }
    };
    Ok(net
        .layers
        .iter()
        .zip(trace)
        .map(|(l, t)| LayerRow {
            index: l.spec.index,
            type_label: l.spec.type_label(),
            stride: l.spec.stride,
            kernels: l.spec.out_c,
            input: t.input,
            output: t.output,
            concat: l.spec.concat.map(|c| match c {
                Concat::Layer(j) => format!("L{j}"),
                Concat::Pidi(j) => format!("PIDI L{j}"),
            }),
            final_output: t.final_output,
            params: l.spec.param_count(),
        })
        .collect())
}

// ---- tensor conversion ----

pub fn images_to_tensor(images: &[&FingerprintImage]) -> Result<Tensor> {
    let planes: Vec<&Plane> = images.iter().map(|i| i.plane()).collect();
    planes_to_tensor(&planes, 1)
}

pub fn stacks_to_tensor(stacks: &[&MapStack]) -> Result<Tensor> {
    let planes: Vec<&Plane> = stacks
        .iter()
        .flat_map(|s| [&s.ridge, &s.frequency, &s.orientation, &s.segmentation])
        .collect();
    planes_to_tensor(&planes, 4)
}

fn planes_to_tensor(planes: &[&Plane], channels: usize) -> Result<Tensor> {
    let first = planes
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(planes.len() * w * h);
    for p in planes {
        if p.width() != w || p.height() != h {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {}x{}",
                w,
                h,
                p.width(),
                p.height()
            )));
        }
        data.extend_from_slice(p.data());
    }
    let n = (planes.len() / channels) as i64;
    Ok(Tensor::from_slice(&data).reshape([n, channels as i64, h as i64, w as i64]))
}

fn tensor_planes(t: &Tensor, index: i64) -> Result<Vec<Plane>> {
    let s = t.size();
    if s.len() != 4 || index >= s[0] {
        return Err(Error::Shape(format!("cannot take item {index} of {s:?}")));
    }
    let (c, h, w) = (s[1] as usize, s[2] as usize, s[3] as usize);
    let item = t.get(index).to_kind(Kind::Float).contiguous();
    let data: Vec<f32> = Vec::<f32>::try_from(item.flatten(0, -1))?;
    Ok((0..c)
        .map(|k| Plane::from_vec(w, h, data[k * w * h..(k + 1) * w * h].to_vec()).expect("sized"))
        .collect())
}

/// Item `index` of a `[N,4,H,W]` tensor as a stack (values clamped to [0,1]).
pub fn tensor_to_stack(t: &Tensor, index: i64) -> Result<MapStack> {
    let mut planes = tensor_planes(t, index)?;
    if planes.len() != 4 {
        return Err(Error::Shape(format!("expected 4 channels, got {}", planes.len())));
    }
    for p in &mut planes {
        for v in p.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let s = planes.pop().unwrap();
    let o = planes.pop().unwrap();
    let f = planes.pop().unwrap();
    let r = planes.pop().unwrap();
    MapStack::new(r, f, o, s)
}

// ---- checkpoints ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<i64>,
    pub dtype: String,
}

/// Sidecar JSON manifest written next to each network's safetensors file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetManifest {
    pub kind: NetKind,
    pub architecture_hash: String,
    pub config: NetConfig,
    pub param_count: i64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

pub fn weights_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.safetensors"))
}

pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

/// Writes `<dir>/<stem>.safetensors` and `<dir>/<stem>.json`.
pub fn save_net(net: &Net, dir: &Path, stem: &str, meta: BTreeMap<String, serde_json::Value>) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let tensors = net
        .named_tensors()
        .into_iter()
        .map(|(name, t)| TensorEntry {
            name,
            shape: t.size(),
            dtype: format!("{:?}", t.kind()),
        })
        .collect();
    let manifest = NetManifest {
        kind: net.kind,
        architecture_hash: net.architecture_hash(),
        config: net.cfg,
        param_count: net.count_params(),
        tensors,
        meta,
    };
    net.vs.save(weights_path(dir, stem))?;
    let mp = manifest_path(dir, stem);
    fs::write(&mp, serde_json::to_vec_pretty(&manifest)?).at(&mp)?;
    Ok(())
}

pub fn read_manifest(dir: &Path, stem: &str) -> Result<NetManifest> {
    let mp = manifest_path(dir, stem);
    let bytes = fs::read(&mp).at(&mp)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
        path: mp,
        reason: e.to_string(),
    })
}

/// Loads a network saved by [`save_net`]; `expected` (if given) must match
/// the stored architecture.
pub fn load_net(dir: &Path, stem: &str, expected: Option<(NetKind, NetConfig)>) -> Result<(Net, NetManifest)> {
    let manifest = read_manifest(dir, stem)?;
    if let Some((kind, cfg)) = expected {
        let want = architecture_hash(kind, &cfg);
        if want != manifest.architecture_hash {
            return Err(Error::ArchitectureMismatch {
                expected: want,
                found: manifest.architecture_hash,
            });
        }
    }
    let recomputed = architecture_hash(manifest.kind, &manifest.config);
    if recomputed != manifest.architecture_hash {
        return Err(Error::ArchitectureMismatch {
            expected: recomputed,
            found: manifest.architecture_hash.clone(),
        });
    }
    let mut net = Net::new(manifest.kind, manifest.config, 0)?;
    let wp = weights_path(dir, stem);
    if !wp.is_file() {
        return Err(Error::io(&wp, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    net.vs.load(&wp).map_err(|e| Error::Corrupt {
        path: wp.clone(),
        reason: e.to_string(),
    })?;
    Ok((net, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: i64, w: i64, c: i64) -> TensorSpec {
        TensorSpec::new(h, w, c)
    }

    #[test]
    fn same_padding_matches_reference_shapes() {
        assert_eq!(same_pad(256, 2), (1, 1));
        assert_eq!(same_pad(16, 1), (1, 2));
        assert_eq!(same_pad(1, 2), (1, 2));
    }

    #[test]
    fn parameter_count_examples() {
        let g = generator_specs(&NetConfig::default());
        // Conv weights and bias only, as in the worked example.
        assert_eq!(4 * 4 * 64 + 64, 1088);
        assert_eq!(g[0].param_count() - 2 * 64, 1088);
        let d = discriminator_specs(&NetConfig::default(), true);
        assert_eq!(d[4].param_count(), 16_385);
    }

    #[test]
    fn count_params_equals_spec_sum() {
        let cfg = NetConfig::new(64, 8);
        for kind in [NetKind::Generator, NetKind::Pidi, NetKind::Discriminator, NetKind::DiscriminatorNoPidi] {
            let net = Net::new(kind, cfg, 1).unwrap();
            let expected: i64 = kind.specs(&cfg).iter().map(|s| s.param_count()).sum();
            assert_eq!(net.count_params(), expected, "{kind:?}");
        }
    }

    #[test]
    fn desk_shapes_scale_with_input() {
        let cfg = NetConfig::new(64, 8);
        let g = Net::new(NetKind::Generator, cfg, 0).unwrap();
        let x = Tensor::rand([2, 1, 64, 64], (Kind::Float, Device::Cpu));
        let (y, tr) = generator_forward_traced(&g, &x, true).unwrap();
        assert_eq!(y.size(), [2, 4, 64, 64]);
        assert_eq!(tr[7].output, t(4, 4, 64));
        let p = Net::new(NetKind::Pidi, cfg, 0).unwrap();
        let f = pidi_forward(&p, &y, false).unwrap();
        assert_eq!(f.embedding.size(), [2, 64]);
        let d = Net::new(NetKind::Discriminator, cfg, 0).unwrap();
        let o = discriminator_forward(&d, &x, &y, Some(&f), true).unwrap();
        assert_eq!(o.size(), [2, 1, 4, 4]);
    }

    #[test]
    fn wrong_channel_count_is_a_shape_error() {
        let g = Net::new(NetKind::Generator, NetConfig::new(64, 16), 0).unwrap();
        let x = Tensor::zeros([1, 2, 64, 64], (Kind::Float, Device::Cpu));
        assert!(matches!(generator_forward(&g, &x, false), Err(Error::Shape(_))));
        let x = Tensor::zeros([1, 1, 40, 40], (Kind::Float, Device::Cpu));
        assert!(matches!(generator_forward(&g, &x, false), Err(Error::Shape(_))));
    }

    #[test]
    fn discriminator_requires_matching_pidi_mode() {
        let cfg = NetConfig::new(64, 16);
        let d = Net::new(NetKind::Discriminator, cfg, 0).unwrap();
        let a = Net::new(NetKind::DiscriminatorNoPidi, cfg, 0).unwrap();
        let p = Net::new(NetKind::Pidi, cfg, 0).unwrap();
        let latent = Tensor::zeros([1, 1, 64, 64], (Kind::Float, Device::Cpu));
        let stack = Tensor::zeros([1, 4, 64, 64], (Kind::Float, Device::Cpu));
        let f = pidi_forward(&p, &stack, false).unwrap();
        assert!(discriminator_forward(&d, &latent, &stack, None, false).is_err());
        assert!(discriminator_forward(&a, &latent, &stack, Some(&f), false).is_err());
        assert!(discriminator_forward(&a, &latent, &stack, None, false).is_ok());
    }

    #[test]
    fn ablation_channel_counts() {
        let specs = discriminator_specs(&NetConfig::default(), false);
        let outs: Vec<i64> = specs[..4].iter().map(|s| s.out_c).collect();
        assert_eq!(outs, [64, 128, 256, 512]);
        let ins: Vec<i64> = specs.iter().map(|s| s.in_c).collect();
        assert_eq!(ins, [5, 64, 128, 256, 512]);
    }

    #[test]
    fn pidi_is_not_constant() {
        let p = Net::new(NetKind::Pidi, NetConfig::new(64, 8), 3).unwrap();
        let a = Tensor::rand([2, 4, 64, 64], (Kind::Float, Device::Cpu));
        let b = Tensor::rand([2, 4, 64, 64], (Kind::Float, Device::Cpu));
        let fa = pidi_forward(&p, &a, false).unwrap();
        let fb = pidi_forward(&p, &b, false).unwrap();
        for k in 0..4 {
            let diff = (&fa.maps[k] - &fb.maps[k]).abs().max().double_value(&[]);
            assert!(diff > 0.0, "map {k}");
        }
    }

    #[test]
    fn same_seed_gives_same_parameters() {
        let cfg = NetConfig::new(64, 8);
        let a = Net::new(NetKind::Generator, cfg, 9).unwrap();
        let b = Net::new(NetKind::Generator, cfg, 9).unwrap();
        for ((na, ta), (nb, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert_eq!(na, &nb);
            assert!(ta.equal(&tb), "{na}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetConfig::new(64, 8);
        let g = Net::new(NetKind::Generator, cfg, 5).unwrap();
        // Move BN statistics away from their initial values.
        let x = Tensor::rand([2, 1, 64, 64], (Kind::Float, Device::Cpu));
        let _ = generator_forward(&g, &x, true).unwrap();
        let before = generator_forward(&g, &x, false).unwrap();
        save_net(&g, dir.path(), "generator", BTreeMap::new()).unwrap();
        let (h, m) = load_net(dir.path(), "generator", Some((NetKind::Generator, cfg))).unwrap();
        assert_eq!(m.param_count, g.count_params());
        assert_eq!(h.count_params(), g.count_params());
        let after = generator_forward(&h, &x, false).unwrap();
        assert!(before.equal(&after));
        let names: Vec<String> = m.tensors.iter().map(|t| t.name.clone()).collect();
        assert!(names.contains(&"l1.bn.running_mean".to_string()));
    }

    #[test]
    fn checkpoint_with_other_architecture_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = Net::new(NetKind::Generator, NetConfig::new(64, 8), 5).unwrap();
        save_net(&g, dir.path(), "generator", BTreeMap::new()).unwrap();
        let r = load_net(dir.path(), "generator", Some((NetKind::Generator, NetConfig::new(64, 4))));
        assert!(matches!(r, Err(Error::ArchitectureMismatch { .. })));
    }

    #[test]
    fn corrupt_weights_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let g = Net::new(NetKind::Pidi, NetConfig::new(64, 16), 5).unwrap();
        save_net(&g, dir.path(), "pidi", BTreeMap::new()).unwrap();
        fs::write(weights_path(dir.path(), "pidi"), b"garbage").unwrap();
        assert!(matches!(load_net(dir.path(), "pidi", None), Err(Error::Corrupt { .. })));
    }

    fn param_grad_error(net: &Net, name: &str, loss: &dyn Fn() -> Tensor) -> f64 {
        let p = net.var_store().variables()[name].shallow_clone();
        for mut v in net.var_store().trainable_variables() {
            v.zero_grad();
        }
        loss().backward();
        let analytic = Vec::<f64>::try_from(p.grad().flatten(0, -1)).unwrap();
        let n = analytic.len();
        let picks: Vec<usize> = (0..12).map(|i| (i * 7919) % n).collect();
        let h = 1e-6;
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for &k in &picks {
            let _g = tch::no_grad_guard();
            let flat = p.view([-1]);
            let orig = flat.double_value(&[k as i64]);
            let _ = flat.get(k as i64).fill_(orig + h);
            let up = loss().double_value(&[]);
            let _ = flat.get(k as i64).fill_(orig - h);
            let down = loss().double_value(&[]);
            let _ = flat.get(k as i64).fill_(orig);
            num.push((up - down) / (2.0 * h));
            ana.push(analytic[k]);
        }
        let diff: f64 = ana.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt() + num.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / norm.max(1e-12)
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::objectives::gradcheck::{relative_errors, uniform};
        let cfg = NetConfig::new(16, 64);
        let mut g = Net::new(NetKind::Generator, cfg, 1).unwrap();
        let mut p = Net::new(NetKind::Pidi, cfg, 2).unwrap();
        let mut d = Net::new(NetKind::Discriminator, cfg, 3).unwrap();
        for n in [&mut g, &mut p, &mut d] {
            n.to_double();
        }
        // The small head init leaves gradients near roundoff; lift it for the check.
        tch::no_grad(|| {
            for (name, mut t) in d.named_trainables() {
                if name == "l5.weight" {
                    let _ = t.f_mul_(&Tensor::from(50.0)).unwrap();
                }
            }
        });
        let latent = uniform(&[2, 1, 16, 16], 0.0, 1.0, 4);
        let stack = uniform(&[2, 4, 16, 16], 0.0, 1.0, 5);
        // Eval-mode BN keeps the forward a fixed function across probes.
        let gen = |x: &Tensor| generator_forward(&g, x, false).unwrap().sum(Kind::Double);
        let pid = |x: &Tensor| pidi_forward(&p, x, false).unwrap().embedding.square().sum(Kind::Double);
        let dis = |l: &Tensor, s: &Tensor| {
            let f = pidi_forward(&p, s, false).unwrap();
            discriminator_forward(&d, l, s, Some(&f), false).unwrap().sum(Kind::Double)
        };
        for e in relative_errors(|x| gen(&x[0]), &[latent.shallow_clone()], 1e-6) {
            assert!(e <= 1e-3, "generator input grad {e}");
        }
        for e in relative_errors(|x| pid(&x[0]), &[stack.shallow_clone()], 1e-6) {
            assert!(e <= 1e-3, "pidi input grad {e}");
        }
        for e in relative_errors(|x| dis(&x[0], &x[1]), &[latent.shallow_clone(), stack.shallow_clone()], 1e-6) {
            assert!(e <= 1e-3, "discriminator input grad {e}");
        }
        for name in ["l1.weight", "l10.bn.weight", "l18.weight"] {
            let e = param_grad_error(&g, name, &|| gen(&latent));
            assert!(e <= 1e-3, "generator {name}: {e}");
        }
        for name in ["l1.weight", "l7.weight"] {
            let e = param_grad_error(&p, name, &|| pid(&stack));
            assert!(e <= 1e-3, "pidi {name}: {e}");
        }
        for name in ["l1.weight", "l5.weight"] {
            let e = param_grad_error(&d, name, &|| dis(&latent, &stack));
            assert!(e <= 1e-3, "discriminator {name}: {e}");
        }
    }

    #[test]
    fn pidi_features_influence_the_discriminator() {
        let cfg = NetConfig::new(64, 16);
        let mut p = Net::new(NetKind::Pidi, cfg, 2).unwrap();
        let mut d = Net::new(NetKind::Discriminator, cfg, 3).unwrap();
        p.to_double();
        d.to_double();
        let latent = crate::objectives::gradcheck::uniform(&[1, 1, 64, 64], 0.0, 1.0, 1);
        let stack = crate::objectives::gradcheck::uniform(&[1, 4, 64, 64], 0.0, 1.0, 2);
        let f = pidi_forward(&p, &stack, false).unwrap();
        let maps: Vec<Tensor> = f.maps.iter().map(|m| m.detach().set_requires_grad(true)).collect();
        let feats = PidiFeatures {
            maps: [maps[0].shallow_clone(), maps[1].shallow_clone(), maps[2].shallow_clone(), maps[3].shallow_clone()],
            embedding: f.embedding.detach(),
        };
        let out = discriminator_forward(&d, &latent, &stack, Some(&feats), false).unwrap().sum(Kind::Double);
        out.backward();
        for (k, m) in maps.iter().enumerate() {
            assert!(m.grad().abs().max().double_value(&[]) > 0.0, "map {k}");
        }
        // Finite-difference probe: zeroing the features moves the output.
        let zeros = PidiFeatures {
            maps: [maps[0].zeros_like(), maps[1].zeros_like(), maps[2].zeros_like(), maps[3].zeros_like()],
            embedding: f.embedding.detach(),
        };
        let z = discriminator_forward(&d, &latent, &stack, Some(&zeros), false).unwrap().sum(Kind::Double);
        assert!((z.double_value(&[]) - out.double_value(&[])).abs() > 0.0);
    }

    #[test]
    fn stack_tensor_round_trip() {
        let s = MapStack::new(
            Plane::from_fn(16, 16, |x, _| (x % 2) as f32),
            Plane::from_fn(16, 16, |x, y| ((x + y) as f32 / 40.0).min(1.0)),
            Plane::from_fn(16, 16, |_, y| y as f32 / 16.0),
            Plane::new(16, 16, 1.0),
        )
        .unwrap();
        let t = stacks_to_tensor(&[&s, &s]).unwrap();
        assert_eq!(t.size(), [2, 4, 16, 16]);
        assert_eq!(tensor_to_stack(&t, 1).unwrap(), s);
    }
}
