//! Refiner and patch discriminator networks plus the `SRCK` checkpoint
//! format.
//!
//! The refiner is a residual conv net with a global skip:
//! `R(x) = clamp01(x + exit(blocks(entry(x))))`. Its exit conv starts at
//! zero, so an untrained refiner is the exact identity.
//!
//! The discriminator is a strided conv stack producing a patch logit map;
//! the map is averaged per image and squashed, giving the probability that
//! the image is refined (fake).

use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Optimizer, OptimizerConfig, Real, Tensor, Var};
use crate::imageops::ImagePatch;
use crate::rng::seeded;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("input has {got} channels, network expects {expected}")]
    Channels { expected: usize, got: usize },
    #[error("batch of patches with mismatched shapes")]
    MixedShapes,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefinerConfig {
    pub channels: usize,
    pub base_channels: usize,
    pub blocks: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            base_channels: 16,
            blocks: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub base_channels: usize,
    /// Total conv layers: `layers - 1` stride-2 4×4 convs with doubling
    /// width, then a 3×3 conv down to one logit channel.
    pub layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            base_channels: 16,
            layers: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Uniform,
    Zero,
}

#[derive(Clone, Copy, Debug)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    init: Init,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    fn build(prefix: &str, convs: &[(String, ConvSpec)], seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, c) in convs {
            let fan_in = c.cin * c.kernel * c.kernel;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |shape: &[usize]| -> Tensor<T> {
                let n: usize = shape.iter().product();
                let data = match c.init {
                    Init::Zero => vec![T::zero(); n],
                    Init::Uniform => (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect(),
                };
                Tensor::new(shape, data).expect("shape matches")
            };
            tensors.push(draw(&[c.cout, c.cin, c.kernel, c.kernel]));
            names.push(format!("{prefix}.{name}.weight"));
            tensors.push(draw(&[c.cout]));
            names.push(format!("{prefix}.{name}.bias"));
        }
        Self { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every tensor on the graph, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    /// Replace tensors from a checkpoint, checking names and shapes.
    fn load_from(&mut self, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let found = ckpt.get(name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if found.shape() != slot.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    got: found.shape().to_vec(),
                });
            }
            *slot = found.cast();
        }
        Ok(())
    }

    fn store_into(&self, ckpt: &mut Checkpoint) {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            ckpt.push(name.clone(), t.cast());
        }
    }
}

fn check_channels(g_shape: &[usize], expected: usize) -> Result<()> {
    let got = g_shape.get(1).copied().unwrap_or(0);
    if g_shape.len() != 4 || got != expected {
        return Err(NetError::Channels { expected, got });
    }
    Ok(())
}

/// The refiner `R_θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerNet<T: Real = f32> {
    config: RefinerConfig,
    params: ParamSet<T>,
}

impl<T: Real> RefinerNet<T> {
    pub fn new(config: RefinerConfig, seed: u64) -> Self {
        let (c, b) = (config.channels, config.base_channels);
        let conv = |cin, cout, init| ConvSpec {
            cin,
            cout,
            kernel: 3,
            stride: 1,
            pad: 1,
            init,
        };
        let mut convs = vec![("entry".to_string(), conv(c, b, Init::Uniform))];
        for i in 0..config.blocks {
            convs.push((format!("block{i}.conv1"), conv(b, b, Init::Uniform)));
            convs.push((format!("block{i}.conv2"), conv(b, b, Init::Uniform)));
        }
        convs.push(("exit".to_string(), conv(b, c, Init::Zero)));
        Self {
            config,
            params: ParamSet::build("refiner", &convs, seed),
        }
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> RefinerNet<U> {
        RefinerNet {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// Zeroes every trunk parameter.
    pub fn zero_trunk(&mut self) {
        for t in self.params.tensors_mut() {
            t.data_mut().fill(T::zero());
        }
    }

    /// `clamp01(x + trunk(x))` for an NCHW batch; `params` come from
    /// [`ParamSet::bind`].
    pub fn forward(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        check_channels(g.value(x).shape(), self.config.channels)?;
        let mut p = params.chunks_exact(2);
        let mut conv = |g: &mut Graph<T>, h: Var| -> Result<Var> {
            let wb = p.next().expect("parameter count matches architecture");
            Ok(g.conv2d(h, wb[0], Some(wb[1]), 1, 1)?)
        };
        let h = conv(g, x)?;
        let mut h = g.leaky_relu(h, LEAKY_SLOPE)?;
        for _ in 0..self.config.blocks {
            let r = conv(g, h)?;
            let r = g.leaky_relu(r, LEAKY_SLOPE)?;
            let r = conv(g, r)?;
            h = g.add(h, r)?;
        }
        let delta = conv(g, h)?;
        let out = g.add(x, delta)?;
        Ok(g.clamp01(out)?)
    }

    /// Inference on an NCHW tensor.
    pub fn apply(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = self.params.bind(&mut g, false);
        let xv = g.input(x);
        let out = self.forward(&mut g, &params, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn refine(&self, patches: &[ImagePatch]) -> Result<Vec<ImagePatch>> {
        let batch = patches_to_tensor(patches)?;
        let out = self.apply(batch)?;
        tensor_to_patches(&out.cast::<f32>())
    }
}

impl RefinerNet<f32> {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = infer_refiner_config(ckpt)?;
        let mut net = Self::new(config, 0);
        net.params.load_from(ckpt)?;
        Ok(net)
    }
}

fn infer_refiner_config(ckpt: &Checkpoint) -> Result<RefinerConfig, CheckpointError> {
    let entry = ckpt
        .get("refiner.entry.weight")
        .ok_or_else(|| CheckpointError::MissingTensor("refiner.entry.weight".into()))?;
    if entry.shape().len() != 4 {
        return Err(CheckpointError::ShapeMismatch {
            name: "refiner.entry.weight".into(),
            expected: vec![0, 0, 3, 3],
            got: entry.shape().to_vec(),
        });
    }
    let blocks = (0..)
        .take_while(|i| ckpt.get(&format!("refiner.block{i}.conv1.weight")).is_some())
        .count();
    Ok(RefinerConfig {
        channels: entry.shape()[1],
        base_channels: entry.shape()[0],
        blocks,
    })
}

/// The patch discriminator `D_φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet<T: Real = f32> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
}

impl<T: Real> DiscriminatorNet<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Self {
        Self {
            config,
            params: ParamSet::build("discriminator", &Self::layout(&config), seed),
        }
    }

    fn layout(config: &DiscriminatorConfig) -> Vec<(String, ConvSpec)> {
        let mut convs = Vec::new();
        let mut cin = config.channels;
        let mut width = config.base_channels;
        for i in 0..config.layers.saturating_sub(1) {
            convs.push((
                format!("conv{i}"),
                ConvSpec {
                    cin,
                    cout: width,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                    init: Init::Uniform,
                },
            ));
            cin = width;
            width *= 2;
        }
        convs.push((
            format!("conv{}", config.layers.saturating_sub(1)),
            ConvSpec {
                cin,
                cout: 1,
                kernel: 3,
                stride: 1,
                pad: 1,
                init: Init::Uniform,
            },
        ));
        convs
    }

    fn specs(&self) -> Vec<ConvSpec> {
        Self::layout(&self.config).into_iter().map(|(_, s)| s).collect()
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> DiscriminatorNet<U> {
        DiscriminatorNet {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// Zeroes the final (logit) layer, making every output exactly 0.5.
    pub fn zero_final_layer(&mut self) {
        let n = self.params.len();
        for t in &mut self.params.tensors_mut()[n - 2..] {
            t.data_mut().fill(T::zero());
        }
    }

    /// Patch logit map `[N, 1, h', w']`.
    pub fn logits(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        check_channels(g.value(x).shape(), self.config.channels)?;
        let specs = self.specs();
        let last = specs.len() - 1;
        let mut h = x;
        for (i, (spec, wb)) in specs.iter().zip(params.chunks_exact(2)).enumerate() {
            h = g.conv2d(h, wb[0], Some(wb[1]), spec.stride, spec.pad)?;
            if i != last {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }

    /// Probability-of-fake per batch element, shape `[N]`.
    pub fn forward(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        let logits = self.logits(g, params, x)?;
        let mean = g.mean_per_batch(logits)?;
        Ok(g.sigmoid(mean)?)
    }

    pub fn probabilities(&self, x: Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let params = self.params.bind(&mut g, false);
        let xv = g.input(x);
        let p = self.forward(&mut g, &params, xv)?;
        Ok(g.value(p).to_f64_vec())
    }
}

impl DiscriminatorNet<f32> {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let first = ckpt
            .get("discriminator.conv0.weight")
            .ok_or_else(|| CheckpointError::MissingTensor("discriminator.conv0.weight".into()))?;
        let layers = (0..)
            .take_while(|i| ckpt.get(&format!("discriminator.conv{i}.weight")).is_some())
            .count();
        let config = DiscriminatorConfig {
            channels: first.shape().get(1).copied().unwrap_or(0),
            base_channels: first.shape().first().copied().unwrap_or(0),
            layers,
        };
        let mut net = Self::new(config, 0);
        net.params.load_from(ckpt)?;
        Ok(net)
    }
}

/// Stacks patches of one shape into an NCHW tensor.
pub fn patches_to_tensor<T: Real>(patches: &[ImagePatch]) -> Result<Tensor<T>> {
    let first = patches.first().ok_or(NetError::EmptyBatch)?;
    let (w, h, c) = (first.width(), first.height(), first.channels());
    let mut data = Vec::with_capacity(patches.len() * first.len());
    for p in patches {
        if (p.width(), p.height(), p.channels()) != (w, h, c) {
            return Err(NetError::MixedShapes);
        }
        data.extend(p.to_planar().into_iter().map(|v| T::of(v as f64)));
    }
    Ok(Tensor::new(&[patches.len(), c, h, w], data)?)
}

pub fn tensor_to_patches(t: &Tensor<f32>) -> Result<Vec<ImagePatch>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(NetError::Channels {
            expected: 3,
            got: s.get(1).copied().unwrap_or(0),
        });
    }
    let per = s[1] * s[2] * s[3];
    t.data()
        .chunks_exact(per)
        .map(|chunk| {
            ImagePatch::from_planar(s[3], s[2], s[1], chunk)
                .map_err(|_| NetError::Channels { expected: 3, got: s[1] })
        })
        .collect()
}

const MAGIC: &[u8; 4] = b"SRCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("checkpoint lacks tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {got:?}, architecture expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Named float32 tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, tensor: Tensor<f32>) {
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        self.check_unique()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name:?} is too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| {
                CheckpointError::Corrupt(format!("tensor {name:?} is too large"))
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            ckpt.push(name, t);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        ckpt.check_unique()?;
        Ok(ckpt)
    }

    fn check_unique(&self) -> Result<(), CheckpointError> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &self.entries {
            if !seen.insert(name.as_str()) {
                return Err(CheckpointError::DuplicateName(name.clone()));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.encode()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::decode(&fs::read(path)?)
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct Model {
    pub refiner: RefinerNet<f32>,
    pub discriminator: Option<DiscriminatorNet<f32>>,
    pub refiner_opt: Option<Optimizer<f32>>,
    pub discriminator_opt: Option<Optimizer<f32>>,
}

fn store_optimizer(ckpt: &mut Checkpoint, prefix: &str, names: &[String], opt: &Optimizer<f32>) {
    ckpt.push(
        format!("opt.{prefix}.step"),
        Tensor::new(&[1], vec![opt.step_count() as f32]).expect("one value"),
    );
    for (name, (m, v)) in names.iter().zip(opt.first_moments().iter().zip(opt.second_moments())) {
        ckpt.push(format!("opt.{prefix}.m.{name}"), m.clone());
        ckpt.push(format!("opt.{prefix}.v.{name}"), v.clone());
    }
}

fn load_optimizer(
    ckpt: &Checkpoint,
    prefix: &str,
    params: &ParamSet<f32>,
    config: OptimizerConfig,
) -> Result<Option<Optimizer<f32>>> {
    let Some(step) = ckpt.get(&format!("opt.{prefix}.step")) else {
        return Ok(None);
    };
    let step = step.item().unwrap_or(0.0) as u64;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let m = ckpt.get(&format!("opt.{prefix}.m.{name}"));
        let v = ckpt.get(&format!("opt.{prefix}.v.{name}"));
        match (m, v) {
            (Some(m), Some(v)) if m.shape() == t.shape() && v.shape() == t.shape() => {
                first.push(m.clone());
                second.push(v.clone());
            }
            (None, None) => {}
            _ => {
                return Err(CheckpointError::ShapeMismatch {
                    name: format!("opt.{prefix}.*.{name}"),
                    expected: t.shape().to_vec(),
                    got: m.or(v).map(|x| x.shape().to_vec()).unwrap_or_default(),
                }
                .into())
            }
        }
    }
    Ok(Some(Optimizer::from_state(config, step, first, second)?))
}

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.refiner.params.store_into(&mut ckpt);
        if let Some(d) = &self.discriminator {
            d.params.store_into(&mut ckpt);
        }
        if let Some(opt) = &self.refiner_opt {
            store_optimizer(&mut ckpt, "refiner", self.refiner.params.names(), opt);
        }
        if let (Some(opt), Some(d)) = (&self.discriminator_opt, &self.discriminator) {
            store_optimizer(&mut ckpt, "discriminator", d.params.names(), opt);
        }
        ckpt
    }

    /// Rebuilds networks (architecture inferred from tensor shapes) and, when
    /// present, optimizer moments under `opt_config`.
    pub fn from_checkpoint(ckpt: &Checkpoint, opt_config: OptimizerConfig) -> Result<Self> {
        let refiner = RefinerNet::from_checkpoint(ckpt)?;
        let discriminator = match ckpt.get("discriminator.conv0.weight") {
            Some(_) => Some(DiscriminatorNet::from_checkpoint(ckpt)?),
            None => None,
        };
        let refiner_opt = load_optimizer(ckpt, "refiner", &refiner.params, opt_config)?;
        let discriminator_opt = match &discriminator {
            Some(d) => load_optimizer(ckpt, "discriminator", &d.params, opt_config)?,
            None => None,
        };
        Ok(Self {
            refiner,
            discriminator,
            refiner_opt,
            discriminator_opt,
        })
    }
}
