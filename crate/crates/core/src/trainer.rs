//! Adversarial losses, the alternating training loop and dataset-level
//! refinement / subsampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Optimizer, OptimizerConfig, Real, Tensor, Var};
use crate::imageops::{ImageError, ImagePatch};
use crate::nets::{
    patches_to_tensor, tensor_to_patches, DiscriminatorConfig, DiscriminatorNet, Model, NetError,
    RefinerConfig, RefinerNet,
};
use crate::rng::seeded;

/// Floor applied inside every logarithm of the losses.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid sample set: {0}")]
    Samples(String),
    #[error("loss input is not finite")]
    NonFiniteLoss,
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Synthetic,
    Refined,
    Real,
    RealSubsample,
}

/// Same-shape patches with a role and per-patch names.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    role: Role,
    patches: Vec<ImagePatch>,
    names: Vec<String>,
}

impl SampleSet {
    pub fn new(role: Role, patches: Vec<ImagePatch>) -> Result<Self> {
        let names = (0..patches.len()).map(|i| format!("{i:05}.png")).collect();
        Self::with_names(role, patches, names)
    }

    pub fn with_names(role: Role, patches: Vec<ImagePatch>, names: Vec<String>) -> Result<Self> {
        let first = patches
            .first()
            .ok_or_else(|| TrainError::Samples("set is empty".into()))?;
        let shape = (first.width(), first.height(), first.channels());
        if let Some(i) = patches
            .iter()
            .position(|p| (p.width(), p.height(), p.channels()) != shape)
        {
            return Err(TrainError::Samples(format!(
                "patch {i} differs in shape from patch 0 ({}x{}x{})",
                shape.0, shape.1, shape.2
            )));
        }
        if names.len() != patches.len() {
            return Err(TrainError::Samples("name count differs from patch count".into()));
        }
        Ok(Self { role, patches, names })
    }

    /// Loads every `*.png` in `dir`, sorted by file name.
    pub fn load_dir(dir: &Path, role: Role) -> Result<Self> {
        let io = |source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        let mut patches = Vec::with_capacity(files.len());
        let mut names = Vec::with_capacity(files.len());
        for f in &files {
            patches.push(ImagePatch::load_png(f)?);
            names.push(f.file_name().unwrap_or_default().to_string_lossy().into_owned());
        }
        if patches.is_empty() {
            return Err(TrainError::Samples(format!("no PNG files in {}", dir.display())));
        }
        Self::with_names(role, patches, names)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (p, name) in self.patches.iter().zip(&self.names) {
            p.save_png(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn patches(&self) -> &[ImagePatch] {
        &self.patches
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.patches[0].channels()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let p = &self.patches[0];
        (p.width(), p.height(), p.channels())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub adversarial: f64,
    pub identity: f64,
}

fn ln_floor(v: f64) -> f64 {
    v.max(LOG_FLOOR).ln()
}

fn identity_term(refined: &[f32], original: &[f32], batch: usize, l1_sum: bool) -> f64 {
    let total: f64 = refined
        .iter()
        .zip(original)
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum();
    if l1_sum {
        total
    } else {
        // per-image mean, summed over the batch
        total * batch as f64 / refined.len() as f64
    }
}

/// `−Σ ln(1 − D(R(x))) + λ·‖R(x) − x‖₁`, with the norm taken as the
/// per-pixel mean per image unless `l1_sum` is set.
pub fn refiner_loss(
    d_fake: &[f64],
    refined: &[f32],
    original: &[f32],
    lambda: f64,
    l1_sum: bool,
) -> Result<LossParts> {
    if refined.len() != original.len() || d_fake.is_empty() || !refined.len().is_multiple_of(d_fake.len()) {
        return Err(TrainError::Samples(
            "refined, original and probability batches do not align".into(),
        ));
    }
    if d_fake.iter().any(|v| !v.is_finite())
        || refined.iter().chain(original).any(|v| !v.is_finite())
        || !lambda.is_finite()
    {
        return Err(TrainError::NonFiniteLoss);
    }
    let adversarial: f64 = -d_fake.iter().map(|&d| ln_floor(1.0 - d)).sum::<f64>();
    let identity = identity_term(refined, original, d_fake.len(), l1_sum);
    Ok(LossParts {
        total: adversarial + lambda * identity,
        adversarial,
        identity,
    })
}

/// `−Σ ln D(R(x)) − Σ ln(1 − D(y))`.
pub fn discriminator_loss(d_fake: &[f64], d_real: &[f64]) -> Result<f64> {
    if d_fake.iter().chain(d_real).any(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteLoss);
    }
    Ok(-d_fake.iter().map(|&d| ln_floor(d)).sum::<f64>() - d_real.iter().map(|&d| ln_floor(1.0 - d)).sum::<f64>())
}

/// Graph form of [`refiner_loss`]; returns `(total, adversarial, identity)`.
pub fn refiner_loss_graph<T: Real>(
    g: &mut Graph<T>,
    d_fake: Var,
    refined: Var,
    original: Var,
    lambda: f64,
    l1_sum: bool,
) -> Result<(Var, Var, Var)> {
    let one = g.constant(1.0);
    let minus_one = g.constant(-1.0);
    let keep = g.sub(one, d_fake)?;
    let logs = g.log(keep)?;
    let s = g.sum(logs)?;
    let adversarial = g.mul(s, minus_one)?;
    let diff = g.sub(refined, original)?;
    let abs = g.abs(diff)?;
    let identity = if l1_sum {
        g.sum(abs)?
    } else {
        let per = g.mean_per_batch(abs)?;
        g.sum(per)?
    };
    let lam = g.constant(lambda);
    let weighted = g.mul(identity, lam)?;
    let total = g.add(adversarial, weighted)?;
    Ok((total, adversarial, identity))
}

/// Graph form of [`discriminator_loss`].
pub fn discriminator_loss_graph<T: Real>(g: &mut Graph<T>, d_fake: Var, d_real: Var) -> Result<Var> {
    let one = g.constant(1.0);
    let minus_one = g.constant(-1.0);
    let lf = g.log(d_fake)?;
    let fake_sum = g.sum(lf)?;
    let keep = g.sub(one, d_real)?;
    let lr = g.log(keep)?;
    let real_sum = g.sum(lr)?;
    let both = g.add(fake_sum, real_sum)?;
    Ok(g.mul(both, minus_one)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub history_buffer_size: usize,
    pub log_every: u64,
    /// Refiner updates per step.
    pub refiner_updates: usize,
    /// Discriminator updates per step.
    pub discriminator_updates: usize,
    /// Use the raw L1 sum in the identity term instead of the per-pixel mean.
    pub l1_sum: bool,
    #[serde(skip)]
    pub refiner: RefinerArch,
    #[serde(skip)]
    pub discriminator: DiscriminatorArch,
}

/// Refiner width and depth; channels come from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefinerArch {
    pub base_channels: usize,
    pub blocks: usize,
}

impl Default for RefinerArch {
    fn default() -> Self {
        let d = RefinerConfig::default();
        Self {
            base_channels: d.base_channels,
            blocks: d.blocks,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorArch {
    pub base_channels: usize,
    pub layers: usize,
}

impl Default for DiscriminatorArch {
    fn default() -> Self {
        let d = DiscriminatorConfig::default();
        Self {
            base_channels: d.base_channels,
            layers: d.layers,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 40.0,
            batch_size: 1,
            max_steps: 1000,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            history_buffer_size: 0,
            log_every: 100,
            refiner_updates: 1,
            discriminator_updates: 1,
            l1_sum: false,
            refiner: RefinerArch::default(),
            discriminator: DiscriminatorArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite value >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1");
        }
        if self.refiner_updates == 0 || self.discriminator_updates == 0 {
            return bad("update counts must be >= 1");
        }
        if self.discriminator.layers == 0 || self.refiner.base_channels == 0 || self.discriminator.base_channels == 0 {
            return bad("network widths and depth must be >= 1");
        }
        self.optimizer
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// One loss-log line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    #[serde(rename = "L_R")]
    pub l_r: f64,
    #[serde(rename = "L_R_adv")]
    pub l_r_adv: f64,
    #[serde(rename = "L_R_id")]
    pub l_r_id: f64,
    #[serde(rename = "L_D")]
    pub l_d: f64,
    pub d_fake_mean: f64,
    pub d_real_mean: f64,
}

/// Alternating refiner / discriminator training state.
pub struct Trainer {
    cfg: TrainConfig,
    refiner: RefinerNet<f32>,
    discriminator: DiscriminatorNet<f32>,
    refiner_opt: Optimizer<f32>,
    discriminator_opt: Optimizer<f32>,
    rng: ChaCha8Rng,
    step: u64,
    history: Vec<Vec<f32>>,
    d_fake_trace: Vec<f64>,
}

impl Trainer {
    /// Fresh networks for `channels`-channel data; all randomness derives
    /// from `cfg.seed`.
    pub fn new(cfg: TrainConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(cfg.seed);
        let refiner = RefinerNet::new(
            RefinerConfig {
                channels,
                base_channels: cfg.refiner.base_channels,
                blocks: cfg.refiner.blocks,
            },
            rng.random(),
        );
        let discriminator = DiscriminatorNet::new(
            DiscriminatorConfig {
                channels,
                base_channels: cfg.discriminator.base_channels,
                layers: cfg.discriminator.layers,
            },
            rng.random(),
        );
        Ok(Self {
            refiner_opt: Optimizer::new(cfg.optimizer)?,
            discriminator_opt: Optimizer::new(cfg.optimizer)?,
            cfg,
            refiner,
            discriminator,
            rng,
            step: 0,
            history: Vec::new(),
            d_fake_trace: Vec::new(),
        })
    }

    /// Continue from a saved model. Missing parts (discriminator, optimizer
    /// state) start fresh.
    pub fn resume(cfg: TrainConfig, model: Model) -> Result<Self> {
        let channels = model.refiner.config().channels;
        let mut t = Self::new(cfg, channels)?;
        t.step = model.refiner_opt.as_ref().map_or(0, Optimizer::step_count);
        t.refiner = model.refiner;
        if let Some(d) = model.discriminator {
            t.discriminator = d;
        }
        if let Some(o) = model.refiner_opt {
            t.refiner_opt = o;
        }
        if let Some(o) = model.discriminator_opt {
            t.discriminator_opt = o;
        }
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn refiner(&self) -> &RefinerNet<f32> {
        &self.refiner
    }

    pub fn discriminator(&self) -> &DiscriminatorNet<f32> {
        &self.discriminator
    }

    pub fn refiner_mut(&mut self) -> &mut RefinerNet<f32> {
        &mut self.refiner
    }

    pub fn discriminator_mut(&mut self) -> &mut DiscriminatorNet<f32> {
        &mut self.discriminator
    }

    /// Mean `D(R(x))` of every completed step, in order.
    pub fn d_fake_trace(&self) -> &[f64] {
        &self.d_fake_trace
    }

    pub fn into_model(self) -> Model {
        Model {
            refiner: self.refiner,
            discriminator: Some(self.discriminator),
            refiner_opt: Some(self.refiner_opt),
            discriminator_opt: Some(self.discriminator_opt),
        }
    }

    fn sample_batch(&mut self, set: &SampleSet) -> Result<Tensor<f32>> {
        let picks: Vec<ImagePatch> = (0..self.cfg.batch_size)
            .map(|_| set.patches[self.rng.random_range(0..set.len())].clone())
            .collect();
        Ok(patches_to_tensor(&picks)?)
    }

    fn refiner_update(&mut self, x: &Tensor<f32>) -> Result<LossParts> {
        let mut g = Graph::new();
        let r_params = self.refiner.params().bind(&mut g, true);
        let d_params = self.discriminator.params().bind(&mut g, false);
        let xv = g.input(x.clone());
        let refined = self.refiner.forward(&mut g, &r_params, xv)?;
        let d_fake = self.discriminator.forward(&mut g, &d_params, refined)?;
        let (total, adv, id) =
            refiner_loss_graph(&mut g, d_fake, refined, xv, self.cfg.lambda, self.cfg.l1_sum)?;
        let parts = LossParts {
            total: g.value(total).data()[0] as f64,
            adversarial: g.value(adv).data()[0] as f64,
            identity: g.value(id).data()[0] as f64,
        };
        if !parts.total.is_finite() {
            return Err(TrainError::Diverged { step: self.step + 1 });
        }
        let mut grads = g.backward(total)?;
        let grads: Vec<Tensor<f32>> = r_params.iter().map(|&v| grads.take(v).expect("param")).collect();
        let refs: Vec<&Tensor<f32>> = grads.iter().collect();
        self.refiner_opt
            .step(self.refiner.params_mut().tensors_mut(), &refs)
            .map_err(|e| self.divergence(e))?;
        Ok(parts)
    }

    fn divergence(&self, e: AutodiffError) -> TrainError {
        match e {
            AutodiffError::NonFiniteGradient { .. } => TrainError::Diverged { step: self.step + 1 },
            other => other.into(),
        }
    }

    /// Swap refined images with the history pool, CycleGAN style: each new
    /// image enters the pool; once full, half the time the discriminator
    /// sees an older image instead.
    fn mix_history(&mut self, refined: Tensor<f32>) -> Result<Tensor<f32>> {
        let cap = self.cfg.history_buffer_size;
        if cap == 0 {
            return Ok(refined);
        }
        let shape = refined.shape().to_vec();
        let per = refined.numel() / shape[0];
        let mut data = refined.into_data();
        for chunk in data.chunks_exact_mut(per) {
            if self.history.len() < cap {
                self.history.push(chunk.to_vec());
            } else if self.rng.random_bool(0.5) {
                let k = self.rng.random_range(0..cap);
                let old = std::mem::replace(&mut self.history[k], chunk.to_vec());
                chunk.copy_from_slice(&old);
            }
        }
        Ok(Tensor::new(&shape, data)?)
    }

    fn discriminator_update(&mut self, refined: &Tensor<f32>, y: &Tensor<f32>) -> Result<(f64, f64, f64)> {
        let mut g = Graph::new();
        let d_params = self.discriminator.params().bind(&mut g, true);
        let fake = g.input(refined.clone());
        let real = g.input(y.clone());
        let d_fake = self.discriminator.forward(&mut g, &d_params, fake)?;
        let d_real = self.discriminator.forward(&mut g, &d_params, real)?;
        let loss = discriminator_loss_graph(&mut g, d_fake, d_real)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(TrainError::Diverged { step: self.step + 1 });
        }
        let mean = |v: Var| {
            let t = g.value(v);
            t.data().iter().map(|&p| p as f64).sum::<f64>() / t.numel() as f64
        };
        let (fake_mean, real_mean) = (mean(d_fake), mean(d_real));
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = d_params.iter().map(|&v| grads.take(v).expect("param")).collect();
        let refs: Vec<&Tensor<f32>> = grads.iter().collect();
        self.discriminator_opt
            .step(self.discriminator.params_mut().tensors_mut(), &refs)
            .map_err(|e| self.divergence(e))?;
        Ok((value, fake_mean, real_mean))
    }

    /// One refiner update (or several, per config) followed by discriminator
    /// update(s) on freshly refined images.
    pub fn train_step(&mut self, x: &SampleSet, y: &SampleSet) -> Result<LossRecord> {
        if x.shape() != y.shape() {
            return Err(TrainError::Samples("X and Y patch shapes differ".into()));
        }
        let mut parts = None;
        for _ in 0..self.cfg.refiner_updates {
            let xb = self.sample_batch(x)?;
            parts = Some(self.refiner_update(&xb)?);
        }
        let parts = parts.expect("at least one refiner update");
        let mut d_out = None;
        for _ in 0..self.cfg.discriminator_updates {
            let xb = self.sample_batch(x)?;
            let yb = self.sample_batch(y)?;
            let refined = self.refiner.apply(xb)?;
            let refined = self.mix_history(refined)?;
            d_out = Some(self.discriminator_update(&refined, &yb)?);
        }
        let (l_d, d_fake_mean, d_real_mean) = d_out.expect("at least one discriminator update");
        self.step += 1;
        self.d_fake_trace.push(d_fake_mean);
        Ok(LossRecord {
            step: self.step,
            l_r: parts.total,
            l_r_adv: parts.adversarial,
            l_r_id: parts.identity,
            l_d,
            d_fake_mean,
            d_real_mean,
        })
    }

    /// Runs until `max_steps`, handing every `log_every`-th record (and the
    /// last one) to `sink`.
    pub fn run(
        &mut self,
        x: &SampleSet,
        y: &SampleSet,
        mut sink: impl FnMut(&LossRecord) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.cfg.max_steps {
            let rec = self.train_step(x, y)?;
            if rec.step % self.cfg.log_every == 0 || rec.step == self.cfg.max_steps {
                sink(&rec)?;
            }
        }
        Ok(())
    }
}

/// Trains from scratch and returns the model plus the logged records.
pub fn train(x: &SampleSet, y: &SampleSet, cfg: &TrainConfig) -> Result<(Model, Vec<LossRecord>)> {
    let mut trainer = Trainer::new(cfg.clone(), x.channels())?;
    let mut log = Vec::new();
    trainer.run(x, y, |r| {
        log.push(*r);
        Ok(())
    })?;
    Ok((trainer.into_model(), log))
}

/// `X̂ = {R(x_i)}` in input order, keeping names.
pub fn refine_dataset(net: &RefinerNet<f32>, x: &SampleSet) -> Result<SampleSet> {
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.patches.chunks(16) {
        let t = net.apply(patches_to_tensor(chunk)?)?;
        out.extend(tensor_to_patches(&t)?);
    }
    SampleSet::with_names(Role::Refined, out, x.names.clone())
}

/// `k` distinct elements drawn uniformly without replacement.
pub fn subsample(y: &SampleSet, k: usize, seed: u64) -> Result<SampleSet> {
    let idx = subsample_indices(y.len(), k, seed)?;
    SampleSet::with_names(
        Role::RealSubsample,
        idx.iter().map(|&i| y.patches[i].clone()).collect(),
        idx.iter().map(|&i| y.names[i].clone()).collect(),
    )
}

/// Partial Fisher-Yates over `0..n`.
pub fn subsample_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(TrainError::Samples(format!("cannot draw {k} of {n} without replacement")));
    }
    let mut rng = seeded(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    Ok(idx)
}
