#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sat_refine::autodiff::{AutodiffError, Op};
use sat_refine::metrics::SampleMatrix;
use sat_refine::nets::{DiscriminatorConfig, DiscriminatorNet, RefinerConfig, RefinerNet};
use sat_refine::trainer::{discriminator_loss_graph, refiner_loss_graph};
use sat_refine::{Graph, Tensor, Var};

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `[lo, hi)`, nudged at least `gap` away from every value in
/// `avoid`.
pub fn tensor_avoiding(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, avoid: &[f64], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = r.random_range(lo..hi);
            if avoid.iter().all(|a| (v - a).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn scalar_loss(build: &Build, params: &[Tensor<f64>], weights: Option<&Tensor<f64>>) -> (Graph<f64>, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = match weights {
        Some(w) => {
            let w = g.input(w.clone());
            let prod = g.mul(out, w).unwrap();
            g.sum(prod).unwrap()
        }
        None => out,
    };
    (g, vars, loss)
}

/// Largest per-tensor relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the
/// backward pass and central differences of step `h`. Non-scalar outputs
/// are reduced with fixed random weights first.
pub fn gradcheck(build: &Build, params: &[Tensor<f64>], h: f64, seed: u64) -> f64 {
    let (g, _, out) = scalar_loss(build, params, None);
    let shape = g.value(out).shape().to_vec();
    let weights = if g.value(out).numel() == 1 {
        None
    } else {
        let n: usize = shape.iter().product();
        let mut r = rng(seed);
        Some(Tensor::new(&shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap())
    };
    let (g, vars, loss) = scalar_loss(build, params, weights.as_ref());
    let grads = g.backward(loss).unwrap();
    let eval = |ps: &[Tensor<f64>]| {
        let (g, _, l) = scalar_loss(build, ps, weights.as_ref());
        g.value(l).data()[0]
    };
    let mut worst = 0.0f64;
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().to_f64_vec();
        let mut diff = 0.0;
        let (mut na, mut nn) = (0.0, 0.0);
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[i] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    worst
}

pub struct OpCase {
    pub name: &'static str,
    pub build: Box<Build>,
    pub inputs: Vec<Tensor<f64>>,
}

fn case(name: &'static str, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError> + 'static, inputs: Vec<Tensor<f64>>) -> OpCase {
    OpCase { name, build: Box::new(build), inputs }
}

/// One case per differentiable op plus both loss graphs, with inputs kept
/// away from kinks.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut t = |shape: &[usize], lo: f64, hi: f64, avoid: &[f64]| tensor_avoiding(&mut r, shape, lo, hi, avoid, 0.05);
    let a = t(&[2, 3, 4], -1.0, 1.0, &[]);
    let b = t(&[2, 3, 4], -1.0, 1.0, &[]);
    vec![
        case("add", |g, v| g.add(v[0], v[1]), vec![a.clone(), b.clone()]),
        case("sub", |g, v| g.sub(v[0], v[1]), vec![a.clone(), b.clone()]),
        case("mul", |g, v| g.mul(v[0], v[1]), vec![a.clone(), b.clone()]),
        case("mul (scalar broadcast)", |g, v| g.mul(v[0], v[1]), vec![a.clone(), t(&[1], 0.5, 2.0, &[])]),
        case("matmul", |g, v| g.matmul(v[0], v[1]), vec![t(&[3, 5], -1.0, 1.0, &[]), t(&[5, 4], -1.0, 1.0, &[])]),
        case(
            "conv2d 3x3 pad 1",
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
            vec![t(&[2, 2, 5, 5], -1.0, 1.0, &[]), t(&[3, 2, 3, 3], -1.0, 1.0, &[]), t(&[3], -1.0, 1.0, &[])],
        ),
        case(
            "conv2d 4x4 stride 2 pad 1",
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
            vec![t(&[2, 3, 6, 6], -1.0, 1.0, &[]), t(&[2, 3, 4, 4], -1.0, 1.0, &[]), t(&[2], -1.0, 1.0, &[])],
        ),
        case("conv2d no bias", |g, v| g.conv2d(v[0], v[1], None, 1, 0), vec![t(&[1, 2, 4, 4], -1.0, 1.0, &[]), t(&[2, 2, 2, 2], -1.0, 1.0, &[])]),
        case("leaky_relu", |g, v| g.leaky_relu(v[0], 0.2), vec![t(&[2, 3, 4], -1.0, 1.0, &[0.0])]),
        case("sigmoid", |g, v| g.sigmoid(v[0]), vec![t(&[2, 3, 4], -4.0, 4.0, &[])]),
        case("tanh", |g, v| g.tanh(v[0]), vec![t(&[2, 3, 4], -2.0, 2.0, &[])]),
        case("log", |g, v| g.log(v[0]), vec![t(&[2, 3, 4], 0.1, 3.0, &[])]),
        case("abs", |g, v| g.abs(v[0]), vec![t(&[2, 3, 4], -1.0, 1.0, &[0.0])]),
        case("sum", |g, v| g.sum(v[0]), vec![a.clone()]),
        case("mean", |g, v| g.mean(v[0]), vec![a.clone()]),
        case("sum_per_batch", |g, v| g.sum_per_batch(v[0]), vec![a.clone()]),
        case("mean_per_batch", |g, v| g.mean_per_batch(v[0]), vec![a.clone()]),
        case("pad", |g, v| g.apply(Op::Pad { pad: 2 }, &[v[0]]), vec![t(&[1, 2, 3, 3], -1.0, 1.0, &[])]),
        case("clamp01", |g, v| g.clamp01(v[0]), vec![t(&[2, 3, 4], -0.5, 1.5, &[0.0, 1.0])]),
        case(
            "refiner loss",
            |g, v| Ok(refiner_loss_graph(g, v[0], v[1], v[2], 40.0, false).map_err(expect_autodiff)?.0),
            vec![t(&[2], 0.05, 0.95, &[]), t(&[2, 3, 4, 4], 0.0, 1.0, &[]), t(&[2, 3, 4, 4], 0.0, 1.0, &[])],
        ),
        case(
            "refiner loss (l1 sum)",
            |g, v| Ok(refiner_loss_graph(g, v[0], v[1], v[2], 0.5, true).map_err(expect_autodiff)?.0),
            vec![t(&[2], 0.05, 0.95, &[]), t(&[2, 3, 4, 4], 0.0, 1.0, &[]), t(&[2, 3, 4, 4], 0.0, 1.0, &[])],
        ),
        case(
            "discriminator loss",
            |g, v| discriminator_loss_graph(g, v[0], v[1]).map_err(expect_autodiff),
            vec![t(&[3], 0.05, 0.95, &[]), t(&[3], 0.05, 0.95, &[])],
        ),
    ]
}

fn expect_autodiff(e: sat_refine::trainer::TrainError) -> AutodiffError {
    match e {
        sat_refine::trainer::TrainError::Autodiff(a) => a,
        other => panic!("unexpected error {other}"),
    }
}

/// Tiny double-precision refiner/discriminator pair and a batch on which
/// `D(R(x))` is differentiable: inputs sit in the middle of `[0, 1]` so the
/// output clamp stays inactive, and the exit layer is non-zero.
pub struct TinyGan {
    pub refiner: RefinerNet<f64>,
    pub discriminator: DiscriminatorNet<f64>,
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
}

pub fn tiny_gan(seed: u64) -> TinyGan {
    let mut refiner = RefinerNet::<f32>::new(
        RefinerConfig {
            channels: 3,
            base_channels: 4,
            blocks: 1,
        },
        seed,
    )
    .cast::<f64>();
    let mut r = rng(seed ^ 0xabc);
    let names = refiner.params().names().to_vec();
    for (name, t) in names.iter().zip(refiner.params_mut().tensors_mut()) {
        if name.starts_with("refiner.exit") {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.03..0.03));
        }
    }
    let discriminator = DiscriminatorNet::<f32>::new(
        DiscriminatorConfig {
            channels: 3,
            base_channels: 4,
            layers: 2,
        },
        seed + 1,
    )
    .cast::<f64>();
    TinyGan {
        refiner,
        discriminator,
        x: tensor_avoiding(&mut r, &[2, 3, 8, 8], 0.35, 0.65, &[], 0.0),
        y: tensor_avoiding(&mut r, &[2, 3, 8, 8], 0.2, 0.8, &[], 0.0),
    }
}

/// `L_R` through the full `D∘R` graph as a function of the refiner
/// parameters, discriminator frozen.
pub fn refiner_objective(gan: &TinyGan, lambda: f64) -> (Box<Build>, Vec<Tensor<f64>>) {
    let refiner = gan.refiner.clone();
    let disc = gan.discriminator.clone();
    let x = gan.x.clone();
    let build = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var, AutodiffError> {
        let d_params = disc.params().bind(g, false);
        let xv = g.input(x.clone());
        let refined = refiner.forward(g, v, xv).map_err(net_err)?;
        let d_fake = disc.forward(g, &d_params, refined).map_err(net_err)?;
        Ok(refiner_loss_graph(g, d_fake, refined, xv, lambda, false).map_err(expect_autodiff)?.0)
    };
    (Box::new(build), gan.refiner.params().tensors().to_vec())
}

/// `L_D` on refined fakes and real images as a function of the
/// discriminator parameters.
pub fn discriminator_objective(gan: &TinyGan) -> (Box<Build>, Vec<Tensor<f64>>) {
    let fake = gan.refiner.apply(gan.x.clone()).unwrap();
    let disc = gan.discriminator.clone();
    let y = gan.y.clone();
    let build = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var, AutodiffError> {
        let f = g.input(fake.clone());
        let r = g.input(y.clone());
        let d_fake = disc.forward(g, v, f).map_err(net_err)?;
        let d_real = disc.forward(g, v, r).map_err(net_err)?;
        discriminator_loss_graph(g, d_fake, d_real).map_err(expect_autodiff)
    };
    (Box::new(build), gan.discriminator.params().tensors().to_vec())
}

fn net_err(e: sat_refine::nets::NetError) -> AutodiffError {
    match e {
        sat_refine::nets::NetError::Autodiff(a) => a,
        other => panic!("unexpected error {other}"),
    }
}

/// `n` rows of `N(mean, 1)^d`.
pub fn gaussian(n: usize, d: usize, mean: f64, seed: u64) -> SampleMatrix {
    let mut r = rng(seed);
    let normal = Normal::new(mean, 1.0).unwrap();
    SampleMatrix::new(n, d, (0..n * d).map(|_| normal.sample(&mut r)).collect()).unwrap()
}

/// Entropy in nats of `exp(−β d²)`-weighted neighbours of a row, written
/// directly from the definition.
pub fn row_entropy(d2_row: &[f64], i: usize, beta: f64) -> f64 {
    let w: Vec<f64> = d2_row
        .iter()
        .enumerate()
        .map(|(j, &d)| if j == i { 0.0 } else { (-beta * d).exp() })
        .collect();
    let z: f64 = w.iter().sum();
    -w.iter().filter(|&&v| v > 0.0).map(|&v| (v / z) * (v / z).ln()).sum::<f64>()
}

/// Brute-force precision: the β on a log grid of `steps` points over
/// `[lo, hi]` whose perplexity is closest to the target.
pub fn brute_force_beta(d2_row: &[f64], i: usize, perplexity: f64, lo: f64, hi: f64, steps: usize) -> f64 {
    let target = perplexity.ln();
    let (llo, lhi) = (lo.ln(), hi.ln());
    let mut best = (f64::INFINITY, lo);
    for k in 0..steps {
        let beta = (llo + (lhi - llo) * k as f64 / (steps - 1) as f64).exp();
        let err = (row_entropy(d2_row, i, beta) - target).abs();
        if err < best.0 {
            best = (err, beta);
        }
    }
    best.1
}

/// Three tight 10-point Gaussian clusters in 16 dimensions.
pub fn three_clusters(seed: u64) -> (SampleMatrix, Vec<usize>) {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for c in 0..3 {
        let centre: Vec<f64> = (0..16).map(|_| r.random_range(-10.0..10.0)).collect();
        for _ in 0..10 {
            data.extend(centre.iter().map(|m| m + noise.sample(&mut r)));
            labels.push(c);
        }
    }
    (SampleMatrix::new(30, 16, data).unwrap(), labels)
}

/// Mean intra-cluster and inter-cluster embedded distances.
pub fn cluster_distances(points: &[f64], dims: usize, labels: &[usize]) -> (f64, f64) {
    let (mut intra, mut ni, mut inter, mut no) = (0.0, 0, 0.0, 0);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let d: f64 = (0..dims)
                .map(|k| (points[i * dims + k] - points[j * dims + k]).powi(2))
                .sum::<f64>()
                .sqrt();
            if labels[i] == labels[j] {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                no += 1;
            }
        }
    }
    (intra / ni as f64, inter / no as f64)
}
