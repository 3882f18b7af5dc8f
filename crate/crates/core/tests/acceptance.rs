//! Acceptance suite. Runs every headline criterion in sequence and prints
//! one `PASS`/`FAIL` line each; exits non-zero if any fails.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use sat_refine::features;
use sat_refine::imageops::{ImagePatch, Sprite};
use sat_refine::metrics::{self, SampleMatrix};
use sat_refine::nets::{self, Checkpoint};
use sat_refine::toy::{self, ToySpec};
use sat_refine::trainer::{self, Role, TrainConfig};
use sat_refine::tsne::{self, TsneConfig};
use sat_refine::Tensor;

const TOY_SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sat-refine"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{} exited {:?}: {}", args[0], out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn gradients() -> Outcome {
    let mut worst_op: (f64, &str) = (0.0, "");
    for seed in 0..3 {
        for c in common::op_cases(seed) {
            let e = common::gradcheck(&c.build, &c.inputs, 1e-6, seed);
            if e > worst_op.0 {
                worst_op = (e, c.name);
            }
        }
    }
    let mut worst_net = 0.0f64;
    for seed in [3, 4] {
        let gan = common::tiny_gan(seed);
        let (b, p) = common::refiner_objective(&gan, 40.0);
        worst_net = worst_net.max(common::gradcheck(&b, &p, 1e-6, seed));
        let (b, p) = common::discriminator_objective(&gan);
        worst_net = worst_net.max(common::gradcheck(&b, &p, 1e-6, seed));
    }
    outcome(
        worst_op.0 < 1e-4 && worst_net < 1e-3,
        format!("max op error {:.1e} ({}), max D∘R error {worst_net:.1e}", worst_op.0, worst_op.1),
    )
}

fn estimator_agreement() -> Outcome {
    let spec = metrics::default_kernel_spec();
    let mut worst = 0.0f64;
    let mut all = true;
    for seed in 0..5 {
        let x = common::gaussian(10_000, 4, 0.0, 100 + seed);
        let y = common::gaussian(10_000, 4, 1.0, 200 + seed);
        let l = metrics::mmd2_linear(&x, &y, &spec).unwrap();
        let q = metrics::mmd2_quadratic_unbiased(&x, &y, &spec).unwrap();
        let z = (l.mmd2 - q.mmd2).abs() / (l.stderr.powi(2) + q.stderr.powi(2)).sqrt();
        worst = worst.max(z);
        all &= z < 3.0;
    }
    outcome(all, format!("worst |linear - quadratic| = {worst:.2} combined SE over 5 seeds"))
}

fn null_behaviour() -> Outcome {
    let spec = metrics::default_kernel_spec();
    let (mut lin_ok, mut quad_ok) = (0, 0);
    for seed in 0..5 {
        let pool = common::gaussian(4000, 4, 0.0, 300 + seed);
        let x = pool.select(&(0..2000).collect::<Vec<_>>());
        let y = pool.select(&(2000..4000).collect::<Vec<_>>());
        let l = metrics::mmd2_linear(&x, &y, &spec).unwrap();
        let q = metrics::mmd2_quadratic_unbiased(&x, &y, &spec).unwrap();
        lin_ok += usize::from(l.mmd2.abs() < 4.0 * l.stderr);
        quad_ok += usize::from(q.mmd2.abs() < 4.0 * q.stderr);
    }
    outcome(
        lin_ok >= 4 && quad_ok >= 4,
        format!("within 4 SE of 0: linear {lin_ok}/5, quadratic {quad_ok}/5"),
    )
}

/// Per-seed artefacts of the toy pipeline, shared by several criteria.
struct ToyRun {
    seed: u64,
    toy: PathBuf,
    refined: PathBuf,
    mmd: serde_json::Value,
    d_fake: Vec<f64>,
}

fn toy_pipeline(root: &Path, seed: u64) -> Result<ToyRun, String> {
    let toy = root.join(format!("toy{seed}"));
    let run = root.join(format!("run{seed}"));
    let refined = root.join(format!("refined{seed}"));
    let report = root.join(format!("mmd{seed}.json"));
    let seed_s = seed.to_string();
    bin(&["gen-toy", "--out", s(&toy), "--count", "500", "--size", "32", "--seed", &seed_s])?;
    bin(&[
        "train", "--source", s(&toy.join("source")), "--target", s(&toy.join("target")), "--out", s(&run),
        "--steps", "5000", "--lambda", "40", "--batch-size", "1", "--seed", &seed_s, "--log-every", "1",
    ])?;
    bin(&["refine", "--checkpoint", s(&run.join("model.srck")), "--input", s(&toy.join("source")), "--out", s(&refined)])?;
    bin(&[
        "eval-mmd", "--x", s(&toy.join("source")), "--x-hat", s(&refined), "--y", s(&toy.join("target")),
        "--subsample-y", "500", "--seed", &seed_s, "--estimator", "linear", "--out", s(&report),
    ])?;
    let d_fake = fs::read_to_string(run.join("loss_log.ndjson"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["d_fake_mean"].as_f64().unwrap())
        .collect();
    Ok(ToyRun {
        seed,
        toy,
        refined,
        mmd: json(&report),
        d_fake,
    })
}

fn table1_ordering(runs: &[ToyRun], elapsed: Duration) -> Outcome {
    let mut passed = 0;
    let mut parts = Vec::new();
    for r in runs {
        let v = |name: &str| {
            r.mmd["pairs"]
                .as_array()
                .unwrap()
                .iter()
                .find(|p| p["pair"] == name)
                .unwrap()["mmd2"]
                .as_f64()
                .unwrap()
        };
        let (i, ii, iii) = (v("X_vs_X_hat"), v("X_vs_Y_tilde"), v("X_hat_vs_Y_tilde"));
        let ok = iii < ii && iii < i;
        passed += usize::from(ok);
        parts.push(format!("seed {}: {i:.4}/{ii:.4}/{iii:.4}{}", r.seed, if ok { "" } else { " ✗" }));
    }
    outcome(
        passed >= 2 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "{passed}/3 seeds, MMD² (X,X̂)/(X,Ỹ)/(X̂,Ỹ) {}; pipeline {:.0}s",
            parts.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

fn adversarial_balance(runs: &[ToyRun]) -> Outcome {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in runs {
        let window = 500;
        let mut sum: f64 = r.d_fake[..window].iter().sum();
        for t in window..=r.d_fake.len() {
            if t > window {
                sum += r.d_fake[t - 1] - r.d_fake[t - 1 - window];
            }
            // warmup: the first 500 steps
            if t >= 2 * window {
                let m = sum / window as f64;
                lo = lo.min(m);
                hi = hi.max(m);
            }
        }
    }
    outcome(
        lo > 0.05 && hi < 0.95,
        format!("500-step moving average of d_fake in [{lo:.3}, {hi:.3}] after warmup"),
    )
}

fn identity_dominance() -> Outcome {
    let (x, y) = toy::generate(&ToySpec {
        seed: 1,
        ..ToySpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        lambda: 1e6,
        max_steps: 2000,
        seed: 1,
        log_every: 2000,
        ..TrainConfig::default()
    };
    let (model, _) = trainer::train(&x, &y, &cfg).unwrap();
    let xh = trainer::refine_dataset(&model.refiner, &x).unwrap();
    let (mut total, mut count) = (0.0, 0usize);
    for (a, b) in xh.patches().iter().zip(x.patches()) {
        for (p, q) in a.pixels().iter().zip(b.pixels()) {
            total += (p - q).abs() as f64;
            count += 1;
        }
    }
    let mean = total / count as f64;
    outcome(mean < 0.01, format!("mean |R(x) - x| = {mean:.5} at λ = 1e6"))
}

fn tsne_proximity(root: &Path, runs: &[ToyRun]) -> Outcome {
    let mut passed = 0;
    let mut parts = Vec::new();
    for r in runs {
        let out = root.join(format!("tsne{}", r.seed));
        let seed_s = r.seed.to_string();
        if let Err(e) = bin(&[
            "eval-tsne", "--x", s(&r.toy.join("source")), "--x-hat", s(&r.refined), "--y", s(&r.toy.join("target")),
            "--subsample-y", "500", "--seed", &seed_s, "--out", s(&out),
        ]) {
            return outcome(false, e);
        }
        let summary = json(&out.join("summary.json"));
        let mean = |k: &str| -> Vec<f64> {
            summary["set_means"][k].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect()
        };
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let (mx, mh, my) = (mean("X"), mean("X_hat"), mean("Y_tilde"));
        let (dh, dx) = (dist(&mh, &my), dist(&mx, &my));
        let ok = dh < dx;
        passed += usize::from(ok);
        parts.push(format!("seed {}: |X̂-Ỹ| {dh:.2} vs |X-Ỹ| {dx:.2}", r.seed));
    }
    outcome(passed >= 2, format!("{passed}/3 seeds; {}", parts.join("; ")))
}

fn tsne_internals() -> Outcome {
    let mut r = common::rng(7);
    let x = SampleMatrix::new(200, 10, (0..2000).map(|_| rand::Rng::random_range(&mut r, 0.0..1.0)).collect()).unwrap();
    let d2 = tsne::squared_distances(&x);
    let (_, betas) = tsne::perplexity_calibrate(&d2, 200, 30.0).unwrap();
    let calib = (0..200)
        .map(|i| (common::row_entropy(&d2[i * 200..(i + 1) * 200], i, betas[i]).exp() - 30.0).abs())
        .fold(0.0f64, f64::max);

    let n = 12;
    let pts = SampleMatrix::new(n, 5, (0..n * 5).map(|_| rand::Rng::random_range(&mut r, 0.0..1.0)).collect()).unwrap();
    let (cond, _) = tsne::perplexity_calibrate(&tsne::squared_distances(&pts), n, 4.0).unwrap();
    let p = tsne::symmetrize(&cond, n);
    let y: Vec<f64> = (0..n * 2).map(|_| rand::Rng::random_range(&mut r, -2.0..2.0)).collect();
    let analytic = tsne::kl_gradient(&p, &y, n, 2);
    let h = 1e-6;
    let (mut diff, mut scale) = (0.0, 0.0);
    for k in 0..y.len() {
        let mut plus = y.clone();
        plus[k] += h;
        let mut minus = y.clone();
        minus[k] -= h;
        let num = (tsne::kl_divergence(&p, &plus, n, 2) - tsne::kl_divergence(&p, &minus, n, 2)) / (2.0 * h);
        diff += (analytic[k] - num).powi(2);
        scale += num * num;
    }
    let fd = (diff / scale).sqrt();

    let mut separated = 0;
    for seed in 0..5 {
        let (feat, labels) = common::three_clusters(seed);
        let cfg = TsneConfig {
            perplexity: 5.0,
            iterations: 500,
            seed,
            ..TsneConfig::default()
        };
        let emb = tsne::tsne_run(&feat, &[Role::Synthetic; 30], &cfg).unwrap();
        let (intra, inter) = common::cluster_distances(&emb.points, 2, &labels);
        separated += usize::from(intra < inter);
    }
    outcome(
        calib < 1e-3 && fd < 1e-4 && separated == 5,
        format!("max perplexity error {calib:.1e} (n=200), KL gradient error {fd:.1e}, clusters separated {separated}/5"),
    )
}

fn golden_formats() -> Outcome {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let srft = fs::read(fixtures.join("golden_2x3.srft")).unwrap();
    let m = SampleMatrix::new(2, 3, vec![1.0, -2.5, 0.125, 3.0, 0.0, -0.75]).unwrap();
    let srft_ok = srft.len() == 40 && features::encode(&m).unwrap() == srft && features::decode(&srft).unwrap() == m;

    let ck = fs::read(fixtures.join("golden_w_2x3.srck")).unwrap();
    let mut c = Checkpoint::new();
    c.push("w".into(), Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.25, -0.125, 4.0]).unwrap());
    let ck_ok = ck.len() == 53 && c.encode().unwrap() == ck && Checkpoint::decode(&ck).unwrap() == c;

    let features = common::gaussian(17, 9, 0.0, 1);
    let rounded = SampleMatrix::new(17, 9, features.data().iter().map(|&v| v as f32 as f64).collect()).unwrap();
    let srft_rt = features::decode(&features::encode(&rounded).unwrap()).unwrap() == rounded;
    let model = nets::Model {
        refiner: nets::RefinerNet::new(Default::default(), 3),
        discriminator: Some(nets::DiscriminatorNet::new(Default::default(), 4)),
        refiner_opt: None,
        discriminator_opt: None,
    };
    let bytes = model.to_checkpoint().encode().unwrap();
    let ck_rt = Checkpoint::decode(&bytes).unwrap().encode().unwrap() == bytes;
    outcome(
        srft_ok && ck_ok && srft_rt && ck_rt,
        format!("SRFT golden {srft_ok}, checkpoint golden {ck_ok}, SRFT round trip {srft_rt}, model round trip {ck_rt}"),
    )
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Outcome {
    let run = |tag: &str| -> Result<PathBuf, String> {
        let base = root.join(format!("det{tag}"));
        let toy = base.join("toy");
        bin(&["gen-toy", "--out", s(&toy), "--count", "20", "--size", "32", "--seed", "5"])?;
        bin(&[
            "train", "--source", s(&toy.join("source")), "--target", s(&toy.join("target")), "--out", s(&base.join("train")),
            "--steps", "50", "--seed", "5", "--log-every", "10",
        ])?;
        fs::create_dir_all(base.join("bg")).unwrap();
        fs::create_dir_all(base.join("sprites")).unwrap();
        ImagePatch::filled(32, 32, 3, 0.3).unwrap().save_png(&base.join("bg/b.png")).unwrap();
        let rgb = (0..7 * 5 * 3).map(|i| (i % 5) as f32 / 5.0).collect();
        let alpha = (0..35).map(|i| if i % 7 == 0 { 0.0 } else { 1.0 }).collect();
        Sprite::new(7, 5, rgb, alpha).unwrap().save_png(&base.join("sprites/s.png")).unwrap();
        bin(&[
            "compose", "--bg", s(&base.join("bg")), "--sprites", s(&base.join("sprites")), "--out", s(&base.join("comp")),
            "--count", "12", "--seed", "5",
        ])?;
        Ok(base)
    };
    match (run("a"), run("b")) {
        (Ok(a), Ok(b)) => {
            let same = |sub: &str| tree(&a.join(sub)) == tree(&b.join(sub));
            let (g, t, c) = (same("toy"), same("train"), same("comp"));
            outcome(g && t && c, format!("byte-identical repeat: gen-toy {g}, train {t}, compose {c}"))
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let mut results: Vec<(&str, Outcome, Duration, Duration)> = Vec::new();
    let mut check = |name: &'static str, budget: Duration, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let mut o = f();
        let took = t.elapsed();
        if took > budget {
            o.pass = false;
        }
        println!(
            "{} {name}: {} [{:.1}s, budget {}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
        results.push((name, o, took, budget));
    };

    check("gradient correctness", Duration::from_secs(60), &mut gradients);
    check("estimator oracle agreement", Duration::from_secs(120), &mut estimator_agreement);
    check("null behaviour", Duration::from_secs(60), &mut null_behaviour);

    let t = Instant::now();
    let runs: Result<Vec<ToyRun>, String> = TOY_SEEDS.iter().map(|&seed| toy_pipeline(root.path(), seed)).collect();
    let pipeline_time = t.elapsed();
    match &runs {
        Ok(runs) => {
            check("Table 1 ordering (toy)", Duration::from_secs(15 * 60), &mut || table1_ordering(runs, pipeline_time));
            check("adversarial balance (toy)", Duration::from_secs(60), &mut || adversarial_balance(runs));
        }
        Err(e) => check("Table 1 ordering (toy)", Duration::from_secs(15 * 60), &mut || outcome(false, e.clone())),
    }

    check("identity dominance", Duration::from_secs(5 * 60), &mut identity_dominance);
    match &runs {
        Ok(runs) => check("t-SNE mean proximity", Duration::from_secs(5 * 60), &mut || tsne_proximity(root.path(), runs)),
        Err(e) => check("t-SNE mean proximity", Duration::from_secs(5 * 60), &mut || outcome(false, e.clone())),
    }
    check("t-SNE internals", Duration::from_secs(3 * 60), &mut tsne_internals);
    check("format golden tests", Duration::from_secs(60), &mut golden_formats);
    check("determinism", Duration::from_secs(5 * 60), &mut || determinism(root.path()));

    let failed = results.iter().filter(|r| !r.1.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
