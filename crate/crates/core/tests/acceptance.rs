//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test -p neuraug --test acceptance -- <filter>`.
//! The digit criteria read the IDX files from `data/mnist/` at the
//! workspace root, or from `$NEURAUG_MNIST_DIR`.
//!
//! Failed criteria are reported but only fail the process when
//! `NEURAUG_ACCEPTANCE_STRICT=1` is set.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use neuraug::augment::{self, AffineRanges, AffineSpec, PairSampler};
use neuraug::data::{self, LabeledDataset};
use neuraug::experiment::{self, ExperimentConfig, RunSummary};
use neuraug::gradcheck;
use neuraug::losses::{self, ClsLoss, Reduction};
use neuraug::train::{AdamConfig, AdamState};
use neuraug::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;
type RunOutput = Result<(RunSummary, Vec<Vec<f64>>), String>;
type Criterion<'a> = (&'static str, Box<dyn FnMut() -> Outcome + 'a>);

const MNIST_SEEDS: [u64; 3] = [0, 1, 2];
const BASELINE_TARGET: f64 = 0.972;
const BASELINE_BAND: f64 = 0.02;
const BASELINE_BUDGET_S: f64 = 25.0 * 60.0;
const SYNTHETIC_EPOCHS: usize = 3;
const ORACLE_TOL: f64 = 1e-9;
const ADAM_TOL: f64 = 1e-12;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg.into()) }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("NEURAUG_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn config(dir: &Path, name: &str, body: &str) -> Result<ExperimentConfig, String> {
    let text = format!("{body}\noutput_dir = {name}\n");
    ExperimentConfig::parse(&text, dir, name).map_err(err)
}

fn run(dir: &Path, name: &str, body: &str) -> RunOutput {
    let cfg = config(dir, name, body)?;
    let summary = experiment::run(&cfg).map_err(|e| format!("{name}: {}", experiment::error_line(&e)))?;
    let csv = fs::read_to_string(cfg.output_dir.join("metrics.csv")).map_err(err)?;
    let rows = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').filter(|f| !f.is_empty()).map(|f| f.parse().unwrap_or(f64::NAN)).collect())
        .collect();
    Ok((summary, rows))
}

fn all_finite(rows: &[Vec<f64>]) -> bool {
    rows.iter().flatten().all(|v| v.is_finite())
}

/// Lazily trained digit runs shared by the three digit criteria.
struct Mnist {
    dir: tempfile::TempDir,
    runs: HashMap<String, RunOutput>,
}

impl Mnist {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().expect("temp dir"),
            runs: HashMap::new(),
        }
    }

    fn get(&mut self, mode: &str, loss: &str, seed: u64) -> RunOutput {
        let name = format!("{mode}_{loss}_{seed}");
        if !self.runs.contains_key(&name) {
            let d = mnist_dir();
            let body = format!(
                "dataset.kind = idx\ndataset.images = {}\ndataset.labels = {}\ndataset.classes = 0, 8\ndataset.per_class = 1000\naug.mode = {mode}\naug.loss = {loss}\nseed = {seed}",
                d.join("train-images-idx3-ubyte").display(),
                d.join("train-labels-idx1-ubyte").display(),
            );
            let result = run(self.dir.path(), &name, &body);
            if let Ok((s, _)) = &result {
                eprintln!("  [{name}] best_val_acc={:.4} epoch={} {:.0}s", s.best_val_acc, s.best_epoch, s.seconds);
            }
            self.runs.insert(name.clone(), result);
        }
        self.runs[&name].clone()
    }
}

fn mnist_baseline(m: &mut Mnist) -> Outcome {
    let mut accs = Vec::new();
    let mut slowest: f64 = 0.0;
    for seed in MNIST_SEEDS {
        let (s, rows) = m.get("none", "none", seed)?;
        ensure(rows.len() == 40 && all_finite(&rows), format!("seed {seed}: incomplete or non-finite metrics"))?;
        accs.push(s.best_val_acc);
        slowest = slowest.max(s.seconds);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let detail = format!("best val acc {accs:.4?}, mean {mean:.4}, slowest run {slowest:.0}s");
    ensure(accs.iter().all(|&a| a >= 0.95), format!("{detail}; a seed is below 0.95"))?;
    ensure(
        (mean - BASELINE_TARGET).abs() <= BASELINE_BAND,
        format!("{detail}; mean outside {BASELINE_TARGET} ± {BASELINE_BAND}"),
    )?;
    ensure(slowest <= BASELINE_BUDGET_S, format!("{detail}; over the 25 min budget"))?;
    Ok(detail)
}

fn mnist_neural_no_loss(m: &mut Mnist) -> Outcome {
    let seed = MNIST_SEEDS[0];
    let (base, _) = m.get("none", "none", seed)?;
    let (s, rows) = m.get("neural", "none", seed)?;
    let delta = s.best_val_acc - base.best_val_acc;
    let detail = format!("best val acc {:.4}, same-seed baseline {:.4}, delta {delta:+.4}", s.best_val_acc, base.best_val_acc);
    ensure(rows.len() == 40 && all_finite(&rows), "incomplete or non-finite metrics")?;
    ensure(s.best_val_acc >= 0.95, format!("{detail}; below 0.95"))?;
    ensure(delta.abs() <= 0.02, format!("{detail}; more than 0.02 from baseline"))?;
    Ok(detail)
}

fn mnist_neural_content(m: &mut Mnist) -> Outcome {
    let (s, rows) = m.get("neural", "content", MNIST_SEEDS[0])?;
    let detail = format!("best val acc {:.4} at epoch {}", s.best_val_acc, s.best_epoch);
    ensure(rows.len() == 40, format!("{detail}; {} epochs recorded", rows.len()))?;
    ensure(all_finite(&rows) && rows.iter().all(|r| r.len() == 5), "non-finite or missing losses")?;
    ensure(s.best_val_acc >= 0.94, format!("{detail}; below 0.94"))?;
    Ok(detail)
}

/// Two distinct brightness curves per image, so the bank has a real choice.
fn write_style_bank(dir: &Path, ds: &LabeledDataset) -> Result<(), String> {
    fs::create_dir_all(dir.join("styled")).map_err(err)?;
    let mut manifest = String::new();
    for (id, img) in ds.ids.iter().zip(&ds.images) {
        for (style, gamma) in [("bright", 0.7), ("dark", 1.4)] {
            let rel = format!("styled/{id}_{style}.png");
            data::write_png(&dir.join(&rel), &img.map(|v| v.clamp(0.0, 1.0).powf(gamma))).map_err(err)?;
            manifest.push_str(&format!("{id}.png\t{style}\t{rel}\n"));
        }
    }
    fs::write(dir.join("manifest.tsv"), manifest).map_err(err)
}

fn synthetic_modes() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let base = format!(
        "dataset.kind = synthetic\ndataset.size = 64\ndataset.per_class = 500\ndataset.seed = 0\nepochs = {SYNTHETIC_EPOCHS}\n"
    );
    let ds = data::synthetic_two_class(500, 64, 0).map_err(err)?;
    write_style_bank(&dir.path().join("bank"), &ds)?;
    let modes = [
        ("none", "none"),
        ("traditional", "none"),
        ("style_bank", "none"),
        ("neural", "none"),
        ("neural", "content"),
        ("neural", "style"),
        ("control", "none"),
    ];
    let mut notes = Vec::new();
    for (mode, loss) in modes {
        let name = format!("{mode}_{loss}");
        let body = format!("{base}aug.mode = {mode}\naug.loss = {loss}\naug.style_dir = bank\n");
        let (s, rows) = run(dir.path(), &name, &body)?;
        ensure(rows.len() == SYNTHETIC_EPOCHS && all_finite(&rows), format!("{name}: non-finite metrics"))?;
        let train_acc = rows.iter().map(|r| r[r.len() - 2]).fold(0.0, f64::max);
        eprintln!("  [{name}] train_acc={train_acc:.4} best_val_acc={:.4} {:.0}s", s.best_val_acc, s.seconds);
        if matches!(mode, "neural" | "control") {
            ensure(train_acc >= 0.95, format!("{name}: train accuracy {train_acc:.4} < 0.95"))?;
        }
        notes.push(format!("{name} {train_acc:.3}"));
    }
    Ok(format!("7 modes, {SYNTHETIC_EPOCHS} epochs each, max train acc: {}", notes.join(", ")))
}

fn grad_suite() -> Outcome {
    let report = gradcheck::run_suite();
    let worst = report
        .results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("empty suite")?;
    let detail = format!(
        "{} items, worst {} at {:.2e}, {:.1}s",
        report.results.len(),
        worst.name,
        worst.max_rel_error,
        report.seconds
    );
    let failed: Vec<&str> = report.results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    ensure(failed.is_empty(), format!("{detail}; failed: {}", failed.join(", ")))?;
    ensure(report.seconds < 60.0, format!("{detail}; over 60 s"))?;
    Ok(detail)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn loop_gram(f: &Tensor) -> Vec<Vec<f64>> {
    let s = f.shape();
    let (pixels, c) = (s[0] * s[1], s[2]);
    let d = f.data();
    let mut g = vec![vec![0.0; c]; c];
    for (i, row) in g.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            for p in 0..pixels {
                *cell += d[p * c + i] * d[p * c + j];
            }
        }
    }
    g
}

fn image(t: &Tensor, n: usize) -> Tensor {
    t.index_first(n).unwrap()
}

fn loop_content(a: &Tensor, t: &Tensor, sum: bool) -> f64 {
    let s = a.shape();
    let d2 = (s[1] * s[1]) as f64;
    let total: f64 = a.data().iter().zip(t.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / d2;
    if sum { total } else { total / s[0] as f64 }
}

fn loop_style(a: &Tensor, t: &Tensor, sum: bool) -> f64 {
    let s = a.shape();
    let c2 = (s[3] * s[3]) as f64;
    let mut total = 0.0;
    for n in 0..s[0] {
        let (ga, gt) = (loop_gram(&image(a, n)), loop_gram(&image(t, n)));
        for i in 0..s[3] {
            for j in 0..s[3] {
                total += (ga[i][j] - gt[i][j]).powi(2) / c2;
            }
        }
    }
    if sum { total } else { total / s[0] as f64 }
}

fn loop_classification(scores: &Tensor, labels: &[usize], kind: ClsLoss) -> f64 {
    let n = labels.len();
    let s = scores.data();
    let mut total = 0.0;
    for i in 0..n {
        let row = [s[2 * i], s[2 * i + 1]];
        match kind {
            ClsLoss::SigmoidBce => {
                for (k, &z) in row.iter().enumerate() {
                    let p = 1.0 / (1.0 + (-z).exp());
                    total -= if labels[i] == k { p.ln() } else { (1.0 - p).ln() };
                }
            }
            ClsLoss::Softmax => {
                let m = row[0].max(row[1]);
                let log_z = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
                total -= row[labels[i]] - log_z;
            }
        }
    }
    total / n as f64
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let (n, d, c) = (rng.random_range(1..4), rng.random_range(2..7), rng.random_range(1..4));
        let a = random_tensor(&mut rng, &[n, d, d, c], -1.0, 1.0);
        let t = random_tensor(&mut rng, &[n, d, d, c], -1.0, 1.0);
        let tape = Tape::new();
        let (va, vt) = (tape.constant(a.clone()), tape.constant(t.clone()));
        for (red, sum) in [(Reduction::Mean, false), (Reduction::Sum, true)] {
            let got = losses::content_loss(va, vt, red).map_err(err)?.value().item();
            worst[0] = worst[0].max((got - loop_content(&a, &t, sum)).abs());
            let got = losses::style_loss(va, vt, red).map_err(err)?.value().item();
            worst[1] = worst[1].max((got - loop_style(&a, &t, sum)).abs());
        }
        let f = image(&a, 0);
        let g = losses::gram(tape.constant(f.clone())).map_err(err)?.value();
        for (i, row) in loop_gram(&f).iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                worst[2] = worst[2].max((g.data()[i * c + j] - v).abs());
            }
        }
        let batch = rng.random_range(1..9);
        let scores = random_tensor(&mut rng, &[batch, 2], -6.0, 6.0);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..2)).collect();
        for kind in [ClsLoss::SigmoidBce, ClsLoss::Softmax] {
            let got = losses::classification_loss(tape.constant(scores.clone()), &labels, kind)
                .map_err(err)?
                .value()
                .item();
            worst[3] = worst[3].max((got - loop_classification(&scores, &labels, kind)).abs());
        }
    }
    let detail = format!(
        "max abs error content {:.1e}, style {:.1e}, gram {:.1e}, classification {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    );
    ensure(worst.iter().all(|&w| w <= ORACLE_TOL), format!("{detail}; above {ORACLE_TOL:e}"))?;
    Ok(detail)
}

fn augmentation_invariants() -> Outcome {
    let mut notes = Vec::new();

    let ds = data::synthetic_two_class(25, 16, 3).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let aug = augment::augment_dataset_traditional(&ds, &AffineRanges::default(), &mut rng).map_err(err)?;
    ensure(aug.len() == 2 * ds.len(), format!("traditional: {} from {}", aug.len(), ds.len()))?;
    ensure(aug.labels[ds.len()..] == ds.labels[..], "traditional: duplicate labels differ")?;
    notes.push(format!("|aug|={} for N={}", aug.len(), ds.len()));

    let n = 5;
    let images = (0..2 * n).map(|i| Tensor::full(&[4, 4, 1], i as f64)).collect();
    let labels = (0..2 * n).map(|i| i % 2).collect();
    let ids = (0..2 * n).map(|i| format!("img{i}")).collect();
    let small = LabeledDataset::new(images, labels, ids, ["a".into(), "b".into()]).map_err(err)?;
    let sampler = PairSampler::new(&small, false);
    let pool = small.class_indices(0);
    let mut counts = vec![0u64; n * n];
    let draws = 100_000;
    for _ in 0..draws {
        let p = sampler.sample(0, &mut rng).map_err(err)?;
        let slot = |idx| pool.iter().position(|&x| x == idx).unwrap();
        counts[slot(p.a) * n + slot(p.b)] += 1;
    }
    let expected = draws as f64 / (n * n) as f64;
    let stat: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p_value = 1.0 - ChiSquared::new((n * n - 1) as f64).map_err(err)?.cdf(stat);
    ensure(p_value > 0.01, format!("pair sampler chi-square {stat:.1}, p = {p_value:.4}"))?;
    notes.push(format!("chi-square p={p_value:.3}"));

    for shape in [[8, 8, 1], [9, 7, 3], [28, 28, 1], [64, 64, 3]] {
        let img = random_tensor(&mut rng, &shape, 0.0, 1.0);
        let out = augment::affine_apply(&img, &AffineSpec::identity()).map_err(err)?;
        ensure(out == img, format!("identity spec changed a {shape:?} image"))?;
    }
    notes.push("identity exact".into());

    let dir = tempfile::tempdir().map_err(err)?;
    let body = "dataset.kind = synthetic\ndataset.size = 16\ndataset.per_class = 40\naug.mode = neural\naug.loss = content\nepochs = 2\nbatch_size = 16\nseed = 21\n";
    let mut files = Vec::new();
    for name in ["first", "second"] {
        run(dir.path(), name, body)?;
        files.push(fs::read(dir.path().join(name).join("metrics.csv")).map_err(err)?);
    }
    ensure(files[0] == files[1], "metrics.csv differs between identical runs")?;
    notes.push(format!("metrics.csv identical ({} bytes)", files[0].len()));
    Ok(notes.join(", "))
}

fn adam_oracle() -> Outcome {
    let shapes: [&[usize]; 3] = [&[3, 4], &[5], &[2, 2, 2]];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for lr in [1e-4, 1e-2] {
        let cfg = AdamConfig { lr, ..Default::default() };
        let mut params: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, -2.0, 2.0)).collect();
        let centers: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, -1.0, 1.0)).collect();
        let mut state = AdamState::new(&params, cfg);

        let mut x: Vec<f64> = params.iter().flat_map(|p| p.data().to_vec()).collect();
        let c: Vec<f64> = centers.iter().flat_map(|p| p.data().to_vec()).collect();
        let (mut m, mut v) = (vec![0.0; x.len()], vec![0.0; x.len()]);
        let grad = |xi: f64, ci: f64, step: usize, i: usize| 2.0 * (xi - ci) + 0.3 * ((step * 7 + i) as f64).sin();

        for step in 1..=1000 {
            let mut k = 0;
            let grads: Vec<Tensor> = params
                .iter()
                .zip(&centers)
                .map(|(p, ctr)| {
                    let g = p.data().iter().zip(ctr.data()).map(|(&pi, &ci)| {
                        k += 1;
                        grad(pi, ci, step, k - 1)
                    });
                    Tensor::new(p.shape(), g.collect()).unwrap()
                })
                .collect();
            let refs: Vec<&Tensor> = grads.iter().collect();
            state.step(&mut params, &refs).map_err(err)?;

            let t = step as f64;
            for i in 0..x.len() {
                let g = grad(x[i], c[i], step, i);
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let m_hat = m[i] / (1.0 - 0.9f64.powf(t));
                let v_hat = v[i] / (1.0 - 0.999f64.powf(t));
                x[i] -= lr * m_hat / (v_hat.sqrt() + 1e-8);
            }
            let flat = params.iter().flat_map(|p| p.data().iter().copied());
            for (a, b) in flat.zip(&x) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= ADAM_TOL, format!("max deviation {worst:.2e} > {ADAM_TOL:e}"))?;
    Ok(format!("2 × 1000 steps over 25 parameters, max deviation {worst:.1e}"))
}

fn control_mode() -> Outcome {
    let ds = data::synthetic_two_class(20, 16, 9).map_err(err)?;
    let sampler = PairSampler::new(&ds, true);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..100_000 {
        let p = sampler.sample(i % 2, &mut rng).map_err(err)?;
        ensure(p.a == p.b, format!("draw {i}: a={} b={}", p.a, p.b))?;
        ensure(ds.labels[p.a] == p.class && ds.labels[p.target] == p.class, "cross-class draw")?;
    }
    let pairs = sampler.sample_batch(&[0, 1, 0, 1], &mut rng).map_err(err)?;
    let (inputs, _) = augment::pair_batch(&ds, &pairs).map_err(err)?;
    let halves_equal = inputs.data().chunks(6).all(|px| px[..3] == px[3..]);
    ensure(halves_equal, "AugNet input halves differ")?;

    let dir = tempfile::tempdir().map_err(err)?;
    let body = "dataset.kind = synthetic\ndataset.size = 16\ndataset.per_class = 40\naug.mode = control\naug.loss = content\nepochs = 2\nbatch_size = 16\n";
    let (s, rows) = run(dir.path(), "control", body)?;
    ensure(all_finite(&rows) && rows.len() == 2, "control run metrics incomplete")?;
    ensure(dir.path().join("control/samples/epoch_2_0.png").exists(), "no sample triptychs")?;
    Ok(format!("100000 draws all a = b; pipeline ran, best val acc {:.3}", s.best_val_acc))
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut mnist = Mnist::new();
    let criteria: Vec<Criterion<'_>> = vec![
        ("gradient_check_suite", Box::new(grad_suite)),
        ("loss_oracles", Box::new(loss_oracles)),
        ("adam_oracle", Box::new(adam_oracle)),
        ("augmentation_invariants", Box::new(augmentation_invariants)),
        ("control_mode", Box::new(control_mode)),
        ("synthetic_all_modes", Box::new(synthetic_modes)),
    ];
    let mut failures = 0;
    let mut report = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            return;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.0}s): {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {name} ({secs:.0}s): {detail}");
            }
        }
    };
    for (name, mut f) in criteria {
        report(name, &mut *f);
    }
    report("mnist_baseline", &mut || mnist_baseline(&mut mnist));
    report("mnist_neural_no_loss", &mut || mnist_neural_no_loss(&mut mnist));
    report("mnist_neural_content", &mut || mnist_neural_content(&mut mnist));
    drop(mnist);
    println!("{failures} criteria failed");
    let strict = std::env::var_os("NEURAUG_ACCEPTANCE_STRICT").is_some_and(|v| v != "0");
    if failures > 0 && strict { ExitCode::FAILURE } else { ExitCode::SUCCESS }
}
