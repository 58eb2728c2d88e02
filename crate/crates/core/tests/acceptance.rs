//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use percgan_core::data::{gen_dataset, Dataset, DatasetSpec};
use percgan_core::eval::{
    compare_variants, emit_image_grid, eval_generated, test_queries, train_eval_classifier, ClassifierTrainConfig, CompareConfig,
    TargetPredicate, EVAL_SEED,
};
use percgan_core::losses::{activation_loss, contextual_loss, discriminator_loss, gram_loss, pixel_loss, DEFAULT_LOG_CLAMP_EPS};
use percgan_core::training::{checkpoint_dir, read_metrics, train_loop, Seeds, Start, TrainConfig, METRICS_FILE, TIMING_FILE};
use percgan_core::verify::{run_checks, DEFAULT_EPS};
use percgan_core::{LossConfig, PerceptualVariant, Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        passed,
        detail: detail.into(),
    })
}

fn desk_dataset(dir: &Path, n_categories: usize, per_category: usize, train_fraction: f64) -> Result<Dataset> {
    let spec = DatasetSpec {
        n_categories,
        per_category,
        image_side: 32,
        train_fraction,
        ..DatasetSpec::default()
    };
    gen_dataset(&spec, dir)?;
    Dataset::load(dir)
}

fn desk_train(variant: PerceptualVariant, seed: u64, steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        loss: LossConfig::with_variant(variant),
        seeds: Seeds::from_base(seed),
        ..TrainConfig::default()
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 0.0, 1.0, rng)
}

fn scalar(tape: &Tape<f64>, v: percgan_core::Var) -> f64 {
    tape.value(v).data()[0]
}

fn files_under(dir: &Path, skip: &[&str]) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !skip.iter().any(|s| p.file_name().is_some_and(|n| n == *s)) {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gradients() -> Result<Verdict> {
    let results = run_checks(None, false, DEFAULT_EPS, 1e-4)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let mut groups: Vec<&str> = results.iter().map(|r| r.name.split('/').next().unwrap()).collect();
    groups.dedup();
    let required = [
        "conv2d",
        "conv_transpose2d",
        "batchnorm",
        "linear",
        "relu",
        "leaky_relu",
        "tanh",
        "sigmoid",
        "gram",
        "sum",
        "mean",
        "sq_l2",
    ];
    let missing: Vec<&str> = required.iter().copied().filter(|g| !groups.contains(g)).collect();
    let losses = [
        "discriminator_loss",
        "contextual_loss",
        "generator_loss_none",
        "generator_loss_pixel",
        "generator_loss_vgg",
        "generator_loss_gram",
    ];
    let missing_losses: Vec<&str> = losses.iter().copied().filter(|l| !results.iter().any(|r| r.name.starts_with(l))).collect();
    verdict(
        failed.is_empty() && missing.is_empty() && missing_losses.is_empty(),
        format!(
            "{} checks, worst rel err {worst:.2e}, failed {failed:?}, missing {missing:?} {missing_losses:?}",
            results.len()
        ),
    )
}

fn adjoint() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut configs = 0;
    while configs < 100 {
        let (n, c, o) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
        let k = rng.random_range(1..=5);
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..k);
        let (oh, ow) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (h, w) = ((oh - 1) * stride + k, (ow - 1) * stride + k);
        if h <= 2 * pad || w <= 2 * pad {
            continue;
        }
        let (h, w) = (h - 2 * pad, w - 2 * pad);
        let x = randn(&[n, c, h, w], &mut rng);
        let wt = randn(&[o, c, k, k], &mut rng);
        let y = randn(&[n, o, oh, ow], &mut rng);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, yv) = (tape.constant(x.clone()), tape.constant(wt), tape.constant(y.clone()));
        let cx = tape.conv2d(xv, wv, None, stride, pad)?;
        let cy = tape.conv_transpose2d(yv, wv, None, stride, pad)?;
        let lhs = tape.value(cx).dot(&y)?;
        let rhs = x.dot(tape.value(cy))?;
        worst = worst.max((lhs - rhs).abs());
        configs += 1;
    }
    verdict(worst < 1e-5, format!("{configs} configurations, worst |<Cx,y> - <x,C'y>| = {worst:.2e}"))
}

fn unit_values() -> Result<Verdict> {
    let mut tape = Tape::<f64>::new();
    let half = || Tensor::full(&[8], 0.5);
    let (a, b, c) = (tape.constant(half()), tape.constant(half()), tape.constant(half()));
    let l_d = discriminator_loss(&mut tape, a, b, c, DEFAULT_LOG_CLAMP_EPS)?;
    let l_cont = contextual_loss(&mut tape, c, DEFAULT_LOG_CLAMP_EPS)?;
    let ln2 = std::f64::consts::LN_2;
    let d_ok = (scalar(&tape, l_d) - 2.0 * ln2).abs() < 1e-12;
    let c_ok = (scalar(&tape, l_cont) - ln2).abs() < 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = randn(&[2, 3, 4, 4], &mut rng);
    let act = randn(&[2, 5, 3, 3], &mut rng);
    let (x1, x2) = (tape.constant(img.clone()), tape.constant(img));
    let (a1, a2) = (tape.constant(act.clone()), tape.constant(act));
    let zeros = [pixel_loss(&mut tape, x1, x2)?, activation_loss(&mut tape, a1, a2)?, gram_loss(&mut tape, a1, a2)?];
    let zero_ok = zeros.iter().all(|&v| scalar(&tape, v) == 0.0);

    let f = tape.constant(Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0])?);
    let s = tape.gram(f)?;
    let gram_ok = tape.value(s).data().iter().zip([1.25, 2.75, 2.75, 6.25]).all(|(a, b)| (a - b).abs() < 1e-6);
    let z = tape.constant(Tensor::zeros(&[1, 2, 1, 2]));
    let g = gram_loss(&mut tape, f, z)?;
    let hand = scalar(&tape, g);
    verdict(
        d_ok && c_ok && zero_ok && gram_ok && (hand - 55.75).abs() < 1e-6,
        format!(
            "L_D={:.12} l_cont={:.12} zeros={zero_ok} gram={:?} gram_loss vs zero={hand}",
            scalar(&tape, l_d),
            scalar(&tape, l_cont),
            tape.value(s).data()
        ),
    )
}

fn baseline_equivalence(dataset: &Dataset, work: &Path) -> Result<Verdict> {
    let base = desk_train(PerceptualVariant::None, 0, 500);
    train_loop(&base, dataset, &work.join("none"), Start::Fresh)?;
    let reference = fs::read(work.join("none").join(METRICS_FILE)).unwrap();
    let mut differing = Vec::new();
    for v in [PerceptualVariant::Pixel, PerceptualVariant::Activation, PerceptualVariant::Gram] {
        let mut cfg = desk_train(v, 0, 500);
        cfg.loss.lambda = 0.0;
        let dir = work.join(v.flag());
        train_loop(&cfg, dataset, &dir, Start::Fresh)?;
        if fs::read(dir.join(METRICS_FILE)).unwrap() != reference {
            differing.push(v.flag());
        }
    }
    let lines = reference.iter().filter(|&&b| b == b'\n').count();
    verdict(differing.is_empty() && lines == 500, format!("{lines} log lines; variants differing from none: {differing:?}"))
}

fn mean_l_cont(m: &[percgan_core::training::StepMetrics]) -> f64 {
    m.iter().map(|s| s.l_cont).sum::<f64>() / m.len() as f64
}

fn dynamics(dataset: &Dataset, work: &Path) -> Result<Verdict> {
    let mut all_ok = true;
    let mut parts = Vec::new();
    for v in PerceptualVariant::ALL {
        let mut wins = 0;
        let mut cells = Vec::new();
        for seed in 0..5 {
            let out = train_loop(&desk_train(v, seed, 500), dataset, &work.join(format!("{}-{seed}", v.flag())), Start::Fresh)?;
            let (early, late) = (mean_l_cont(&out.metrics[..100]), mean_l_cont(&out.metrics[400..]));
            if late < early {
                wins += 1;
            }
            cells.push(format!("{early:.3}->{late:.3}"));
        }
        all_ok &= wins >= 4;
        parts.push(format!("{} {wins}/5 [{}]", v.flag(), cells.join(" ")));
    }
    verdict(all_ok, parts.join("; "))
}

fn gram_invariance() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, c, h, w) = (2, 4, 3, 3);
    let real = randn(&[n, c, h, w], &mut rng);
    let fake = randn(&[n, c, h, w], &mut rng);
    let mut perm: Vec<usize> = (0..h * w).collect();
    perm.rotate_left(4);
    perm.swap(0, 7);
    let permuted = Tensor::from_fn(fake.shape(), |i| {
        let (p, nc) = (i % (h * w), i / (h * w));
        fake.data()[nc * h * w + perm[p]]
    });
    let mut tape = Tape::<f64>::new();
    let (r, f, fp) = (tape.constant(real), tape.constant(fake), tape.constant(permuted));
    let (g0, g1) = (gram_loss(&mut tape, r, f)?, gram_loss(&mut tape, r, fp)?);
    let (a0, a1) = (activation_loss(&mut tape, r, f)?, activation_loss(&mut tape, r, fp)?);
    let dg = (scalar(&tape, g0) - scalar(&tape, g1)).abs();
    let da = (scalar(&tape, a0) - scalar(&tape, a1)).abs();
    verdict(dg < 1e-6 && da > 1e-3, format!("gram change {dg:.2e}, activation change {da:.4}"))
}

fn evaluation_protocol(work: &Path) -> Result<Verdict> {
    let dataset = desk_dataset(&work.join("data"), 12, 60, 0.75)?;
    let classifier = train_eval_classifier(&dataset, &ClassifierTrainConfig::default())?;
    let cfg = CompareConfig::all_variants(desk_train(PerceptualVariant::None, 0, 2000), vec![0]);
    let table = compare_variants(&cfg, &dataset, &classifier, &work.join("runs"))?;
    table.save(&work.join("table.csv"))?;
    let names: Vec<&str> = table.rows.iter().map(|r| r.variant.as_str()).collect();
    let shape_ok = names == ["none", "pixel", "vgg", "gram"] && table.rows.iter().all(|r| r.n == 1500);
    let accs: Vec<String> = table.rows.iter().map(|r| format!("{}={:.4}", r.variant, r.accuracy)).collect();
    verdict(
        shape_ok && table.classifier_accuracy >= 0.95,
        format!(
            "rows {names:?}, classifier {:.4}, accuracies {} (directional trend perceptual >= none: {:?}, reported only)",
            table.classifier_accuracy,
            accs.join(" "),
            table.perceptual_at_least_baseline
        ),
    )
}

fn reproducibility(work: &Path) -> Result<Verdict> {
    let mut bad = Vec::new();
    let spec = DatasetSpec {
        n_categories: 4,
        per_category: 30,
        ..DatasetSpec::default()
    };
    gen_dataset(&spec, &work.join("data-a"))?;
    gen_dataset(&spec, &work.join("data-b"))?;
    if files_under(&work.join("data-a"), &[]) != files_under(&work.join("data-b"), &[]) {
        bad.push("dataset");
    }
    let dataset = Dataset::load(&work.join("data-a"))?;
    let classifier = train_eval_classifier(&dataset, &ClassifierTrainConfig::default())?;
    if classifier != train_eval_classifier(&dataset, &ClassifierTrainConfig::default())? {
        bad.push("classifier");
    }
    let queries = test_queries(&dataset.manifest, 3)?;
    let mut reports = Vec::new();
    let mut grids = Vec::new();
    for run in ["run-a", "run-b"] {
        let mut cfg = desk_train(PerceptualVariant::Gram, 4, 40);
        cfg.checkpoint_every = 20;
        let out = train_loop(&cfg, &dataset, &work.join(run), Start::Fresh)?;
        let grid = work.join(format!("{run}.ppm"));
        emit_image_grid(&out.state.generator, &queries, 3, 4, 9, &grid)?;
        grids.push(fs::read(&grid).unwrap());
        let report = eval_generated(&out.state.generator, &classifier, &dataset.manifest, &queries, 50, TargetPredicate::SameFamily, EVAL_SEED)?;
        reports.push(serde_json::to_vec(&report).unwrap());
    }
    if files_under(&work.join("run-a"), &[TIMING_FILE]) != files_under(&work.join("run-b"), &[TIMING_FILE]) {
        bad.push("checkpoints/logs");
    }
    if grids[0] != grids[1] {
        bad.push("grid");
    }
    if reports[0] != reports[1] {
        bad.push("report");
    }
    verdict(bad.is_empty(), format!("artifacts differing between reruns: {bad:?}"))
}

fn resume_fidelity(work: &Path, dataset: &Dataset) -> Result<Verdict> {
    let mut cfg = desk_train(PerceptualVariant::Activation, 9, 200);
    cfg.checkpoint_every = 100;
    let full = train_loop(&cfg, dataset, &work.join("full"), Start::Fresh)?;
    let resumed = train_loop(&cfg, dataset, &work.join("resumed"), Start::Resume(checkpoint_dir(&work.join("full"), 100)))?;
    let bits = |m: &[percgan_core::training::StepMetrics]| -> Vec<(u64, u64, u64, u64, u64)> {
        m.iter().map(|s| (s.step, s.l_d.to_bits(), s.l_cont.to_bits(), s.l_perc.to_bits(), s.l_g.to_bits())).collect()
    };
    let same_metrics = resumed.metrics.len() == 100 && bits(&resumed.metrics) == bits(&full.metrics[100..]);
    let same_state = files_under(&full.final_checkpoint, &[]) == files_under(&resumed.final_checkpoint, &[]);
    let logged = read_metrics(&work.join("resumed").join(METRICS_FILE))?;
    let same_log = bits(&logged) == bits(&full.metrics[100..]);
    verdict(
        same_metrics && same_state && same_log,
        format!("post-resume metrics equal {same_metrics}, final checkpoint equal {same_state}, resumed log equal {same_log}"),
    )
}

fn main() -> ExitCode {
    let root = TempDir::new().expect("temp dir");
    let data4 = root.path().join("data4");
    let dataset = desk_dataset(&data4, 4, 300, 0.8).expect("desk dataset");
    let sub = |name: &str| {
        let p = root.path().join(name);
        fs::create_dir_all(&p).unwrap();
        p
    };

    type Criterion<'a> = (&'a str, u64, Box<dyn Fn() -> Result<Verdict> + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("gradient correctness", 120, Box::new(gradients)),
        ("conv adjoint identity", 30, Box::new(adjoint)),
        ("loss unit values", 5, Box::new(unit_values)),
        ("baseline equivalence", 600, Box::new(|| baseline_equivalence(&dataset, &sub("c4")))),
        ("training dynamics", 1800, Box::new(|| dynamics(&dataset, &sub("c5")))),
        ("gram spatial invariance", 5, Box::new(gram_invariance)),
        ("evaluation protocol", 7200, Box::new(|| evaluation_protocol(&sub("c7")))),
        ("reproducibility", 600, Box::new(|| reproducibility(&sub("c8")))),
        ("checkpoint fidelity", 600, Box::new(|| resume_fidelity(&sub("c9"), &dataset))),
    ];

    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    let mut ran = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= Duration::from_secs(*budget);
        let (passed, detail) = match outcome {
            Ok(v) => (v.passed && in_budget, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failures += 1;
        }
        println!(
            "{} criterion {}: {name} [{:.1}s / {budget}s] {detail}",
            if passed { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
