use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use percgan_core::data::{gen_dataset, Dataset, DatasetManifest};
use percgan_core::eval::{
    compare_variants, emit_image_grid, eval_generated, test_queries, train_classifier as fit_classifier, train_eval_classifier,
    CategoryClassifier, CompareConfig,
};
use percgan_core::training::{load_checkpoint, train_loop, Seeds, Start, TrainConfig};
use percgan_core::verify::run_checks;

use crate::config::{parent_dir, resolve_out, RunConfig};
use crate::{
    CompareArgs, EvalArgs, GenDataArgs, GradcheckArgs, InternalError, SampleArgs, TrainArgs, TrainClassifierArgs, UsageError,
};

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| UsageError(format!("`--{flag}` is required")).into())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

/// Adopts the dataset's image side and embedding width.
fn fit_arch(train: &mut TrainConfig, manifest: &DatasetManifest) {
    train.arch.image_side = manifest.image_side;
    train.arch.d_h = manifest.d_h;
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut rc = RunConfig::load(a.common.config.as_deref())?;
    rc.command = "gen-data".into();
    let d = &mut rc.dataset;
    if let Some(v) = a.categories {
        d.n_categories = v;
    }
    if let Some(v) = a.per_category {
        d.per_category = v;
    }
    if let Some(v) = a.side {
        d.image_side = v;
    }
    if let Some(v) = a.d_h {
        d.d_h = v;
    }
    if let Some(v) = a.seed {
        d.seed = v;
    }
    if let Some(v) = a.train_fraction {
        d.train_fraction = v;
    }
    if let Some(v) = a.jitter {
        d.jitter_std = v;
    }
    rc.paths.out = Some(a.out.clone());
    let m = gen_dataset(&rc.dataset, &a.out)?;
    rc.echo(&a.out)?;
    println!(
        "wrote {} images of {} categories to {} (train categories {:?}, test categories {:?})",
        m.examples.len(),
        m.categories.len(),
        a.out.display(),
        m.split.train_category_ids,
        m.split.test_category_ids
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut rc = RunConfig::load(a.common.config.as_deref())?;
    rc.command = "train".into();
    let t = &mut rc.train;
    if let Some(v) = a.variant {
        t.loss.variant = v;
    }
    if let Some(v) = a.lambda {
        t.loss.lambda = v;
    }
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.batch {
        t.batch_size = v;
    }
    if let Some(v) = a.seed {
        t.seeds = Seeds::from_base(v);
    }
    if let Some(v) = a.lr {
        t.adam.lr = v;
    }
    if let Some(v) = a.beta1 {
        t.adam.beta1 = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = a.feature_layer {
        t.loss.feature_layer = v;
    }
    if a.feature_weights.is_some() {
        t.feature_weights = a.feature_weights;
    }
    let data = require(a.data.or(rc.paths.data.clone()).or(t.data.clone()), "data")?;
    t.data = Some(data.clone());
    rc.paths.data = Some(data.clone());
    let default_rel = format!("runs/{}", t.loss.variant.flag());
    let out = resolve_out(a.out, rc.paths.out.clone(), &default_rel)?;
    rc.paths.out = Some(out.clone());
    if a.resume.is_some() {
        rc.paths.resume = a.resume;
    }
    let dataset = load_dataset(&data)?;
    fit_arch(&mut rc.train, &dataset.manifest);
    rc.train.validate()?;
    rc.echo(&out)?;
    let start = match &rc.paths.resume {
        Some(p) => Start::Resume(p.clone()),
        None => Start::Fresh,
    };
    let outcome = train_loop(&rc.train, &dataset, &out, start)?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "step {}: L_D={:.4} l_cont={:.4} l_perc={:.4} L_G={:.4}",
            last.step, last.l_d, last.l_cont, last.l_perc, last.l_g
        );
    }
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn open_checkpoint(ckpt: &Path) -> Result<(percgan_core::training::TrainState, TrainConfig)> {
    load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let mut rc = RunConfig::load(a.common.config.as_deref())?;
    rc.command = "sample".into();
    if a.queries != "test" {
        return Err(UsageError(format!("unsupported query source {:?}; only `test` is available", a.queries)).into());
    }
    let ckpt = require(a.ckpt.or(rc.paths.ckpt.clone()), "ckpt")?;
    let (state, train_cfg) = open_checkpoint(&ckpt)?;
    let data = require(a.data.or(rc.paths.data.clone()).or(train_cfg.data.clone()), "data")?;
    let manifest = DatasetManifest::load(&data).with_context(|| format!("loading dataset {}", data.display()))?;
    if let Some((r, c)) = a.grid {
        rc.eval.grid_rows = r;
        rc.eval.grid_cols = c;
    }
    if let Some(s) = a.seed {
        rc.eval.seed = s;
    }
    rc.paths.ckpt = Some(ckpt);
    rc.paths.data = Some(data);
    rc.paths.out = Some(a.out.clone());
    rc.train = train_cfg;
    let queries = test_queries(&manifest, rc.eval.grid_rows)?;
    emit_image_grid(&state.generator, &queries, rc.eval.grid_rows, rc.eval.grid_cols, rc.eval.seed, &a.out)?;
    rc.echo(&parent_dir(&a.out))?;
    println!(
        "wrote {}x{} grid for categories {:?} to {}",
        rc.eval.grid_rows,
        rc.eval.grid_cols,
        queries.iter().map(|q| q.category_id).collect::<Vec<_>>(),
        a.out.display()
    );
    Ok(())
}

pub fn train_classifier(a: TrainClassifierArgs) -> Result<()> {
    let mut rc = RunConfig::load(a.common.config.as_deref())?;
    rc.command = "train-classifier".into();
    if let Some(v) = a.epochs {
        rc.classifier.epochs = v;
    }
    if let Some(v) = a.seed {
        rc.classifier.seed = v;
    }
    let data = require(a.data.or(rc.paths.data.clone()), "data")?;
    rc.paths.data = Some(data.clone());
    rc.paths.out = Some(a.out.clone());
    let dataset = load_dataset(&data)?;
    let c = fit_classifier(&dataset, &rc.classifier)?;
    c.save(&a.out)?;
    rc.echo(&a.out)?;
    let acc = c.validation_accuracy().unwrap_or(0.0);
    println!("held-out accuracy {acc:.4}; saved to {}", a.out.display());
    c.ensure_valid(rc.classifier.threshold)?;
    Ok(())
}

fn obtain_classifier(path: Option<&Path>, dataset: &Dataset, rc: &RunConfig) -> Result<CategoryClassifier> {
    match path {
        Some(p) => CategoryClassifier::load(p).with_context(|| format!("loading classifier {}", p.display())),
        None => Ok(train_eval_classifier(dataset, &rc.classifier)?),
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut rc = RunConfig::load(a.common.config.as_deref())?;
    rc.command = "eval".into();
    if let Some(v) = a.n_per_query {
        rc.eval.n_per_query = v;
    }
    if let Some(v) = a.queries {
        rc.eval.n_queries = v;
    }
    if let Some(v) = a.seed {
        rc.eval.seed = v;
    }
    let ckpt = require(a.ckpt.or(rc.paths.ckpt.clone()), "ckpt")?;
    let (state, train_cfg) = open_checkpoint(&ckpt)?;
    let data = require(a.data.or(rc.paths.data.clone()).or(train_cfg.data.clone()), "data")?;
    let dataset = load_dataset(&data)?;
    let classifier_path = a.classifier.or(rc.paths.classifier.clone());
    let classifier = obtain_classifier(classifier_path.as_deref(), &dataset, &rc)?;
    rc.paths.ckpt = Some(ckpt);
    rc.paths.data = Some(data);
    rc.paths.classifier = classifier_path;
    rc.paths.out = Some(a.out.clone());
    let variant = train_cfg.loss.variant;
    rc.train = train_cfg;
    let queries = test_queries(&dataset.manifest, rc.eval.n_queries)?;
    let mut report = eval_generated(
        &state.generator,
        &classifier,
        &dataset.manifest,
        &queries,
        rc.eval.n_per_query,
        rc.eval.predicate,
        rc.eval.seed,
    )?;
    report.variant = Some(variant.flag().to_string());
    let dir = parent_dir(&a.out);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    fs::write(&a.out, json).with_context(|| format!("writing {}", a.out.display()))?;
    let csv = format!("variant,n,accuracy\n{},{},{:.6}\n", variant.flag(), report.n_generated, report.accuracy());
    let csv_path = a.out.with_extension("csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    rc.echo(&dir)?;
    println!(
        "{}: {}/{} correct ({:.4}); classifier held-out accuracy {:.4}",
        variant.method_name(),
        report.n_correct,
        report.n_generated,
        report.accuracy(),
        report.classifier_accuracy
    );
    Ok(())
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let mut rc = RunConfig::load(a.common.config.as_deref())?;
    rc.command = "compare".into();
    if let Some(v) = a.steps {
        rc.train.steps = v;
    }
    if let Some(v) = a.lambda {
        rc.train.loss.lambda = v;
    }
    if let Some(v) = a.batch {
        rc.train.batch_size = v;
    }
    if let Some(v) = a.n_per_query {
        rc.eval.n_per_query = v;
    }
    if let Some(n) = a.seeds {
        rc.compare_seeds = (0..n as u64).collect();
    }
    if rc.compare_seeds.is_empty() {
        rc.compare_seeds = vec![0];
    }
    let data = require(a.data.or(rc.paths.data.clone()), "data")?;
    let out = resolve_out(a.out, rc.paths.out.clone(), "compare/table.csv")?;
    let dataset = load_dataset(&data)?;
    rc.train.data = Some(data.clone());
    fit_arch(&mut rc.train, &dataset.manifest);
    rc.train.validate()?;
    let classifier_path = a.classifier.or(rc.paths.classifier.clone());
    let classifier = obtain_classifier(classifier_path.as_deref(), &dataset, &rc)?;
    rc.paths.data = Some(data);
    rc.paths.classifier = classifier_path;
    rc.paths.out = Some(out.clone());
    let dir = parent_dir(&out);
    rc.echo(&dir)?;
    let mut cfg = CompareConfig::all_variants(rc.train.clone(), rc.compare_seeds.clone());
    cfg.n_per_query = rc.eval.n_per_query;
    cfg.n_queries = rc.eval.n_queries;
    cfg.predicate = rc.eval.predicate;
    cfg.eval_seed = rc.eval.seed;
    let table = compare_variants(&cfg, &dataset, &classifier, &dir.join("runs"))?;
    table.save(&out)?;
    print!("{}", table.to_csv());
    println!("classifier held-out accuracy {:.4}", table.classifier_accuracy);
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = run_checks(a.op.as_deref(), a.inject_fault, a.eps, a.tol)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        println!(
            "{}  {:width$}  max_rel_err={:.3e}  n={}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.elements
        );
    }
    if let Some(p) = &a.json {
        let mut bytes = serde_json::to_vec_pretty(&results)?;
        bytes.push(b'\n');
        fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    println!("{} checks, {} failed (tolerance {:e})", results.len(), failed.len(), a.tol);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(InternalError(format!("gradient check failed: {}", failed.join(", "))).into())
    }
}
