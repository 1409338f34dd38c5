use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use arlab::attacks::{AttackConfig, SpsaConfig, TargetMode};
use arlab::data::load_idx;
use arlab::harness::{
    build_report, grid_sweep, heatmap_csv, histogram_csv, histogram_metadata, loss_surface,
    restart_histogram, surface_csv, write_text, Attack, EvalSlice, ModelInfo, DEFAULT_SWEEP_ITERS,
    DEFAULT_SWEEP_STEPS,
};
use arlab::nn::{lenet_layers, load_checkpoint, mlp_layers, save_checkpoint, Model};
use arlab::objectives::{ObjectiveKind, TrainObjective};
use arlab::trainer::{train_with, TrainRun};
use arlab::{Dataset, Scalar};
use serde::Serialize;

use crate::config::{
    check_command, load_file, normalize, required, AttackCmdConfig, HistogramConfig, SuiteEntry,
    SurfaceConfig, SweepConfig, TrainConfig, PIXEL_SCALE,
};
use crate::Usage;

const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// `dir/name`, or `dir/name.gz` when only the compressed file exists.
fn standard_file(dir: &Path, name: &str) -> PathBuf {
    let plain = dir.join(name);
    if plain.exists() {
        plain
    } else {
        dir.join(format!("{name}.gz"))
    }
}

/// Explicit paths win over the data directory; neither is a usage error
/// naming `flag`.
fn data_paths(
    dir: &Option<PathBuf>,
    images: &Option<PathBuf>,
    labels: &Option<PathBuf>,
    names: (&str, &str),
    flags: (&str, &str),
) -> Result<(PathBuf, PathBuf)> {
    let from_dir = |name| dir.as_deref().map(|d| standard_file(d, name));
    let images = images.clone().or_else(|| from_dir(names.0));
    let labels = labels.clone().or_else(|| from_dir(names.1));
    match (images, labels) {
        (Some(i), Some(l)) => Ok((i, l)),
        (None, _) => Err(Usage(format!("missing dataset path: pass --{} or --data-dir", flags.0)).into()),
        (_, None) => Err(Usage(format!("missing dataset path: pass --{} or --data-dir", flags.1)).into()),
    }
}

fn test_paths(
    dir: &Option<PathBuf>,
    images: &Option<PathBuf>,
    labels: &Option<PathBuf>,
) -> Result<(PathBuf, PathBuf)> {
    data_paths(dir, images, labels, (TEST_IMAGES, TEST_LABELS), ("test-images", "test-labels"))
}

fn load_data<T: Scalar>((images, labels): &(PathBuf, PathBuf)) -> Result<Dataset<T>> {
    load_idx(images, labels)
        .with_context(|| format!("loading {} / {}", images.display(), labels.display()))
}

fn load_model<T: Scalar>(path: &Path) -> Result<(Model<T>, ModelInfo)> {
    let ck = load_checkpoint::<T>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut info = ModelInfo::of(&ck.model);
    info.checkpoint = Some(path.display().to_string());
    info.training = Some(ck.metadata);
    Ok((ck.model, info))
}

fn json<S: Serialize>(value: &S) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn out_dir(out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = required(out, "out")?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn example<T: Scalar>(data: &Dataset<T>, index: usize) -> Result<(arlab::Tensor<T>, usize)> {
    if index >= data.len() {
        return Err(Usage(format!(
            "--example {index} out of range for {} test examples",
            data.len()
        ))
        .into());
    }
    Ok((data.images().slice_rows(index, index + 1)?, data.labels()[index]))
}

/// Runs `f` in the requested precision.
macro_rules! with_precision {
    ($precision:expr, $f:ident($($arg:expr),*)) => {
        match $precision.as_deref() {
            Some("f32") => $f::<f32>($($arg),*),
            Some("f64") => $f::<f64>($($arg),*),
            other => Err(Usage(format!("--precision must be f32 or f64, got {other:?}")).into()),
        }
    };
}

// ---- train ----

fn parse_objective(name: &str) -> Result<ObjectiveKind> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|_| {
        Usage(format!("--objective must be plain, clp, lsq or alp, got `{name}`")).into()
    })
}

fn resolve_train(flags: TrainConfig) -> Result<TrainConfig> {
    let file: TrainConfig = load_file(flags.config.as_deref())?;
    check_command(&file.command, "train")?;
    let merged = flags.over(file);
    let kind = parse_objective(merged.objective.as_deref().unwrap_or("plain"))?;
    let penalized = kind != ObjectiveKind::Plain;
    let noisy = matches!(kind, ObjectiveKind::Lsq | ObjectiveKind::Clp);
    let alp = kind == ObjectiveKind::Alp;
    let defaults = TrainConfig {
        command: Some("train".into()),
        arch: Some("lenet".into()),
        precision: Some("f32".into()),
        objective: Some(kind.name().into()),
        lambda: Some(if penalized { 0.5 } else { 0.0 }),
        noise_sigma: Some(if noisy { 0.5 } else { 0.0 }),
        adv_fraction: Some(if alp { 0.5 } else { 0.0 }),
        attack_eps: Some(0.3 * PIXEL_SCALE),
        attack_step: Some(0.01 * PIXEL_SCALE),
        attack_iters: Some(40),
        epochs: Some(5),
        batch_size: Some(200),
        lr: Some(1e-3),
        seed: Some(0),
        train_examples: Some(10_000),
        eval_examples: Some(1000),
        quick_pgd: Some(false),
        probe_examples: Some(if alp { 100 } else { 0 }),
        ..Default::default()
    };
    let mut resolved = merged.over(defaults);
    resolved.command = Some("train".into());
    Ok(resolved)
}

pub fn train(flags: TrainConfig) -> Result<()> {
    let cfg = resolve_train(flags)?;
    with_precision!(cfg.precision, run_train(&cfg))
}

fn run_train<T: Scalar>(cfg: &TrainConfig) -> Result<()> {
    let train_paths = data_paths(
        &cfg.data_dir,
        &cfg.train_images,
        &cfg.train_labels,
        (TRAIN_IMAGES, TRAIN_LABELS),
        ("train-images", "train-labels"),
    )?;
    let out = out_dir(&cfg.out)?;
    let data = load_data::<T>(&train_paths)?.take(cfg.train_examples.unwrap())?;
    let eval = match test_paths(&cfg.data_dir, &cfg.test_images, &cfg.test_labels) {
        Ok(p) if p.0.exists() || cfg.test_images.is_some() => Some(load_data::<T>(&p)?),
        _ => None,
    };

    let kind = parse_objective(cfg.objective.as_deref().unwrap())?;
    let adv_fraction = cfg.adv_fraction.unwrap();
    let inner = AttackConfig::new(
        normalize(cfg.attack_eps.unwrap(), "attack-eps")?,
        normalize(cfg.attack_step.unwrap(), "attack-step")?,
        cfg.attack_iters.unwrap(),
        1,
    );
    let objective = TrainObjective {
        kind,
        lambda: cfg.lambda.unwrap(),
        adv_fraction,
        noise_sigma: cfg.noise_sigma.unwrap(),
        inner_attack: (adv_fraction > 0.0 || kind == ObjectiveKind::Alp).then_some(inner),
    };
    let mut run = TrainRun::new(objective, cfg.epochs.unwrap(), cfg.batch_size.unwrap(), cfg.seed.unwrap());
    run.adam.learning_rate = cfg.lr.unwrap();
    run.eval_examples = cfg.eval_examples;
    run.quick_pgd = cfg.quick_pgd.unwrap().then_some(AttackConfig::new(inner.epsilon, 0.01, 40, 1));
    run.probe_examples = cfg.probe_examples.filter(|&n| n > 0);
    if let Some(every) = cfg.checkpoint_every {
        run.checkpoint_every = Some(every);
        run.checkpoint_dir = Some(out.join("checkpoints"));
    }
    run.validate()?;

    let layers = match cfg.arch.as_deref().unwrap() {
        "lenet" => lenet_layers(data.classes()),
        "mlp" => mlp_layers(data.classes()),
        other => return Err(Usage(format!("--arch must be lenet or mlp, got `{other}`")).into()),
    };
    write_text(&out.join("train_config.json"), &json(cfg))?;
    let model = run.init_model::<T>(layers, data.example_shape(), data.classes())?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    let outcome = train_with(model, &data, eval.as_ref(), &run, |m| {
        let line = serde_json::to_string(m)?;
        writeln!(metrics, "{line}").map_err(|e| arlab::Error::io(&metrics_path, e))?;
        eprintln!(
            "epoch {}: loss {:.4}, clean accuracy {:.4}",
            m.epoch, m.mean_loss, m.clean_accuracy
        );
        Ok(())
    })?;
    let ckpt = out.join("model.arlb");
    save_checkpoint(&outcome.model, &run.metadata(), &ckpt)?;
    let last = outcome.metrics.last().expect("at least one epoch");
    println!("final clean accuracy: {:.4}", last.clean_accuracy);
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

// ---- attack ----

fn resolve_entry(flags: &AttackCmdConfig, entry: &SuiteEntry, file: &AttackCmdConfig) -> SuiteEntry {
    macro_rules! pick {
        ($f:ident, $default:expr) => {
            flags.$f.clone().or(entry.$f.clone()).or(file.$f.clone()).or($default)
        };
    }
    let spsa = pick!(spsa, Some(false));
    let restarts = pick!(restarts, Some(1));
    SuiteEntry {
        spsa,
        eps: pick!(eps, Some(0.3 * PIXEL_SCALE)),
        step: if spsa == Some(true) { None } else { pick!(step, Some(0.01 * PIXEL_SCALE)) },
        iters: pick!(iters, Some(40)),
        restarts: if spsa == Some(true) { None } else { restarts },
        target_mode: if spsa == Some(true) { None } else { pick!(target_mode, Some(TargetMode::Untargeted)) },
        random_init: if spsa == Some(true) { None } else { pick!(random_init, Some(restarts.unwrap() > 1)) },
        seed: pick!(seed, Some(0)),
        samples: if spsa == Some(true) { pick!(samples, Some(512)) } else { None },
        spsa_lr: if spsa == Some(true) { pick!(spsa_lr, Some(0.01 * PIXEL_SCALE)) } else { None },
        spsa_delta: if spsa == Some(true) { pick!(spsa_delta, Some(0.01 * PIXEL_SCALE)) } else { None },
    }
}

fn entry_attack(e: &SuiteEntry) -> Result<Attack> {
    let eps = normalize(e.eps.unwrap(), "eps")?;
    let attack = if e.spsa == Some(true) {
        let mut c = SpsaConfig::new(eps, e.iters.unwrap(), e.samples.unwrap()).with_seed(e.seed.unwrap());
        c.learning_rate = normalize(e.spsa_lr.unwrap(), "spsa-lr")?;
        c.perturbation = normalize(e.spsa_delta.unwrap(), "spsa-delta")?;
        c.validate()?;
        Attack::Spsa(c)
    } else {
        let c = AttackConfig::new(eps, normalize(e.step.unwrap(), "step")?, e.iters.unwrap(), e.restarts.unwrap())
            .with_target_mode(e.target_mode.unwrap())
            .with_random_init(e.random_init.unwrap())
            .with_seed(e.seed.unwrap());
        c.validate()?;
        Attack::Pgd(c)
    };
    Ok(attack)
}

fn resolve_attack(flags: AttackCmdConfig) -> Result<AttackCmdConfig> {
    let file: AttackCmdConfig = load_file(flags.config.as_deref())?;
    check_command(&file.command, "attack")?;
    let entries = file.suite.clone().unwrap_or_else(|| vec![SuiteEntry::default()]);
    let suite: Vec<SuiteEntry> = entries.iter().map(|e| resolve_entry(&flags, e, &file)).collect();
    let defaults = AttackCmdConfig {
        precision: Some("f32".into()),
        examples: Some(500),
        eval_seed: Some(0),
        ..Default::default()
    };
    let top = flags.over(file).over(defaults);
    Ok(AttackCmdConfig {
        config: top.config,
        command: Some("attack".into()),
        checkpoint: top.checkpoint,
        data_dir: top.data_dir,
        test_images: top.test_images,
        test_labels: top.test_labels,
        out: top.out,
        precision: top.precision,
        examples: top.examples,
        eval_seed: top.eval_seed,
        suite: Some(suite),
        ..Default::default()
    })
}

pub fn attack(flags: AttackCmdConfig) -> Result<()> {
    let cfg = resolve_attack(flags)?;
    with_precision!(cfg.precision, run_attack(&cfg))
}

fn eval_slice<T: Scalar>(
    paths: &(PathBuf, PathBuf),
    examples: usize,
    seed: u64,
) -> Result<(Dataset<T>, EvalSlice)> {
    let test = load_data::<T>(paths)?;
    let eval = EvalSlice {
        source: paths.0.display().to_string(),
        examples: examples.min(test.len()),
        seed,
    };
    Ok((eval.select(&test)?, eval))
}

fn run_attack<T: Scalar>(cfg: &AttackCmdConfig) -> Result<()> {
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    let paths = test_paths(&cfg.data_dir, &cfg.test_images, &cfg.test_labels)?;
    let suite = cfg
        .suite
        .as_deref()
        .unwrap_or_default()
        .iter()
        .map(entry_attack)
        .collect::<Result<Vec<_>>>()?;
    let out = out_dir(&cfg.out)?;
    let (model, info) = load_model::<T>(&ckpt)?;
    let (slice, eval) = eval_slice::<T>(&paths, cfg.examples.unwrap(), cfg.eval_seed.unwrap())?;
    write_text(&out.join("attack_config.json"), &json(cfg))?;
    let report = build_report(&model, info, &slice, eval, &suite, Some(&out))?;
    write_text(&out.join("report.json"), &json(&report))?;
    println!("clean accuracy: {:.4}", report.clean_accuracy);
    for row in &report.rows {
        let label = match row.attack {
            Attack::Pgd(c) => format!(
                "pgd eps={:.2} step={:.2} iters={} restarts={}",
                c.epsilon * PIXEL_SCALE,
                c.step * PIXEL_SCALE,
                c.iters,
                c.restarts
            ),
            Attack::Spsa(c) => format!(
                "spsa eps={:.2} iters={} samples={}",
                c.epsilon * PIXEL_SCALE,
                c.iters,
                c.samples_per_step
            ),
        };
        println!("{label}: adversarial accuracy {:.4}", row.adversarial_accuracy);
    }
    Ok(())
}

// ---- sweep ----

pub fn sweep(flags: SweepConfig) -> Result<()> {
    let file: SweepConfig = load_file(flags.config.as_deref())?;
    check_command(&file.command, "sweep")?;
    let defaults = SweepConfig {
        command: Some("sweep".into()),
        precision: Some("f32".into()),
        examples: Some(100),
        eval_seed: Some(0),
        eps: Some(0.3 * PIXEL_SCALE),
        steps: Some(DEFAULT_SWEEP_STEPS.to_vec()),
        iters: Some(DEFAULT_SWEEP_ITERS.to_vec()),
        restarts: Some(1),
        seed: Some(0),
        ..Default::default()
    };
    let mut cfg = flags.over(file).over(defaults);
    cfg.command = Some("sweep".into());
    with_precision!(cfg.precision, run_sweep(&cfg))
}

fn run_sweep<T: Scalar>(cfg: &SweepConfig) -> Result<()> {
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    let paths = test_paths(&cfg.data_dir, &cfg.test_images, &cfg.test_labels)?;
    let eps = normalize(cfg.eps.unwrap(), "eps")?;
    let steps = cfg.steps.clone().unwrap();
    if let Some(s) = steps.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
        return Err(Usage(format!("--steps are in [0, 1] pixel units, got {s}")).into());
    }
    let out = out_dir(&cfg.out)?;
    let (model, _) = load_model::<T>(&ckpt)?;
    let (slice, eval) = eval_slice::<T>(&paths, cfg.examples.unwrap(), cfg.eval_seed.unwrap())?;
    write_text(&out.join("sweep_config.json"), &json(cfg))?;
    let mut grid = grid_sweep(
        &model,
        &slice,
        eps,
        &steps,
        cfg.iters.as_deref().unwrap(),
        cfg.restarts.unwrap(),
        cfg.seed.unwrap(),
    )?;
    grid.eval = Some(eval);
    write_text(&out.join("heatmap.csv"), &heatmap_csv(&grid))?;
    write_text(&out.join("heatmap.json"), &json(&grid))?;
    println!("heatmap: {} cells -> {}", grid.steps.len() * grid.iters.len(), out.join("heatmap.csv").display());
    Ok(())
}

// ---- surface ----

pub fn surface(flags: SurfaceConfig) -> Result<()> {
    let file: SurfaceConfig = load_file(flags.config.as_deref())?;
    check_command(&file.command, "surface")?;
    let defaults = SurfaceConfig {
        command: Some("surface".into()),
        precision: Some("f32".into()),
        example: Some(0),
        eps: Some(0.15 * PIXEL_SCALE),
        k: Some(10),
        seed: Some(0),
        ..Default::default()
    };
    let mut cfg = flags.over(file).over(defaults);
    cfg.command = Some("surface".into());
    with_precision!(cfg.precision, run_surface(&cfg))
}

fn run_surface<T: Scalar>(cfg: &SurfaceConfig) -> Result<()> {
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    let paths = test_paths(&cfg.data_dir, &cfg.test_images, &cfg.test_labels)?;
    let eps = normalize(cfg.eps.unwrap(), "eps")?;
    let out = out_dir(&cfg.out)?;
    let (model, _) = load_model::<T>(&ckpt)?;
    let test = load_data::<T>(&paths)?;
    let index = cfg.example.unwrap();
    let (x, label) = example(&test, index)?;
    write_text(&out.join("surface_config.json"), &json(cfg))?;
    let s = loss_surface(&model, &x, label, eps, cfg.k.unwrap(), cfg.seed.unwrap(), index)?;
    write_text(&out.join("surface.csv"), &surface_csv(&s))?;
    write_text(&out.join("surface.json"), &json(&s))?;
    println!("surface: {0}x{0} cells, center loss {1:.6}", 2 * s.k + 1, s.center());
    Ok(())
}

// ---- histogram ----

pub fn histogram(flags: HistogramConfig) -> Result<()> {
    let file: HistogramConfig = load_file(flags.config.as_deref())?;
    check_command(&file.command, "histogram")?;
    let defaults = HistogramConfig {
        command: Some("histogram".into()),
        precision: Some("f32".into()),
        example: Some(0),
        eps: Some(0.3 * PIXEL_SCALE),
        step: Some(0.01 * PIXEL_SCALE),
        iters: Some(40),
        restarts: Some(1000),
        target_mode: Some(TargetMode::Untargeted),
        seed: Some(0),
        ..Default::default()
    };
    let mut cfg = flags.over(file).over(defaults);
    cfg.command = Some("histogram".into());
    with_precision!(cfg.precision, run_histogram(&cfg))
}

fn run_histogram<T: Scalar>(cfg: &HistogramConfig) -> Result<()> {
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    let paths = test_paths(&cfg.data_dir, &cfg.test_images, &cfg.test_labels)?;
    let attack = AttackConfig::new(
        normalize(cfg.eps.unwrap(), "eps")?,
        normalize(cfg.step.unwrap(), "step")?,
        cfg.iters.unwrap(),
        cfg.restarts.unwrap(),
    )
    .with_target_mode(cfg.target_mode.unwrap())
    .with_seed(cfg.seed.unwrap());
    attack.validate()?;
    let out = out_dir(&cfg.out)?;
    let (model, _) = load_model::<T>(&ckpt)?;
    let test = load_data::<T>(&paths)?;
    let index = cfg.example.unwrap();
    let (x, label) = example(&test, index)?;
    write_text(&out.join("histogram_config.json"), &json(cfg))?;
    let h = restart_histogram(&model, &x, label, &attack, index)?;
    let meta = histogram_metadata(&h);
    write_text(&out.join("histogram.csv"), &histogram_csv(&h))?;
    write_text(&out.join("histogram.json"), &json(&meta))?;
    println!(
        "histogram: {} restarts, max loss {:.4}, threshold {:.4}, {} above",
        meta.restarts, meta.max_loss, meta.threshold, meta.above_threshold
    );
    Ok(())
}
