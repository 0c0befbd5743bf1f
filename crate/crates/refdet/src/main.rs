use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use refdet::checkpoint::Checkpoint;
use refdet::compare::{run_comparison, AblationRow, CompareObserver, Variant};
use refdet::config::ExperimentConfig;
use refdet::manifest::{default_ids, load_manifest, read_png, write_dataset, write_png, Dataset, GeneratorInfo};
use refdet::pipeline::{evaluate, prepare_eval_set, train, Model, TrainObserver};
use refdet::render::{draw_overlay, records, rescale, write_records, DetectionRecord};
use refdet::run::{checkpoint_meta, RunDir, RunObserver};
use refdet_core::data::{resize_test, Sample, Split};
use refdet_core::eval::MapReport;
use refdet_core::synth::synth_generate;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "refdet", version, about = "Reference-based defect detection experiments")]
struct Cli {
    /// Experiment config (TOML). Unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location (dataset root, run directory or report directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the fully defaulted config and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic paired-template dataset described by `data.synth`.
    GenerateData,
    /// Train a model; writes a run directory.
    Train,
    /// Evaluate a checkpoint on a manifest split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluate on the pixel-shifted copy of the split.
        #[arg(long)]
        shifted: bool,
        /// Apply template re-scoring at evaluation time (plain detectors only).
        #[arg(long)]
        tr_post: bool,
    },
    /// Detect on image files and write detections plus overlays.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding a template with the same file name per image.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f32>,
        #[arg(long)]
        tr_post: bool,
        images: Vec<PathBuf>,
    },
    /// Train and evaluate several configs on one dataset and tabulate them.
    Compare {
        /// One config per variant; the file stem is the row label.
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// Draw boxes from a detections file onto the images they refer to.
    Render {
        #[arg(long)]
        detections: PathBuf,
        /// Directory holding `<image>.png` for every record's `image` field.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        threshold: Option<f32>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.downcast_ref::<refdet::Error>() {
                Some(refdet::Error::Config(_)) => "config",
                Some(refdet::Error::Manifest { .. } | refdet::Error::Dataset(_) | refdet::Error::Image { .. }) => {
                    "data"
                }
                Some(refdet::Error::Checkpoint { .. }) => "checkpoint",
                Some(refdet::Error::Locked { .. }) => "locked",
                Some(refdet::Error::Io { .. }) => "io",
                Some(refdet::Error::Core(_)) => "model",
                None => "error",
            };
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", serde_json::json!({ "error": kind, "message": chain.join(": ") }));
            ExitCode::from(if kind == "config" { 2 } else { 1 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if cli.dump_defaults {
        print!("{}", ExperimentConfig::defaults_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        bail!("no subcommand given (see --help)");
    };
    let cfg = load_config(&cli)?;
    match command {
        Command::GenerateData => generate_data(&cfg, cli.out.as_deref()),
        Command::Train => train_cmd(cfg, cli.out.as_deref()),
        Command::Eval {
            checkpoint,
            split,
            shifted,
            tr_post,
        } => eval_cmd(&cli, checkpoint, split, *shifted, *tr_post),
        Command::Predict {
            checkpoint,
            templates,
            threshold,
            tr_post,
            images,
        } => predict_cmd(&cli, checkpoint, templates.as_deref(), *threshold, *tr_post, images),
        Command::Compare { configs } => compare_cmd(&cli, configs),
        Command::Render {
            detections,
            images,
            threshold,
        } => render_cmd(&cfg, detections, images, *threshold, cli.out.as_deref()),
    }
}

fn generate_data(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let root = match out {
        Some(p) => p.to_path_buf(),
        None => cfg.data.manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    if root.join(refdet::manifest::MANIFEST_FILE).exists() {
        bail!("{} already holds a dataset; choose a fresh directory", root.display());
    }
    let synth = cfg.data.synth.to_core()?;
    let section = toml::to_string(&cfg.data.synth)?;
    let ds = synth_generate(&synth, cfg.seed)?;
    let dataset = Dataset {
        categories: ds.category_names,
        generator: Some(GeneratorInfo {
            seed: cfg.seed,
            config_sha256: Sha256::digest(section.as_bytes())
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect(),
        }),
        ids: default_ids(&ds.samples),
        samples: ds.samples,
    };
    let path = write_dataset(&root, &dataset)?;
    let normals = dataset.samples.iter().filter(|s| s.is_normal).count();
    println!(
        "wrote {} samples ({} normal) to {}",
        dataset.samples.len(),
        normals,
        path.display()
    );
    Ok(())
}

fn split_samples(ds: &Dataset, split: &str) -> Result<Vec<(String, Sample)>> {
    let s = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => bail!("unknown split `{other}` (expected train or test)"),
    };
    Ok(ds
        .split(s)
        .into_iter()
        .map(|(id, s)| (id.to_string(), s.clone()))
        .collect())
}

fn write_report(dir: &Path, name: &str, report: &MapReport, categories: &[String]) -> Result<String> {
    let rows: Vec<_> = report
        .per_category
        .iter()
        .map(|c| {
            serde_json::json!({
                "category": c.category,
                "name": categories.get(c.category - 1),
                "ap": c.ap,
                "num_gt": c.num_gt,
                "num_detections": c.num_detections,
            })
        })
        .collect();
    let json = serde_json::json!({ "map": report.map, "per_category": rows });
    fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&json)?)?;
    let mut text = format!("{:<16} {:>8} {:>6} {:>6}\n", "category", "AP", "gt", "dets");
    for c in &report.per_category {
        let name = categories.get(c.category - 1).map_or("?", String::as_str);
        let ap = c.ap.map_or("n/a".to_string(), |a| format!("{:.2}", 100.0 * a));
        text += &format!("{name:<16} {ap:>8} {:>6} {:>6}\n", c.num_gt, c.num_detections);
    }
    text += &format!("{:<16} {:>8.2}\n", "mAP@0.5", 100.0 * report.map);
    fs::write(dir.join(format!("{name}.txt")), &text)?;
    Ok(text)
}

fn train_cmd(mut cfg: ExperimentConfig, out: Option<&Path>) -> Result<()> {
    if let Some(o) = out {
        cfg.output_dir = o.to_path_buf();
    }
    let dataset = load_manifest(&cfg.data.manifest).with_context(|| "loading the training manifest")?;
    refdet::pipeline::check_dataset(&cfg, &dataset)?;
    let run = RunDir::open(&cfg.output_dir)?;
    run.write_config(&cfg)?;
    let test: Vec<&Sample> = dataset.split(Split::Test).into_iter().map(|(_, s)| s).collect();
    let mut observer = RunObserver::new(&run, &cfg, &test)?;
    let (model, summary) = train(&cfg, &dataset, &mut observer)?;
    let meta = checkpoint_meta(&cfg, summary.epochs, summary.iterations);
    let final_path = run.checkpoint_path("final.ckpt");
    Checkpoint::from_store(meta, &model.store).save(&final_path)?;
    observer.metrics.write(serde_json::json!({
        "kind": "done",
        "iterations": summary.iterations,
        "epochs": summary.epochs,
        "elapsed_s": summary.elapsed.as_secs_f64(),
    }))?;
    observer.metrics.flush()?;
    if !test.is_empty() {
        let set = prepare_eval_set(&cfg, &test, false)?;
        let (report, _) = evaluate(&cfg, &model, &set, &mut ())?;
        print!(
            "{}",
            write_report(&run.report_dir(), "eval_test", &report, &dataset.categories)?
        );
    }
    println!("checkpoint: {}", final_path.display());
    Ok(())
}

/// Loads a checkpoint and the config it was trained with. A `--config`, when
/// given, must describe the same training run.
fn load_model(cli: &Cli, path: &Path, tr_post: bool) -> Result<(ExperimentConfig, Model)> {
    let ck = Checkpoint::load(path)?;
    let trained = ExperimentConfig::from_toml(&ck.meta.config).context("config embedded in checkpoint")?;
    let cfg = match &cli.config {
        Some(_) => {
            let cfg = load_config(cli)?;
            if cfg.fingerprint() != ck.meta.fingerprint {
                bail!(refdet::Error::Config(format!(
                    "fingerprint {} of --config does not match the checkpoint's {}",
                    cfg.fingerprint(),
                    ck.meta.fingerprint
                )));
            }
            cfg
        }
        None => trained,
    };
    let mut model = Model::new(&cfg)?;
    ck.restore_into(&mut model.store, path)?;
    if tr_post {
        model.set_rescoring(true)?;
    }
    Ok((cfg, model))
}

fn eval_cmd(cli: &Cli, checkpoint: &Path, split: &str, shifted: bool, tr_post: bool) -> Result<()> {
    let (cfg, model) = load_model(cli, checkpoint, tr_post)?;
    let dataset = load_manifest(&cfg.data.manifest)?;
    let samples = split_samples(&dataset, split)?;
    if samples.is_empty() {
        bail!(refdet::Error::Dataset(format!("split `{split}` is empty")));
    }
    let refs: Vec<&Sample> = samples.iter().map(|(_, s)| s).collect();
    let set = prepare_eval_set(&cfg, &refs, shifted)?;
    let (report, dets) = evaluate(&cfg, &model, &set, &mut ())?;
    let out = cli.out.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .and_then(Path::parent)
            .map_or_else(|| PathBuf::from("."), |run| run.join("report"))
    });
    fs::create_dir_all(&out)?;
    let name = format!(
        "eval_{split}{}{}",
        if shifted { "_shifted" } else { "" },
        if model.template_mode() == refdet_core::detector::TemplateMode::Post {
            "_trpost"
        } else {
            ""
        }
    );
    print!("{}", write_report(&out, &name, &report, &dataset.categories)?);
    // Export in original pixel coordinates.
    let mut recs = Vec::new();
    for ((id, orig), (prepared, det)) in samples.iter().zip(set.iter().zip(&dets)) {
        let sx = orig.image.width as f32 / prepared.image.width as f32;
        let sy = orig.image.height as f32 / prepared.image.height as f32;
        recs.extend(records(id, &rescale(det, sx, sy), &dataset.categories));
    }
    write_records(&out.join(format!("{name}_detections.jsonl")), &recs)?;
    Ok(())
}

fn predict_cmd(
    cli: &Cli,
    checkpoint: &Path,
    templates: Option<&Path>,
    threshold: Option<f32>,
    tr_post: bool,
    images: &[PathBuf],
) -> Result<()> {
    let (cfg, model) = load_model(cli, checkpoint, tr_post)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("predictions"));
    fs::create_dir_all(&out)?;
    let threshold = threshold.unwrap_or(cfg.eval.render_threshold);
    let categories = category_names(&cfg);
    let mut all = Vec::new();
    let mut failures = 0;
    for path in images {
        let result = (|| -> Result<Vec<DetectionRecord>> {
            let image = read_png(path)?;
            let template = match templates {
                Some(dir) => Some(read_png(
                    &dir.join(path.file_name().context("image path has no file name")?),
                )?),
                None => None,
            };
            let sample = Sample {
                image: image.clone(),
                template,
                boxes: vec![],
                labels: vec![],
                is_normal: false,
                split: Split::Test,
            };
            sample.validate(cfg.model.num_classes)?;
            let resized = resize_test(&sample, &cfg.resize())?;
            let det = model.detect(&resized, &mut ())?;
            let sx = image.width as f32 / resized.image.width as f32;
            let sy = image.height as f32 / resized.image.height as f32;
            let stem = path
                .file_stem()
                .map_or("image".into(), |s| s.to_string_lossy().to_string());
            let recs = records(&stem, &rescale(&det, sx, sy), &categories);
            write_png(
                &out.join(format!("{stem}.png")),
                &draw_overlay(&image, &recs, threshold),
            )?;
            Ok(recs)
        })();
        match result {
            Ok(r) => all.extend(r),
            Err(e) => {
                failures += 1;
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": "image", "file": path.display().to_string(), "message": format!("{e:#}") })
                );
            }
        }
    }
    write_records(&out.join("detections.jsonl"), &all)?;
    println!(
        "{} images, {} detections ({} at or above {threshold}), {} failures",
        images.len(),
        all.len(),
        all.iter().filter(|r| r.score >= threshold).count(),
        failures
    );
    if failures == images.len() && !images.is_empty() {
        bail!("every image failed");
    }
    Ok(())
}

fn category_names(cfg: &ExperimentConfig) -> Vec<String> {
    let names = &cfg.data.synth.defect_kinds;
    if names.len() == cfg.model.num_classes {
        names.clone()
    } else {
        (1..=cfg.model.num_classes).map(|c| format!("class{c}")).collect()
    }
}

fn render_cmd(
    cfg: &ExperimentConfig,
    detections: &Path,
    images: &Path,
    threshold: Option<f32>,
    out: Option<&Path>,
) -> Result<()> {
    let text = fs::read_to_string(detections).with_context(|| format!("reading {}", detections.display()))?;
    let mut recs: Vec<DetectionRecord> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        recs.push(serde_json::from_str(line).with_context(|| format!("{}:{}", detections.display(), i + 1))?);
    }
    let out = out.map_or_else(|| PathBuf::from("overlays"), Path::to_path_buf);
    fs::create_dir_all(&out)?;
    let threshold = threshold.unwrap_or(cfg.eval.render_threshold);
    let mut ids: Vec<&str> = recs.iter().map(|r| r.image.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut failures = 0;
    for id in &ids {
        let src = images.join(format!("{id}.png"));
        match read_png(&src) {
            Ok(im) => {
                let mine: Vec<DetectionRecord> = recs.iter().filter(|r| r.image == *id).cloned().collect();
                write_png(&out.join(format!("{id}.png")), &draw_overlay(&im, &mine, threshold))?;
            }
            Err(e) => {
                failures += 1;
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": "image", "file": src.display().to_string(), "message": e.to_string() })
                );
            }
        }
    }
    println!(
        "rendered {} of {} images to {}",
        ids.len() - failures,
        ids.len(),
        out.display()
    );
    Ok(())
}

struct Progress;

impl CompareObserver for Progress {
    fn start(&mut self, label: &str, retrain: bool) {
        eprintln!(
            "[{label}] {}",
            if retrain { "training" } else { "reusing trained weights" }
        );
    }

    fn trainer(&mut self) -> Option<&mut dyn TrainObserver> {
        None
    }

    fn done(&mut self, row: &AblationRow) {
        eprintln!("[{}] mAP {:.2}", row.label, 100.0 * row.map);
    }
}

fn compare_cmd(cli: &Cli, configs: &[PathBuf]) -> Result<()> {
    let mut variants = Vec::new();
    for p in configs {
        let mut cfg = ExperimentConfig::load(p)?;
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        let label = p
            .file_stem()
            .map_or("variant".into(), |s| s.to_string_lossy().to_string());
        variants.push(Variant { label, config: cfg });
    }
    refdet::compare::check_variants(&variants)?;
    let dataset = load_manifest(&variants[0].config.data.manifest)?;
    let table = run_comparison(&variants, &dataset, &mut Progress)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("compare"));
    fs::create_dir_all(&out)?;
    let md = table.to_markdown();
    fs::write(out.join("ablation.md"), &md)?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    print!("{md}");
    Ok(())
}
