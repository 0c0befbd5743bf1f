//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits nonzero if any fails.
//!
//! The ablation criteria (6, 7 and 9) train nine reference variants and take
//! the better part of an hour on one core. Set `REFDET_ACCEPTANCE` to a comma
//! separated list of criterion numbers to run a subset.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use refdet::checkpoint::{Checkpoint, CheckpointMeta};
use refdet::compare::{run_comparison, AblationTable, Variant};
use refdet::config::TemplateModeName;
use refdet::manifest::{default_ids, Dataset};
use refdet::pipeline::{evaluate, prepare_eval_set, train, LossRecorder};
use refdet::{ExperimentConfig, Model};
use refdet_core::data::{resize_test, Sample, Split};
use refdet_core::detector::Stage;
use refdet_core::synth::{synth_generate, SynthConfig};

/// Wall-clock budget of the unit and property suite.
const UNIT_SUITE_BUDGET: Duration = Duration::from_secs(120);
/// Overfit recipe: images, steps, loss ceiling, time budget.
const OVERFIT_IMAGES: usize = 5;
const OVERFIT_STEPS: usize = 200;
const OVERFIT_MAX_LOSS: f32 = 0.1;
const OVERFIT_BUDGET: Duration = Duration::from_secs(300);
/// Residual texture after template subtraction, relative to the image spread.
const TEMPLATE_RESIDUAL_RATIO: f64 = 0.5;
/// Required gain of each template-reference variant, in mAP points (0..100).
const TR_MIN_GAIN: f64 = 1.0;
/// Seed-to-seed standard deviation of the reference baseline, in mAP points
/// (four init seeds on the same data: 18.02, 16.12, 13.96, 19.08).
/// Comparisons described as "within noise" may fall short by this much.
const NOISE: f64 = 2.25;
/// Ceiling on the generator's share of inference time.
const PTG_TIME_SHARE: f64 = 0.35;

type UnitCheck = (u8, fn(&TestRun) -> Outcome);
type TableCheck = (u8, fn(&AblationTable) -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn selected() -> BTreeSet<u8> {
    match std::env::var("REFDET_ACCEPTANCE") {
        Ok(list) if !list.trim().is_empty() => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        _ => (1..=9).collect(),
    }
}

struct TestRun {
    /// `(binary, test name, passed)`.
    results: Vec<(String, String, bool)>,
    /// Wall time of all test binaries, excluding compilation.
    elapsed: Duration,
    error: Option<String>,
}

impl TestRun {
    fn failed(error: String) -> Self {
        Self {
            results: Vec::new(),
            elapsed: Duration::ZERO,
            error: Some(error),
        }
    }

    fn count(&self, pred: impl Fn(&str, &str) -> bool) -> (usize, usize) {
        let hits: Vec<bool> = self
            .results
            .iter()
            .filter(|(b, n, _)| pred(b, n))
            .map(|r| r.2)
            .collect();
        (hits.iter().filter(|&&p| p).count(), hits.len())
    }
}

/// Builds every unit, property, oracle, gradient and CLI test binary of the
/// workspace, then runs each one from its package directory and parses the
/// libtest output.
fn run_unit_suite() -> TestRun {
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let build = Command::new(cargo)
        .current_dir(workspace_root())
        .args([
            "test",
            "--workspace",
            "--no-run",
            "--message-format=json",
            "--lib",
            "--bins",
        ])
        .args([
            "--test",
            "gradcheck",
            "--test",
            "oracles",
            "--test",
            "properties",
            "--test",
            "derived",
            "--test",
            "cli",
        ])
        .output();
    let build = match build {
        Ok(o) if o.status.success() => o,
        Ok(o) => {
            return TestRun::failed(
                String::from_utf8_lossy(&o.stderr)
                    .lines()
                    .rev()
                    .take(5)
                    .collect::<Vec<_>>()
                    .join(" | "),
            )
        }
        Err(e) => return TestRun::failed(e.to_string()),
    };
    let mut binaries = Vec::new();
    for line in String::from_utf8_lossy(&build.stdout).lines() {
        let Ok(msg) = serde_json::from_str::<serde_json::Value>(line) else {
            continue;
        };
        if let (Some(exe), Some(manifest)) = (msg["executable"].as_str(), msg["manifest_path"].as_str()) {
            if msg["profile"]["test"].as_bool() == Some(true) {
                let name = msg["target"]["name"].as_str().unwrap_or_default().to_string();
                binaries.push((
                    name,
                    PathBuf::from(exe),
                    Path::new(manifest).parent().map(Path::to_path_buf),
                ));
            }
        }
    }
    let mut results = Vec::new();
    let mut elapsed = Duration::ZERO;
    for (name, exe, dir) in binaries {
        let t0 = Instant::now();
        let mut cmd = Command::new(&exe);
        if let Some(d) = dir {
            cmd.current_dir(d);
        }
        let out = match cmd.output() {
            Ok(o) => o,
            Err(e) => return TestRun::failed(format!("{}: {e}", exe.display())),
        };
        elapsed += t0.elapsed();
        for line in String::from_utf8_lossy(&out.stdout).lines() {
            if let Some((test, status)) = line.strip_prefix("test ").and_then(|r| r.rsplit_once(" ... ")) {
                results.push((name.clone(), test.to_string(), status.starts_with("ok")));
            }
        }
        if !out.status.success() && !results.iter().any(|r| r.0 == name && !r.2) {
            results.push((name.clone(), "<harness>".into(), false));
        }
    }
    TestRun {
        results,
        elapsed,
        error: None,
    }
}

fn criterion_1(run: &TestRun) -> Outcome {
    if let Some(e) = &run.error {
        return Outcome::new(false, format!("test run failed: {e}"));
    }
    let (ok, all) = run.count(|_, _| true);
    let failed: Vec<&str> = run.results.iter().filter(|r| !r.2).map(|r| r.1.as_str()).collect();
    Outcome::new(
        ok == all && all > 0 && run.elapsed < UNIT_SUITE_BUDGET,
        format!(
            "{ok}/{all} tests passed in {:.1} s of test time (budget {} s){}",
            run.elapsed.as_secs_f64(),
            UNIT_SUITE_BUDGET.as_secs(),
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failed.join(", "))
            }
        ),
    )
}

fn criterion_2(run: &TestRun) -> Outcome {
    let oracle = |name: &str| run.results.iter().find(|r| r.1 == name).map(|r| r.2);
    let nms = oracle("nms_matches_exhaustive_oracle");
    let map = oracle("map_matches_brute_force_oracle");
    let show = |r: Option<bool>| match r {
        Some(true) => "ok",
        Some(false) => "FAILED",
        None => "missing",
    };
    Outcome::new(
        nms == Some(true) && map == Some(true),
        format!(
            "NMS vs exhaustive subset oracle (200 instances, n <= 10): {}; mAP vs brute-force AP (20 scenes, |d| < 1e-9): {}",
            show(nms),
            show(map)
        ),
    )
}

fn criterion_3(run: &TestRun) -> Outcome {
    let (ok, all) = run.count(|b, n| b.contains("gradcheck") || n.contains("gradient"));
    Outcome::new(
        ok == all && all > 0,
        format!("{ok}/{all} finite-difference gradient checks passed (eps 1e-3, rel err < 1e-2)"),
    )
}

fn reference_config() -> ExperimentConfig {
    ExperimentConfig::load(&workspace_root().join("configs/reference/baseline.toml"))
        .expect("reference baseline config")
}

fn dataset_from(categories: Vec<String>, samples: Vec<Sample>) -> Dataset {
    Dataset {
        categories,
        generator: None,
        ids: default_ids(&samples),
        samples,
    }
}

fn reference_dataset(cfg: &ExperimentConfig) -> Dataset {
    let synth = cfg.data.synth.to_core().expect("synth section");
    let ds = synth_generate(&synth, cfg.seed).expect("synthetic data");
    dataset_from(ds.category_names, ds.samples)
}

struct Overfit {
    cfg: ExperimentConfig,
    model: Model,
    samples: Vec<Sample>,
    final_loss: f32,
    map: f64,
    elapsed: Duration,
}

/// Five defective training images trained full-batch, then scored on
/// themselves.
fn overfit() -> Overfit {
    let mut cfg = ExperimentConfig {
        seed: 3,
        ..ExperimentConfig::default()
    };
    cfg.train.lr = 2e-3;
    cfg.train.weight_decay = 0.0;
    cfg.train.batch_size = OVERFIT_IMAGES;
    cfg.train.epochs = OVERFIT_STEPS;
    cfg.train.max_iters = Some(OVERFIT_STEPS);
    cfg.train.decay_epochs = vec![OVERFIT_STEPS * 3 / 4];
    cfg.train.warmup_iters = Some(20);
    cfg.train.warmup_ratio = 0.01;
    let synth = SynthConfig {
        num_train: 40,
        num_test: 1,
        ..SynthConfig::default()
    };
    let ds = synth_generate(&synth, cfg.seed).expect("synthetic data");
    let samples: Vec<Sample> = ds
        .samples
        .into_iter()
        .filter(|s| s.split == Split::Train && !s.is_normal)
        .take(OVERFIT_IMAGES)
        .collect();
    let dataset = dataset_from(ds.category_names, samples.clone());
    let mut losses = LossRecorder::default();
    let t0 = Instant::now();
    let (model, _) = train(&cfg, &dataset, &mut losses).expect("overfit training");
    let elapsed = t0.elapsed();
    let final_loss = losses.iterations.last().map_or(f32::INFINITY, |l| l.losses.total);
    let refs: Vec<&Sample> = samples.iter().collect();
    let set = prepare_eval_set(&cfg, &refs, false).expect("eval set");
    let (report, _) = evaluate(&cfg, &model, &set, &mut ()).expect("evaluation");
    Overfit {
        cfg,
        model,
        samples,
        final_loss,
        map: report.map,
        elapsed,
    }
}

fn criterion_4(o: &Overfit) -> Outcome {
    Outcome::new(
        o.final_loss < OVERFIT_MAX_LOSS && o.map == 1.0 && o.elapsed < OVERFIT_BUDGET,
        format!(
            "{OVERFIT_IMAGES} images, {OVERFIT_STEPS} steps: final loss {:.4} (< {OVERFIT_MAX_LOSS}), mAP@0.5 {:.4} (= 1), {:.0} s (< {} s)",
            o.final_loss,
            o.map,
            o.elapsed.as_secs_f64(),
            OVERFIT_BUDGET.as_secs()
        ),
    )
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Per channel, pooled over the test split: spread of `I - T` against the
/// spread of `I` around its own mean.
fn criterion_5(dataset: &Dataset) -> Outcome {
    let mut diff = [Vec::new(), Vec::new(), Vec::new()];
    let mut raw = [Vec::new(), Vec::new(), Vec::new()];
    for (_, s) in dataset.split(Split::Test) {
        let Some(t) = &s.template else {
            return Outcome::new(false, "test sample without template");
        };
        for (i, (&a, &b)) in s.image.data.iter().zip(&t.data).enumerate() {
            diff[i % 3].push(a as f64 - b as f64);
            raw[i % 3].push(a as f64);
        }
    }
    let ratios: Vec<f64> = (0..3).map(|c| std_dev(&diff[c]) / std_dev(&raw[c])).collect();
    Outcome::new(
        ratios.iter().all(|&r| r < TEMPLATE_RESIDUAL_RATIO),
        format!(
            "std(I-T)/std(I-mean) per channel: {:.3} {:.3} {:.3} (< {TEMPLATE_RESIDUAL_RATIO})",
            ratios[0], ratios[1], ratios[2]
        ),
    )
}

const VARIANTS: [&str; 9] = [
    "baseline",
    "tr-pre",
    "tr-inter",
    "tr-post",
    "ptg-inter",
    "cr-k1.5",
    "cr-k1.3",
    "cr-k1.7",
    "cr-only",
];

fn ablation(dataset: &Dataset) -> AblationTable {
    let dir = workspace_root().join("configs/reference");
    let variants: Vec<Variant> = VARIANTS
        .iter()
        .map(|label| Variant {
            label: label.to_string(),
            config: ExperimentConfig::load(&dir.join(format!("{label}.toml"))).expect("reference config"),
        })
        .collect();
    run_comparison(&variants, dataset, &mut ()).expect("ablation run")
}

/// mAP in points (0..100) of a row.
fn points(table: &AblationTable, label: &str) -> f64 {
    100.0 * table.row(label).expect("row present").map
}

fn criterion_6(table: &AblationTable) -> Outcome {
    let base = points(table, "baseline");
    let mut checks = Vec::new();
    for tr in ["tr-pre", "tr-inter", "tr-post"] {
        let m = points(table, tr);
        checks.push((
            m >= base + TR_MIN_GAIN,
            format!("{tr} {m:.2} >= {:.2}", base + TR_MIN_GAIN),
        ));
    }
    let ptg = points(table, "ptg-inter");
    checks.push((ptg >= base, format!("ptg-inter {ptg:.2} >= {base:.2}")));
    let (k13, k15, k17) = (
        points(table, "cr-k1.3"),
        points(table, "cr-k1.5"),
        points(table, "cr-k1.7"),
    );
    checks.push((k15 >= base, format!("cr-k1.5 {k15:.2} >= {base:.2}")));
    let best_other = k13.max(k17);
    checks.push((
        k15 >= best_other - NOISE,
        format!("cr-k1.5 {k15:.2} >= max(k1.3 {k13:.2}, k1.7 {k17:.2}) - {NOISE}"),
    ));
    let only = points(table, "cr-only");
    checks.push((only <= k15, format!("cr-only {only:.2} <= cr-k1.5 {k15:.2}")));
    let pass = checks.iter().all(|c| c.0);
    let detail = checks
        .iter()
        .map(|(ok, d)| format!("{d} [{}]", if *ok { "ok" } else { "no" }))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(pass, format!("baseline {base:.2}; {detail}"))
}

fn criterion_7(table: &AblationTable) -> Outcome {
    let drop = |label: &str| {
        let r = table.row(label).expect("row present");
        100.0 * (r.map - r.map_shifted.unwrap_or(f64::NAN))
    };
    let (pre, inter, post) = (drop("tr-pre"), drop("tr-inter"), drop("tr-post"));
    Outcome::new(
        pre > inter && pre > post,
        format!("mAP drop under 5-10 px shift: pre {pre:.2}, inter {inter:.2}, post {post:.2}"),
    )
}

/// Loads a plain detector from a checkpoint into a `post` model and compares
/// raw region outputs with and without re-scoring.
fn criterion_8(o: &Overfit) -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("baseline.ckpt");
    let meta = CheckpointMeta {
        fingerprint: o.cfg.fingerprint(),
        config: o.cfg.to_toml(),
        code_version: env!("REFDET_CODE_HASH").into(),
        epoch: o.cfg.train.epochs,
        iteration: OVERFIT_STEPS,
    };
    if let Err(e) = Checkpoint::from_store(meta, &o.model.store).save(&path) {
        return Outcome::new(false, format!("saving checkpoint: {e}"));
    }
    let mut post_cfg = o.cfg.clone();
    post_cfg.model.template = TemplateModeName::Post;
    let mut post = Model::new(&post_cfg).expect("post model");
    let restored = Checkpoint::load(&path).and_then(|ck| ck.restore_into(&mut post.store, &path));
    if let Err(e) = restored {
        return Outcome::new(false, format!("restoring into post model: {e}"));
    }
    let classes = o.cfg.model.num_classes + 1;
    let (mut boxes_equal, mut scores_not_higher) = (true, true);
    let (mut changed, mut total) = (0usize, 0usize);
    for s in &o.samples {
        let s = resize_test(s, &o.cfg.resize()).expect("resize");
        let image = s.image.to_tensor();
        let template = s.template.as_ref().expect("template").to_tensor();
        let plain = o
            .model
            .detector
            .detect_raw(&o.model.store, &image, None, &mut ())
            .expect("plain");
        let rescored = post
            .detector
            .detect_raw(&post.store, &image, Some(&template), &mut ())
            .expect("post");
        boxes_equal &= plain.proposals == rescored.proposals && plain.boxes == rescored.boxes;
        for (i, (a, b)) in plain.scores.iter().zip(&rescored.scores).enumerate() {
            if i % classes == 0 {
                continue;
            }
            total += 1;
            scores_not_higher &= b <= a;
            changed += usize::from(b != a);
        }
    }
    Outcome::new(
        boxes_equal && scores_not_higher && changed > 0,
        format!(
            "proposals and boxes bitwise equal: {boxes_equal}; no score raised: {scores_not_higher}; {changed}/{total} class scores changed"
        ),
    )
}

fn criterion_9(table: &AblationTable) -> Outcome {
    let mut complete = true;
    for row in &table.rows {
        let counted: usize = row.stages.iter().map(|s| s.parameters).sum();
        let shares: f64 = row.stages.iter().map(|s| s.time_share).sum();
        complete &= counted == row.total_parameters && (shares - 1.0).abs() < 1e-6;
    }
    let ptg = table.row("ptg-inter").expect("row present");
    let cost = ptg.stage(Stage::Ptg);
    Outcome::new(
        complete && cost.parameters > 0 && cost.time_share < PTG_TIME_SHARE,
        format!(
            "per-stage parameters and time shares complete for {} rows: {complete}; ptg-inter generator {} params, {:.1}% of inference time (< {:.0}%)",
            table.rows.len(),
            cost.parameters,
            100.0 * cost.time_share,
            100.0 * PTG_TIME_SHARE
        ),
    )
}

fn main() -> ExitCode {
    let want = selected();
    let mut outcomes: Vec<(u8, Outcome)> = Vec::new();
    if want.iter().any(|c| (1..=3).contains(c)) {
        let run = run_unit_suite();
        let checks: [UnitCheck; 3] = [(1, criterion_1), (2, criterion_2), (3, criterion_3)];
        for (id, f) in checks {
            if want.contains(&id) {
                outcomes.push((id, f(&run)));
            }
        }
    }
    if want.contains(&4) || want.contains(&8) {
        let o = overfit();
        if want.contains(&4) {
            outcomes.push((4, criterion_4(&o)));
        }
        if want.contains(&8) {
            outcomes.push((8, criterion_8(&o)));
        }
    }
    let needs_data = [5, 6, 7, 9].iter().any(|c| want.contains(c));
    if needs_data {
        let dataset = reference_dataset(&reference_config());
        if want.contains(&5) {
            outcomes.push((5, criterion_5(&dataset)));
        }
        if [6, 7, 9].iter().any(|c| want.contains(c)) {
            let table = ablation(&dataset);
            println!("{}", table.to_markdown());
            let checks: [TableCheck; 3] = [(6, criterion_6), (7, criterion_7), (9, criterion_9)];
            for (id, f) in checks {
                if want.contains(&id) {
                    outcomes.push((id, f(&table)));
                }
            }
        }
    }
    outcomes.sort_by_key(|o| o.0);
    for (id, o) in &outcomes {
        println!("criterion {id}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.1.pass).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
