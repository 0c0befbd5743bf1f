//! Ablation harness: trains (or reuses) one model per variant, evaluates on
//! the clean and the pixel-shifted test split, and accounts parameters and
//! inference time per stage.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use refdet_core::data::{Sample, Split};
use refdet_core::detector::{describe, Stage};
use serde::Serialize;

use crate::config::{ExperimentConfig, TemplateModeName};
use crate::error::{Error, Result};
use crate::manifest::Dataset;
use crate::pipeline::{evaluate, prepare_eval_set, train, Model, TrainObserver};
use crate::profile::StageTimer;

#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageCost {
    pub stage: &'static str,
    pub parameters: usize,
    /// Fraction of summed inference stage time.
    pub time_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub setup: String,
    pub map: f64,
    pub map_shifted: Option<f64>,
    pub per_category: Vec<Option<f64>>,
    pub total_parameters: usize,
    pub stages: Vec<StageCost>,
    pub inference_ms_per_image: f64,
    pub train_seconds: f64,
    /// Label of the variant whose trained weights this row reuses.
    pub reused_weights_of: Option<String>,
}

impl AblationRow {
    pub fn stage(&self, stage: Stage) -> &StageCost {
        self.stages
            .iter()
            .find(|s| s.stage == stage.name())
            .expect("every stage is reported")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub categories: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn has_shifted(&self) -> bool {
        self.rows.iter().any(|r| r.map_shifted.is_some())
    }

    /// Markdown rendering: mAP table first, then cost accounting. Shifted
    /// columns are marked with `*`.
    pub fn to_markdown(&self) -> String {
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let mut s = String::new();
        let shifted = self.has_shifted();
        let base = self.rows.first().map(|r| (r.map, r.map_shifted));
        let _ = write!(s, "| variant | setup | mAP |");
        if shifted {
            let _ = write!(s, " mAP* | drop |");
        }
        for c in &self.categories {
            let _ = write!(s, " {c} |");
        }
        s.push('\n');
        let cols = 3 + if shifted { 2 } else { 0 } + self.categories.len();
        s.push_str(&"|---".repeat(cols));
        s.push_str("|\n");
        for r in &self.rows {
            let delta = match base {
                Some((b, _)) if !std::ptr::eq(r, &self.rows[0]) => format!(" ({:+.1})", 100.0 * (r.map - b)),
                _ => String::new(),
            };
            let _ = write!(s, "| {} | {} | {}{} |", r.label, r.setup, pct(r.map), delta);
            if shifted {
                match r.map_shifted {
                    Some(m) => {
                        let _ = write!(s, " {} | {:.1} |", pct(m), 100.0 * (r.map - m));
                    }
                    None => s.push_str(" - | - |"),
                }
            }
            for ap in &r.per_category {
                let _ = write!(s, " {} |", ap.map_or("-".into(), pct));
            }
            s.push('\n');
        }
        s.push_str("\nmAP values in percent; `*` marks the pixel-shifted test set, `drop` is clean minus shifted.\n\n");
        let _ = write!(s, "| variant | params | ms/img |");
        for st in Stage::ALL {
            let _ = write!(s, " {} params | {} time |", st.name(), st.name());
        }
        s.push('\n');
        s.push_str(&"|---".repeat(3 + 2 * Stage::ALL.len()));
        s.push_str("|\n");
        for r in &self.rows {
            let _ = write!(
                s,
                "| {} | {} | {:.2} |",
                r.label, r.total_parameters, r.inference_ms_per_image
            );
            for c in &r.stages {
                let _ = write!(s, " {} | {}% |", c.parameters, pct(c.time_share));
            }
            s.push('\n');
        }
        s
    }
}

/// Rejects variant sets that would not be comparable.
pub fn check_variants(variants: &[Variant]) -> Result<()> {
    let first = variants
        .first()
        .ok_or_else(|| Error::Config("compare needs at least one variant".into()))?;
    for v in &variants[1..] {
        if v.config.data != first.config.data {
            return Err(Error::Config(format!(
                "variant `{}` uses a different dataset section than `{}`",
                v.label, first.label
            )));
        }
        if v.config.seed != first.config.seed {
            return Err(Error::Config(format!(
                "variant `{}` uses a different seed than `{}`",
                v.label, first.label
            )));
        }
        if (v.config.eval.shift_px, v.config.eval.shift_seed)
            != (first.config.eval.shift_px, first.config.eval.shift_seed)
        {
            return Err(Error::Config(format!(
                "variant `{}` uses a different shifted test set",
                v.label
            )));
        }
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(v) = variants.iter().find(|v| !seen.insert(v.label.as_str())) {
        return Err(Error::Config(format!("duplicate variant label `{}`", v.label)));
    }
    Ok(())
}

/// Progress callbacks for long comparisons.
pub trait CompareObserver {
    fn start(&mut self, _label: &str, _retrain: bool) {}
    fn trainer(&mut self) -> Option<&mut dyn TrainObserver> {
        None
    }
    fn done(&mut self, _row: &AblationRow) {}
}

impl CompareObserver for () {}

pub fn run_comparison(
    variants: &[Variant],
    dataset: &Dataset,
    observer: &mut dyn CompareObserver,
) -> Result<AblationTable> {
    check_variants(variants)?;
    let cfg0 = &variants[0].config;
    let test: Vec<&Sample> = dataset.split(Split::Test).into_iter().map(|(_, s)| s).collect();
    let clean = prepare_eval_set(cfg0, &test, false)?;
    let shifted = match cfg0.eval.shift_px {
        Some(_) => Some(prepare_eval_set(cfg0, &test, true)?),
        None => None,
    };
    // Weights keyed by training fingerprint, so `post` rows reuse the plain
    // detector trained with the same recipe.
    let mut trained: HashMap<String, (String, Model, f64)> = HashMap::new();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let key = v.config.fingerprint();
        let reuse = trained.contains_key(&key);
        observer.start(&v.label, !reuse);
        if !reuse {
            let t0 = Instant::now();
            let mut none = ();
            let obs: &mut dyn TrainObserver = match observer.trainer() {
                Some(o) => o,
                None => &mut none,
            };
            let (model, _) = train(&v.config, dataset, obs)?;
            trained.insert(key.clone(), (v.label.clone(), model, t0.elapsed().as_secs_f64()));
        }
        let (owner, base, train_seconds) = &trained[&key];
        let mut model = base.clone();
        match v.config.model.template {
            TemplateModeName::Post => model.set_rescoring(true)?,
            TemplateModeName::None => model.set_rescoring(false)?,
            _ => {}
        }
        let mut timer = StageTimer::new();
        let t0 = Instant::now();
        let (report, _) = evaluate(&v.config, &model, &clean, &mut timer)?;
        let wall = t0.elapsed().as_secs_f64();
        let map_shifted = match &shifted {
            Some(set) => Some(evaluate(&v.config, &model, set, &mut ())?.0.map),
            None => None,
        };
        let counts = model.detector.parameter_counts(&model.store);
        let shares = timer.shares();
        let stages = counts
            .iter()
            .zip(&shares)
            .map(|(&(stage, parameters), &(_, time_share))| StageCost {
                stage: stage.name(),
                parameters,
                time_share,
            })
            .collect();
        let row = AblationRow {
            label: v.label.clone(),
            setup: describe(&model.detector.config),
            map: report.map,
            map_shifted,
            per_category: report.per_category.iter().map(|c| c.ap).collect(),
            total_parameters: model.store.total_count(),
            stages,
            inference_ms_per_image: 1000.0 * wall / clean.len() as f64,
            train_seconds: *train_seconds,
            reused_weights_of: reuse.then(|| owner.clone()),
        };
        observer.done(&row);
        rows.push(row);
    }
    Ok(AblationTable {
        categories: dataset.categories.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::tests::tiny_setup;

    #[test]
    fn post_reuses_baseline_weights_and_table_has_shift_column() {
        let (cfg, ds) = tiny_setup();
        let mut post = cfg.clone();
        post.model.template = TemplateModeName::Post;
        let variants = vec![
            Variant {
                label: "baseline".into(),
                config: cfg.clone(),
            },
            Variant {
                label: "tr-post".into(),
                config: post,
            },
        ];
        let table = run_comparison(&variants, &ds, &mut ()).unwrap();
        let row = table.row("tr-post").unwrap();
        assert_eq!(row.reused_weights_of.as_deref(), Some("baseline"));
        assert!(table.has_shifted());
        let md = table.to_markdown();
        assert!(md.contains("mAP*") && md.contains("tr-post"), "{md}");
        let shares: f64 = row.stages.iter().map(|s| s.time_share).sum();
        assert!((shares - 1.0).abs() < 1e-9);
        assert_eq!(
            row.total_parameters,
            row.stages.iter().map(|s| s.parameters).sum::<usize>()
        );
        let again = run_comparison(&variants[..1], &ds, &mut ()).unwrap();
        assert_eq!(again.rows[0].map, table.rows[0].map);
    }

    #[test]
    fn mismatched_datasets_are_rejected() {
        let (cfg, _) = tiny_setup();
        let mut other = cfg.clone();
        other.data.manifest = "elsewhere.jsonl".into();
        let err = check_variants(&[
            Variant {
                label: "a".into(),
                config: cfg.clone(),
            },
            Variant {
                label: "b".into(),
                config: other,
            },
        ])
        .unwrap_err();
        assert!(err.to_string().contains("different dataset"));
        assert!(check_variants(&[]).is_err());
    }
}
