//! Run directories.
//!
//! ```text
//! <run>/
//!   config.resolved      resolved TOML, with seed, fingerprint and code version
//!   metrics.log          one JSON object per line
//!   checkpoints/         epoch_<n>.ckpt and final.ckpt
//!   report/              evaluation reports and detection exports
//!   .lock                present while a process owns the directory
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::pipeline::{evaluate, prepare_eval_set, EpochLog, IterationLog, Model, TrainObserver};

/// Hash of the sources this binary was built from.
pub const CODE_VERSION: &str = env!("REFDET_CODE_HASH");

pub const CONFIG_FILE: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.log";
const LOCK_FILE: &str = ".lock";

/// An exclusively owned run directory; the lock is released on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// Creates (or reuses) `root` and takes its lock.
    pub fn open(root: &Path) -> Result<Self> {
        for d in [root.to_path_buf(), root.join("checkpoints"), root.join("report")] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Locked {
                    path: root.to_path_buf(),
                    lock,
                })
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        Ok(Self {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        let path = self.root.join(CONFIG_FILE);
        let text = format!(
            "# fingerprint = \"{}\"\n# code_version = \"{}\"\n{}",
            cfg.fingerprint(),
            CODE_VERSION,
            cfg.to_toml()
        );
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn metrics(&self) -> Result<MetricsLog> {
        MetricsLog::create(&self.root.join(METRICS_FILE))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Line-structured metrics: every line is a JSON object with a `kind`.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write(&mut self, value: serde_json::Value) -> Result<()> {
        writeln!(self.out, "{value}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn checkpoint_meta(cfg: &ExperimentConfig, epoch: usize, iteration: usize) -> CheckpointMeta {
    CheckpointMeta {
        fingerprint: cfg.fingerprint(),
        config: cfg.to_toml(),
        code_version: CODE_VERSION.into(),
        epoch,
        iteration,
    }
}

/// Streams training progress into a run directory: every iteration to the
/// metrics log, periodic checkpoints, and optional per-epoch test mAP.
pub struct RunObserver<'a> {
    pub run: &'a RunDir,
    pub cfg: &'a ExperimentConfig,
    pub metrics: MetricsLog,
    /// Test split used for per-epoch evaluation, already prepared.
    pub test: Option<Vec<refdet_core::data::Sample>>,
    pub quiet: bool,
}

impl<'a> RunObserver<'a> {
    pub fn new(run: &'a RunDir, cfg: &'a ExperimentConfig, test: &[&refdet_core::data::Sample]) -> Result<Self> {
        let test = if cfg.train.eval_each_epoch && !test.is_empty() {
            Some(prepare_eval_set(cfg, test, false)?)
        } else {
            None
        };
        Ok(Self {
            run,
            cfg,
            metrics: run.metrics()?,
            test,
            quiet: false,
        })
    }
}

impl TrainObserver for RunObserver<'_> {
    fn iteration(&mut self, log: &IterationLog) -> Result<()> {
        let l = &log.losses;
        self.metrics.write(json!({
            "kind": "iter",
            "iter": log.iteration,
            "epoch": log.epoch,
            "lr": log.lr,
            "rpn_cls": l.rpn_cls,
            "rpn_reg": l.rpn_reg,
            "roi_cls": l.roi_cls,
            "roi_reg": l.roi_reg,
            "ptg": l.ptg,
            "total": l.total,
            "grad_norm": log.grad_norm,
        }))
    }

    fn epoch_end(&mut self, log: &EpochLog, model: &Model) -> Result<()> {
        let mut record = json!({
            "kind": "epoch",
            "epoch": log.epoch,
            "iterations": log.iterations,
            "mean_loss": log.mean_loss,
            "elapsed_s": log.elapsed.as_secs_f64(),
        });
        if let Some(test) = &self.test {
            let (report, _) = evaluate(self.cfg, model, test, &mut ())?;
            record["test_map"] = json!(report.map);
        }
        let every = self.cfg.train.checkpoint_every_epochs;
        if every > 0 && log.epoch.is_multiple_of(every) {
            let meta = checkpoint_meta(self.cfg, log.epoch, log.iterations);
            Checkpoint::from_store(meta, &model.store)
                .save(&self.run.checkpoint_path(&format!("epoch_{:03}.ckpt", log.epoch)))?;
        }
        if !self.quiet {
            eprintln!(
                "epoch {:>3}  iter {:>6}  loss {:.4}{}  {:.1}s",
                log.epoch,
                log.iterations,
                log.mean_loss,
                record.get("test_map").map_or(String::new(), |m| format!(
                    "  test mAP {:.4}",
                    m.as_f64().unwrap_or(0.0)
                )),
                log.elapsed.as_secs_f64()
            );
        }
        self.metrics.write(record)?;
        self.metrics.flush()
    }
}
