//! Wall-clock accounting of inference stages.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use refdet_core::detector::{Profiler, Stage};

/// Sums the time spent inside each [`Stage`] across many calls.
#[derive(Debug, Default, Clone)]
pub struct StageTimer {
    totals: BTreeMap<Stage, Duration>,
    open: Option<(Stage, Instant)>,
}

impl StageTimer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self, stage: Stage) -> Duration {
        self.totals.get(&stage).copied().unwrap_or_default()
    }

    pub fn sum(&self) -> Duration {
        self.totals.values().sum()
    }

    /// Fraction of the summed stage time spent in each stage.
    pub fn shares(&self) -> Vec<(Stage, f64)> {
        let sum = self.sum().as_secs_f64();
        Stage::ALL
            .iter()
            .map(|&s| {
                (
                    s,
                    if sum > 0.0 {
                        self.total(s).as_secs_f64() / sum
                    } else {
                        0.0
                    },
                )
            })
            .collect()
    }
}

impl Profiler for StageTimer {
    fn enter(&mut self, stage: Stage) {
        debug_assert!(self.open.is_none(), "stages never nest");
        self.open = Some((stage, Instant::now()));
    }

    fn exit(&mut self, stage: Stage) {
        if let Some((s, t0)) = self.open.take() {
            debug_assert_eq!(s, stage);
            *self.totals.entry(s).or_default() += t0.elapsed();
        }
    }
}
