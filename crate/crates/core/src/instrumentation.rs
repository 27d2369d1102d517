//! Exact propagation accounting.
//!
//! The cost claims of the decoupled trainers are stated in whole forward and
//! backward propagations per minibatch. This module turns those claims into
//! integers: every sweep through the network increments a counter, and
//! [`count_report`] checks the observed totals against the closed forms each
//! training method must satisfy.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::training::{Method, TrainConfig};

/// Counts of whole-network and first-layer-only propagations.
///
/// Counting granularity is one increment per minibatch pass, independent of
/// batch size. The full and first-layer categories are disjoint: a full
/// forward through a network with a first-layer split does not touch the
/// first-layer counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PropCounter {
    pub full_forward: u64,
    pub full_backward: u64,
    pub first_layer_forward: u64,
    pub first_layer_backward: u64,
    /// Wall-clock milliseconds per named phase. Excluded from determinism
    /// guarantees.
    pub wall_ms: BTreeMap<String, f64>,
    #[serde(skip)]
    minibatch_mark: [u64; 4],
}

impl PropCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_full_forward(&mut self) {
        self.full_forward += 1;
    }

    pub fn record_full_backward(&mut self) {
        self.full_backward += 1;
    }

    pub fn record_first_layer_forward(&mut self) {
        self.first_layer_forward += 1;
    }

    pub fn record_first_layer_backward(&mut self) {
        self.first_layer_backward += 1;
    }

    pub fn add_wall_ms(&mut self, phase: &str, ms: f64) {
        *self.wall_ms.entry(phase.to_string()).or_insert(0.0) += ms;
    }

    /// Marks the start of a minibatch so [`Self::minibatch_counts`] can report
    /// the per-minibatch delta.
    pub fn begin_minibatch(&mut self) {
        self.minibatch_mark = [
            self.full_forward,
            self.full_backward,
            self.first_layer_forward,
            self.first_layer_backward,
        ];
    }

    /// Counts accumulated since the last [`Self::begin_minibatch`], in the
    /// order full-forward, full-backward, first-forward, first-backward.
    pub fn minibatch_counts(&self) -> [u64; 4] {
        [
            self.full_forward - self.minibatch_mark[0],
            self.full_backward - self.minibatch_mark[1],
            self.first_layer_forward - self.minibatch_mark[2],
            self.first_layer_backward - self.minibatch_mark[3],
        ]
    }

    /// Immutable snapshot for reporting.
    pub fn snapshot(&self) -> PropCounter {
        self.clone()
    }
}

/// Times a closure and charges it to a phase.
pub fn timed<T>(counter: &mut PropCounter, phase: &str, f: impl FnOnce(&mut PropCounter) -> T) -> T {
    let start = Instant::now();
    let out = f(counter);
    counter.add_wall_ms(phase, start.elapsed().as_secs_f64() * 1e3);
    out
}

/// Expected counts per minibatch for one training method.
///
/// The decoupled (slack-variable) trainers pay one extra full pass over the
/// headline round count: the pass that primes the first slack variable.
pub fn expected_per_minibatch(config: &TrainConfig) -> [u64; 4] {
    match config.method {
        Method::Natural => [1, 1, 0, 0],
        Method::Pgd | Method::Trades => {
            let r = config.r.unwrap_or(0) as u64;
            [r + 1, r + 1, 0, 0]
        }
        Method::Yopo | Method::TradesYopo => {
            let m = config.m.unwrap_or(1) as u64;
            let n = config.n.unwrap_or(1) as u64;
            [m + 1, m + 1, m * n, m * n]
        }
        Method::Free => {
            let m = config.m.unwrap_or(1) as u64;
            [m + 1, m + 1, m, m]
        }
    }
}

/// One audited counter category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountAuditEntry {
    pub category: String,
    pub expected: u64,
    pub observed: u64,
    pub pass: bool,
}

/// Result of checking observed propagation counts against the closed forms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountAudit {
    pub method: Method,
    pub minibatches: u64,
    pub entries: Vec<CountAuditEntry>,
    pub all_pass: bool,
}

/// Compares a completed run's counters with the per-method closed forms.
pub fn count_report(counter: &PropCounter, config: &TrainConfig, minibatches: u64) -> CountAudit {
    let per_mb = expected_per_minibatch(config);
    let observed = [
        counter.full_forward,
        counter.full_backward,
        counter.first_layer_forward,
        counter.first_layer_backward,
    ];
    let names = [
        "full_forward",
        "full_backward",
        "first_layer_forward",
        "first_layer_backward",
    ];
    let entries: Vec<CountAuditEntry> = names
        .iter()
        .zip(per_mb.iter().zip(observed.iter()))
        .map(|(name, (&per, &obs))| {
            let expected = per * minibatches;
            CountAuditEntry {
                category: name.to_string(),
                expected,
                observed: obs,
                pass: expected == obs,
            }
        })
        .collect();
    let all_pass = entries.iter().all(|e| e.pass);
    CountAudit {
        method: config.method,
        minibatches,
        entries,
        all_pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_for(method: Method) -> TrainConfig {
        let mut c = TrainConfig::new(method);
        c.r = Some(5);
        c.m = Some(5);
        c.n = Some(3);
        c
    }

    #[test]
    fn natural_expects_one_full_pass() {
        let mut counter = PropCounter::new();
        for _ in 0..10 {
            counter.record_full_forward();
            counter.record_full_backward();
        }
        let audit = count_report(&counter, &TrainConfig::new(Method::Natural), 10);
        assert!(audit.all_pass);
    }

    #[test]
    fn pgd_expects_r_plus_one() {
        let cfg = config_for(Method::Pgd);
        assert_eq!(expected_per_minibatch(&cfg), [6, 6, 0, 0]);
        let mut counter = PropCounter::new();
        counter.full_forward = 60;
        counter.full_backward = 60;
        let audit = count_report(&counter, &cfg, 10);
        assert!(audit.all_pass);
    }

    #[test]
    fn yopo_expects_m_plus_one_and_mn() {
        let cfg = config_for(Method::Yopo);
        assert_eq!(expected_per_minibatch(&cfg), [6, 6, 15, 15]);
        let mut counter = PropCounter::new();
        counter.full_forward = 60;
        counter.full_backward = 60;
        counter.first_layer_forward = 150;
        counter.first_layer_backward = 150;
        let audit = count_report(&counter, &cfg, 10);
        assert!(audit.all_pass, "{audit:?}");
    }

    #[test]
    fn mismatch_is_flagged_per_category() {
        let cfg = config_for(Method::Pgd);
        let mut counter = PropCounter::new();
        counter.full_forward = 60;
        counter.full_backward = 59;
        let audit = count_report(&counter, &cfg, 10);
        assert!(!audit.all_pass);
        assert!(audit.entries[0].pass);
        assert!(!audit.entries[1].pass);
    }

    #[test]
    fn minibatch_delta_tracks_marks() {
        let mut counter = PropCounter::new();
        counter.record_full_forward();
        counter.begin_minibatch();
        counter.record_full_forward();
        counter.record_first_layer_backward();
        assert_eq!(counter.minibatch_counts(), [1, 0, 0, 1]);
    }
}
