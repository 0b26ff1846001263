//! Label-level F1, path-constrained F1 (C-metric) and path-level F1 with the
//! inconsistency penalty (P-metric).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{Hierarchy, HierarchyError, NodeId, PathId};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no prediction records to evaluate")]
    Empty,
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    pub id: String,
    pub gold: BTreeSet<NodeId>,
    pub pred: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Tally {
    tp: usize,
    pred: usize,
    gold: usize,
}

fn f1(tp: usize, pred: usize, gold: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / pred as f64;
    let recall = tp as f64 / gold as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Micro F1 over pooled counts and macro F1 averaged over every key that
/// occurs in gold or predictions.
fn micro_macro<K: Ord>(tallies: &BTreeMap<K, Tally>) -> (f64, f64) {
    let (tp, pred, gold) = tallies
        .values()
        .fold((0, 0, 0), |(a, b, c), t| (a + t.tp, b + t.pred, c + t.gold));
    let micro = f1(tp, pred, gold);
    let macro_ = if tallies.is_empty() {
        0.0
    } else {
        tallies.values().map(|t| f1(t.tp, t.pred, t.gold)).sum::<f64>() / tallies.len() as f64
    };
    (micro, macro_)
}

/// Per-label tallies; `valid` decides whether a predicted gold label counts.
fn label_tallies(
    records: &[PredictionRecord],
    mut valid: impl FnMut(&PredictionRecord, NodeId) -> Result<bool, MetricError>,
) -> Result<BTreeMap<NodeId, Tally>, MetricError> {
    let mut tallies: BTreeMap<NodeId, Tally> = BTreeMap::new();
    for r in records {
        for &g in &r.gold {
            tallies.entry(g).or_default().gold += 1;
        }
        for &p in &r.pred {
            let t = tallies.entry(p).or_default();
            t.pred += 1;
            if r.gold.contains(&p) && valid(r, p)? {
                t.tp += 1;
            }
        }
    }
    Ok(tallies)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub depth: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

fn check_ids(records: &[PredictionRecord], h: &Hierarchy) -> Result<(), MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    for r in records {
        for id in r.gold.iter().chain(&r.pred) {
            h.node(*id)?;
        }
    }
    Ok(())
}

/// Plain multi-label micro/macro F1 and the per-depth breakdown.
pub fn micro_macro_f1(records: &[PredictionRecord], h: &Hierarchy) -> Result<(f64, f64, Vec<LayerScore>), MetricError> {
    check_ids(records, h)?;
    let tallies = label_tallies(records, |_, _| Ok(true))?;
    let (micro, macro_) = micro_macro(&tallies);
    let per_layer = (1..=h.depth())
        .map(|depth| {
            let layer: BTreeMap<NodeId, Tally> = tallies
                .iter()
                .filter(|(id, _)| h.nodes()[id.0].depth == depth)
                .map(|(k, v)| (*k, *v))
                .collect();
            let (micro_f1, macro_f1) = micro_macro(&layer);
            LayerScore {
                depth,
                micro_f1,
                macro_f1,
            }
        })
        .collect();
    Ok((micro, macro_, per_layer))
}

/// A predicted label is a true positive only when it is gold and every one of
/// its ancestors is both predicted and gold.
pub fn constrained_f1(records: &[PredictionRecord], h: &Hierarchy) -> Result<(f64, f64), MetricError> {
    check_ids(records, h)?;
    let tallies = label_tallies(records, |r, label| {
        Ok(h
            .ancestors(label)?
            .iter()
            .all(|a| r.pred.contains(a) && r.gold.contains(a)))
    })?;
    Ok(micro_macro(&tallies))
}

/// `1 - 2 (sigmoid(a) - 0.5)` with `a = invalid / gold`; 1 when there is no gold.
/// Evaluated as `2 sigmoid(-a)`, which stays positive where the literal form
/// cancels to 0.
pub fn gamma(count_invalid: usize, count_gold: usize) -> f64 {
    if count_gold == 0 {
        return 1.0;
    }
    let a = count_invalid as f64 / count_gold as f64;
    2.0 / (1.0 + a.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathScores {
    pub pmicro_f1: f64,
    pub pmacro_f1: f64,
    pub raw_path_micro_f1: f64,
    pub raw_path_macro_f1: f64,
    pub count_invalid: usize,
    pub count_gold: usize,
    pub gamma: f64,
}

/// F1 over whole path ids, scaled by the inconsistency penalty.
pub fn path_metric(records: &[PredictionRecord], h: &Hierarchy) -> Result<PathScores, MetricError> {
    check_ids(records, h)?;
    let mut tallies: BTreeMap<PathId, Tally> = BTreeMap::new();
    let mut count_gold = 0;
    let mut count_invalid = 0;
    for r in records {
        let (gold_paths, _) = h.labels_to_paths(&r.gold)?;
        let (pred_paths, invalid) = h.labels_to_paths(&r.pred)?;
        count_gold += r.gold.len();
        count_invalid += invalid.len();
        for p in &gold_paths {
            tallies.entry(*p).or_default().gold += 1;
        }
        for p in &pred_paths {
            let t = tallies.entry(*p).or_default();
            t.pred += 1;
            if gold_paths.contains(p) {
                t.tp += 1;
            }
        }
    }
    let (raw_micro, raw_macro) = micro_macro(&tallies);
    let g = gamma(count_invalid, count_gold);
    Ok(PathScores {
        pmicro_f1: g * raw_micro,
        pmacro_f1: g * raw_macro,
        raw_path_micro_f1: raw_micro,
        raw_path_macro_f1: raw_macro,
        count_invalid,
        count_gold,
        gamma: g,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub cmicro_f1: f64,
    pub cmacro_f1: f64,
    pub pmicro_f1: f64,
    pub pmacro_f1: f64,
    pub raw_path_micro_f1: f64,
    pub raw_path_macro_f1: f64,
    pub count_gold: usize,
    pub count_invalid: usize,
    pub gamma: f64,
    pub documents: usize,
    pub per_layer: Vec<LayerScore>,
}

pub fn evaluate(records: &[PredictionRecord], h: &Hierarchy) -> Result<EvalReport, MetricError> {
    let (micro_f1, macro_f1, per_layer) = micro_macro_f1(records, h)?;
    let (cmicro_f1, cmacro_f1) = constrained_f1(records, h)?;
    let p = path_metric(records, h)?;
    Ok(EvalReport {
        micro_f1,
        macro_f1,
        cmicro_f1,
        cmacro_f1,
        pmicro_f1: p.pmicro_f1,
        pmacro_f1: p.pmacro_f1,
        raw_path_micro_f1: p.raw_path_micro_f1,
        raw_path_macro_f1: p.raw_path_macro_f1,
        count_gold: p.count_gold,
        count_invalid: p.count_invalid,
        gamma: p.gamma,
        documents: records.len(),
        per_layer,
    })
}
