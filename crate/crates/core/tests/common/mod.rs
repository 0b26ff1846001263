//! Random instances and brute-force oracles shared by the property and
//! acceptance suites. The oracles work from a raw parent array and never call
//! into the library's own tree or metric code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hierverb::hierarchy::{Hierarchy, NodeId};
use hierverb::metrics::PredictionRecord;
use hierverb::sampler::Document;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A tree as `parent[i]` over nodes named `n{i}`.
#[derive(Debug, Clone)]
pub struct RawTree {
    pub parent: Vec<Option<usize>>,
}

impl RawTree {
    /// Each raw choice picks a parent among the root and earlier nodes shallower than `max_depth`.
    pub fn from_choices(choices: &[u32], max_depth: usize) -> Self {
        let mut parent: Vec<Option<usize>> = Vec::new();
        let mut depth: Vec<usize> = Vec::new();
        for &c in choices {
            let mut candidates: Vec<Option<usize>> = vec![None];
            candidates.extend((0..parent.len()).filter(|&j| depth[j] < max_depth).map(Some));
            let p = candidates[c as usize % candidates.len()];
            depth.push(p.map_or(1, |j| depth[j] + 1));
            parent.push(p);
        }
        Self { parent }
    }

    pub fn random(rng: &mut ChaCha8Rng, max_nodes: usize, max_depth: usize) -> Self {
        let n = rng.gen_range(1..=max_nodes);
        let choices: Vec<u32> = (0..n).map(|_| rng.gen()).collect();
        Self::from_choices(&choices, max_depth)
    }

    pub fn name(i: usize) -> String {
        format!("n{i}")
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn hierarchy(&self) -> Hierarchy {
        let edges: Vec<(Option<String>, String)> = self
            .parent
            .iter()
            .enumerate()
            .map(|(i, p)| (p.map(Self::name), Self::name(i)))
            .collect();
        Hierarchy::from_edges(&edges).expect("raw tree is valid")
    }

    pub fn depth_of(&self, mut i: usize) -> usize {
        let mut d = 1;
        while let Some(p) = self.parent[i] {
            i = p;
            d += 1;
        }
        d
    }

    pub fn ancestors(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.parent[i];
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent[p];
        }
        out
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        !self.parent.contains(&Some(i))
    }

    /// Every root-to-leaf path as a node set.
    pub fn paths(&self) -> Vec<BTreeSet<usize>> {
        (0..self.len())
            .filter(|&i| self.is_leaf(i))
            .map(|i| {
                let mut s: BTreeSet<usize> = self.ancestors(i).into_iter().collect();
                s.insert(i);
                s
            })
            .collect()
    }

    pub fn ids(&self, h: &Hierarchy, nodes: &BTreeSet<usize>) -> BTreeSet<NodeId> {
        nodes.iter().map(|&i| h.id_of(&Self::name(i)).unwrap()).collect()
    }

    pub fn raw(&self, h: &Hierarchy, ids: &BTreeSet<NodeId>) -> BTreeSet<usize> {
        ids.iter().map(|id| h.name(*id)[1..].parse().unwrap()).collect()
    }
}

/// Gold is one or two random complete paths; prediction is an arbitrary node subset.
pub fn random_records(rng: &mut ChaCha8Rng, tree: &RawTree, h: &Hierarchy, max_docs: usize) -> Vec<PredictionRecord> {
    let paths = tree.paths();
    let docs = rng.gen_range(1..=max_docs);
    (0..docs)
        .map(|d| {
            let mut gold = BTreeSet::new();
            for _ in 0..rng.gen_range(1..=2) {
                gold.extend(paths[rng.gen_range(0..paths.len())].iter().copied());
            }
            let pred: BTreeSet<usize> = match rng.gen_range(0..4) {
                0 => gold.clone(),
                1 => paths[rng.gen_range(0..paths.len())].clone(),
                _ => (0..tree.len()).filter(|_| rng.gen_bool(0.4)).collect(),
            };
            PredictionRecord {
                id: format!("d{d}"),
                gold: tree.ids(h, &gold),
                pred: tree.ids(h, &pred),
            }
        })
        .collect()
}

/// `2 tp / (2 tp + fp + fn)`, 0 when there is nothing to score.
fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn micro_macro(conf: &BTreeMap<usize, Confusion>) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut scored = Vec::new();
    for c in conf.values() {
        tp += c.tp;
        fp += c.fp;
        fn_ += c.fn_;
        if c.tp + c.fp + c.fn_ > 0 {
            scored.push(f1(c.tp, c.fp, c.fn_));
        }
    }
    let macro_ = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    (f1(tp, fp, fn_), macro_)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleScores {
    pub micro: f64,
    pub macro_: f64,
    pub per_layer: Vec<(f64, f64)>,
    pub cmicro: f64,
    pub cmacro: f64,
    pub raw_path_micro: f64,
    pub raw_path_macro: f64,
    pub count_gold: usize,
    pub count_invalid: usize,
    pub gamma: f64,
    pub pmicro: f64,
    pub pmacro: f64,
}

/// `1 - 2 (sigmoid(a) - 0.5)` written as `1 - tanh(a / 2)`.
pub fn gamma_oracle(invalid: usize, gold: usize) -> f64 {
    if gold == 0 {
        1.0
    } else {
        1.0 - (invalid as f64 / gold as f64 / 2.0).tanh()
    }
}

/// Exhaustive per-node and per-path confusion counts.
pub fn oracle_scores(tree: &RawTree, h: &Hierarchy, records: &[PredictionRecord]) -> OracleScores {
    let docs: Vec<(BTreeSet<usize>, BTreeSet<usize>)> =
        records.iter().map(|r| (tree.raw(h, &r.gold), tree.raw(h, &r.pred))).collect();
    let max_depth = (0..tree.len()).map(|i| tree.depth_of(i)).max().unwrap_or(0);

    let mut plain: BTreeMap<usize, Confusion> = BTreeMap::new();
    let mut constrained: BTreeMap<usize, Confusion> = BTreeMap::new();
    for node in 0..tree.len() {
        let (mut p, mut c) = (Confusion::default(), Confusion::default());
        for (gold, pred) in &docs {
            let g = gold.contains(&node);
            let q = pred.contains(&node);
            let ancestors_ok = tree.ancestors(node).iter().all(|a| gold.contains(a) && pred.contains(a));
            match (g, q) {
                (true, true) => {
                    p.tp += 1;
                    if ancestors_ok {
                        c.tp += 1;
                    } else {
                        c.fp += 1;
                        c.fn_ += 1;
                    }
                }
                (false, true) => {
                    p.fp += 1;
                    c.fp += 1;
                }
                (true, false) => {
                    p.fn_ += 1;
                    c.fn_ += 1;
                }
                (false, false) => {}
            }
        }
        plain.insert(node, p);
        constrained.insert(node, c);
    }
    let (micro, macro_) = micro_macro(&plain);
    let (cmicro, cmacro) = micro_macro(&constrained);
    let per_layer = (1..=max_depth)
        .map(|d| {
            let layer: BTreeMap<usize, Confusion> = plain
                .iter()
                .filter(|(n, _)| tree.depth_of(**n) == d)
                .map(|(n, c)| (*n, *c))
                .collect();
            micro_macro(&layer)
        })
        .collect();

    let paths = tree.paths();
    let mut path_conf: BTreeMap<usize, Confusion> = BTreeMap::new();
    let (mut count_gold, mut count_invalid) = (0, 0);
    for (gold, pred) in &docs {
        count_gold += gold.len();
        let mut covered = BTreeSet::new();
        for (i, path) in paths.iter().enumerate() {
            let g = path.is_subset(gold);
            let q = path.is_subset(pred);
            if q {
                covered.extend(path.iter().copied());
            }
            let c = path_conf.entry(i).or_default();
            match (g, q) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        count_invalid += pred.difference(&covered).count();
    }
    let (raw_path_micro, raw_path_macro) = micro_macro(&path_conf);
    let gamma = gamma_oracle(count_invalid, count_gold);
    OracleScores {
        micro,
        macro_,
        per_layer,
        cmicro,
        cmacro,
        raw_path_micro,
        raw_path_macro,
        count_gold,
        count_invalid,
        gamma,
        pmicro: gamma * raw_path_micro,
        pmacro: gamma * raw_path_macro,
    }
}

/// Compares every report field against the oracle; returns the first mismatch.
pub fn check_report(tree: &RawTree, h: &Hierarchy, records: &[PredictionRecord]) -> Result<(), String> {
    let o = oracle_scores(tree, h, records);
    let r = hierverb::metrics::evaluate(records, h).map_err(|e| e.to_string())?;
    let close = |name: &str, a: f64, b: f64| {
        if (a - b).abs() <= 1e-12 {
            Ok(())
        } else {
            Err(format!("{name}: library {a} oracle {b}"))
        }
    };
    close("micro", r.micro_f1, o.micro)?;
    close("macro", r.macro_f1, o.macro_)?;
    close("cmicro", r.cmicro_f1, o.cmicro)?;
    close("cmacro", r.cmacro_f1, o.cmacro)?;
    close("raw path micro", r.raw_path_micro_f1, o.raw_path_micro)?;
    close("raw path macro", r.raw_path_macro_f1, o.raw_path_macro)?;
    close("pmicro", r.pmicro_f1, o.pmicro)?;
    close("pmacro", r.pmacro_f1, o.pmacro)?;
    close("gamma", r.gamma, o.gamma)?;
    if (r.count_gold, r.count_invalid) != (o.count_gold, o.count_invalid) {
        return Err(format!(
            "counts: library ({}, {}) oracle ({}, {})",
            r.count_gold, r.count_invalid, o.count_gold, o.count_invalid
        ));
    }
    if r.per_layer.len() != o.per_layer.len() {
        return Err("per-layer length".into());
    }
    for (l, (mi, ma)) in r.per_layer.iter().zip(&o.per_layer) {
        close("layer micro", l.micro_f1, *mi)?;
        close("layer macro", l.macro_f1, *ma)?;
    }
    Ok(())
}

/// Documents over random paths of `tree`; single-path documents only when `single_path`.
pub fn random_dataset(rng: &mut ChaCha8Rng, tree: &RawTree, h: &Hierarchy, docs: usize, single_path: bool) -> Vec<Document> {
    let paths = tree.paths();
    (0..docs)
        .map(|i| {
            let mut labels = paths[rng.gen_range(0..paths.len())].clone();
            if !single_path && rng.gen_bool(0.3) {
                labels.extend(paths[rng.gen_range(0..paths.len())].iter().copied());
            }
            Document::new(h, format!("doc{i}"), format!("text {i}"), tree.ids(h, &labels)).unwrap()
        })
        .collect()
}

/// Naive fixpoint: drop every path seen in fewer than `k` kept documents,
/// drop documents touching a dropped path, repeat.
pub fn filter_oracle(dataset: &[Document], k: usize) -> Vec<String> {
    let mut kept: Vec<&Document> = dataset.iter().collect();
    loop {
        let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
        for d in &kept {
            for p in &d.paths {
                *freq.entry(p.0).or_default() += 1;
            }
        }
        let next: Vec<&Document> = kept
            .iter()
            .copied()
            .filter(|d| d.paths.iter().all(|p| freq[&p.0] >= k))
            .collect();
        if next.len() == kept.len() {
            return kept.iter().map(|d| d.id.clone()).collect();
        }
        kept = next;
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contrastive loss as printed: `-(1/(N^2 D^2)) sum_d sum_{u<=d} sum_n
/// [sum_n' S M_u - sum_n' S] 2^{-(D-d) alpha}` over 2N views with cosine S.
pub fn fhc_oracle(views: &[Vec<Vec<f64>>], labels: &[Vec<BTreeSet<usize>>], alpha: f64, include_self: bool) -> f64 {
    let total = views.len();
    let n = (total / 2) as f64;
    let depth = views[0].len();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut acc = 0.0;
    for d in 1..=depth {
        let w = 2f64.powf(-((depth - d) as f64) * alpha);
        for u in 1..=d {
            for a in 0..total {
                let (mut masked, mut all) = (0.0, 0.0);
                for b in 0..total {
                    if a == b && !include_self {
                        continue;
                    }
                    let s = cos(&views[a][u - 1], &views[b][u - 1]);
                    all += s;
                    if !labels[a][u - 1].is_disjoint(&labels[b][u - 1]) {
                        masked += s;
                    }
                }
                acc += (masked - all) * w;
            }
        }
    }
    -acc / (n * n * (depth * depth) as f64)
}

/// Propagated probabilities for a tree from `synth::build_tree`, where a
/// child's name is its parent's name plus `-i`.
pub fn hcc_oracle(h: &Hierarchy, p: &[Vec<f64>], beta: f64, recursive: bool) -> Vec<Vec<f64>> {
    let depth = p.len();
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); depth];
    out[depth - 1] = p[depth - 1].clone();
    for d in (0..depth - 1).rev() {
        let parents = h.layer(d + 1);
        let kids = h.layer(d + 2);
        out[d] = parents
            .iter()
            .enumerate()
            .map(|(j, &pid)| {
                let prefix = format!("{}-", h.name(pid));
                let below: f64 = kids
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| {
                        let name = h.name(c);
                        name.starts_with(&prefix) && !name[prefix.len()..].contains('-')
                    })
                    .map(|(i, _)| if recursive { out[d + 1][i] } else { p[d + 1][i] })
                    .sum();
                (1.0 - beta) * p[d][j] + beta * below
            })
            .collect();
    }
    out.truncate(depth - 1);
    out
}
