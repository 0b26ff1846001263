//! Path-based K-shot support-set sampling.
//!
//! Two stages: rare label paths (fewer than K documents) are pruned together
//! with every document that carries them, repeated to a fixpoint; then paths
//! are visited from the rarest single-path frequency upwards and documents are
//! drawn without replacement until each path is covered K times.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{Hierarchy, HierarchyError, NodeId, PathId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("no label path has at least {k} documents; nothing survives filtering")]
    EmptyAfterFilter { k: usize },
    #[error("candidate pool for path {path} exhausted at {count}/{k} documents")]
    Exhausted { path: usize, count: usize, k: usize },
    #[error("document `{id}` is not path-consistent: labels {labels:?} leave {invalid:?} outside any complete path")]
    Inconsistent {
        id: String,
        labels: Vec<String>,
        invalid: Vec<String>,
    },
    #[error("document `{0}` has no labels")]
    Unlabeled(String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub labels: BTreeSet<NodeId>,
    pub paths: BTreeSet<PathId>,
}

impl Document {
    /// Builds a document and derives its golden paths. Fails unless the labels
    /// are exactly the union of one or more complete root-to-leaf paths.
    pub fn new(
        h: &Hierarchy,
        id: impl Into<String>,
        text: impl Into<String>,
        labels: BTreeSet<NodeId>,
    ) -> Result<Self, SampleError> {
        let id = id.into();
        if labels.is_empty() {
            return Err(SampleError::Unlabeled(id));
        }
        let (paths, invalid) = h.labels_to_paths(&labels)?;
        if !invalid.is_empty() || paths.is_empty() {
            return Err(SampleError::Inconsistent {
                id,
                labels: labels.iter().map(|l| h.name(*l).to_string()).collect(),
                invalid: invalid.iter().map(|l| h.name(*l).to_string()).collect(),
            });
        }
        Ok(Self {
            id,
            text: text.into(),
            labels,
            paths,
        })
    }

    pub fn from_names<S: AsRef<str>>(
        h: &Hierarchy,
        id: impl Into<String>,
        text: impl Into<String>,
        names: &[S],
    ) -> Result<Self, SampleError> {
        let labels = names
            .iter()
            .map(|n| h.id_of(n.as_ref()))
            .collect::<Result<BTreeSet<_>, _>>()?;
        Self::new(h, id, text, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathOrder {
    /// Rarest individual frequency first.
    #[default]
    Asc,
    Desc,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSet {
    pub documents: Vec<Document>,
    pub counts: BTreeMap<PathId, usize>,
    pub k: usize,
    pub seed: u64,
    pub order: PathOrder,
}

fn path_frequency(dataset: &[Document]) -> BTreeMap<PathId, usize> {
    let mut freq = BTreeMap::new();
    for doc in dataset {
        for p in &doc.paths {
            *freq.entry(*p).or_insert(0) += 1;
        }
    }
    freq
}

/// Prunes paths with fewer than `k` documents (and the documents carrying
/// them) until nothing changes. Returns the surviving dataset and path set.
pub fn filter_rare_paths(
    dataset: &[Document],
    k: usize,
    h: &Hierarchy,
) -> Result<(Vec<Document>, Vec<PathId>), SampleError> {
    let mut kept: Vec<Document> = dataset.to_vec();
    let mut paths: BTreeSet<PathId> = h.leaf_paths().iter().map(|p| p.id).collect();
    loop {
        let before = paths.len();
        let freq = path_frequency(&kept);
        let removed: BTreeSet<PathId> = paths
            .iter()
            .filter(|p| freq.get(p).copied().unwrap_or(0) < k)
            .copied()
            .collect();
        paths.retain(|p| !removed.contains(p));
        kept.retain(|d| d.paths.iter().all(|p| paths.contains(p)));
        if paths.len() == before {
            break;
        }
    }
    if paths.is_empty() {
        return Err(SampleError::EmptyAfterFilter { k });
    }
    Ok((kept, paths.into_iter().collect()))
}

/// Number of documents whose path set is exactly `{p}`, for every `p` in `paths`.
pub fn individual_frequency(dataset: &[Document], paths: &[PathId]) -> BTreeMap<PathId, usize> {
    let mut freq: BTreeMap<PathId, usize> = paths.iter().map(|p| (*p, 0)).collect();
    for doc in dataset {
        if doc.paths.len() == 1 {
            let p = doc.paths.iter().next().unwrap();
            if let Some(c) = freq.get_mut(p) {
                *c += 1;
            }
        }
    }
    freq
}

/// Greedy K-shot sampling over an already filtered dataset.
pub fn greedy_sample(
    dataset: &[Document],
    paths: &[PathId],
    k: usize,
    seed: u64,
    order: PathOrder,
) -> Result<SupportSet, SampleError> {
    let individual = individual_frequency(dataset, paths);
    let mut visit: Vec<PathId> = paths.to_vec();
    visit.sort_by(|a, b| {
        let by_freq = individual[a].cmp(&individual[b]);
        let by_freq = match order {
            PathOrder::Asc => by_freq,
            PathOrder::Desc => by_freq.reverse(),
        };
        by_freq.then_with(|| a.cmp(b))
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: BTreeMap<PathId, usize> = paths.iter().map(|p| (*p, 0)).collect();
    let mut taken = vec![false; dataset.len()];
    let mut documents = Vec::new();
    for path in visit {
        while counts[&path] < k {
            let candidates: Vec<usize> = dataset
                .iter()
                .enumerate()
                .filter(|(i, d)| !taken[*i] && d.paths.contains(&path))
                .map(|(i, _)| i)
                .collect();
            if candidates.is_empty() {
                return Err(SampleError::Exhausted {
                    path: path.0,
                    count: counts[&path],
                    k,
                });
            }
            let pick = candidates[rng.gen_range(0..candidates.len())];
            taken[pick] = true;
            let doc = &dataset[pick];
            for p in &doc.paths {
                if let Some(c) = counts.get_mut(p) {
                    *c += 1;
                }
            }
            documents.push(doc.clone());
        }
    }
    Ok(SupportSet {
        documents,
        counts,
        k,
        seed,
        order,
    })
}

/// Filters then samples.
pub fn sample_support(
    dataset: &[Document],
    k: usize,
    seed: u64,
    order: PathOrder,
    h: &Hierarchy,
) -> Result<SupportSet, SampleError> {
    let (filtered, paths) = filter_rare_paths(dataset, k, h)?;
    greedy_sample(&filtered, &paths, k, seed, order)
}

/// Documents of `dataset` not present in `support`, preserving order.
pub fn remainder(dataset: &[Document], support: &SupportSet) -> Vec<Document> {
    let used: HashSet<&str> = support.documents.iter().map(|d| d.id.as_str()).collect();
    dataset
        .iter()
        .filter(|d| !used.contains(d.id.as_str()))
        .cloned()
        .collect()
}
