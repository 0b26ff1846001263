//! Synthetic taxonomies and corpora for desk-scale experiments.
//!
//! Labels are single tokens (`topic0`, `topic0-2`, ...). Each document of a
//! leaf path emits the name of every label on its path with probability
//! `signal`, padded with noise words `w0..w{noise_vocab-1}`.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{Hierarchy, NodeId};
use crate::sampler::Document;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub branching: Vec<usize>,
    pub docs_per_path: usize,
    pub tokens_per_doc: usize,
    pub signal: f64,
    pub noise_vocab: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            branching: vec![3, 4],
            docs_per_path: 5,
            tokens_per_doc: 8,
            signal: 1.0,
            noise_vocab: 40,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.branching.is_empty() || self.branching.contains(&0) {
            return Err(SynthError::Invalid("branching needs >= 1 depth, each factor >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return Err(SynthError::Invalid(format!("signal {} outside [0, 1]", self.signal)));
        }
        if self.docs_per_path == 0 {
            return Err(SynthError::Invalid("docs_per_path must be >= 1".into()));
        }
        if self.noise_vocab == 0 && self.signal == 0.0 {
            return Err(SynthError::Invalid("documents would be empty (no signal, no noise)".into()));
        }
        Ok(())
    }
}

/// Complete-layered tree with the given branching factor at every depth.
pub fn build_tree(branching: &[usize]) -> Hierarchy {
    let mut edges: Vec<(Option<String>, String)> = Vec::new();
    let mut frontier: Vec<Option<String>> = vec![None];
    for &b in branching {
        let mut next = Vec::new();
        for parent in &frontier {
            for i in 0..b {
                let name = match parent {
                    None => format!("topic{i}"),
                    Some(p) => format!("{p}-{i}"),
                };
                edges.push((parent.clone(), name.clone()));
                next.push(Some(name));
            }
        }
        frontier = next;
    }
    Hierarchy::from_edges(&edges).expect("generated tree is valid")
}

/// Hierarchy plus one document list; documents are grouped by leaf path.
pub fn generate(spec: &SyntheticSpec) -> Result<(Hierarchy, Vec<Document>), SynthError> {
    spec.validate()?;
    let h = build_tree(&spec.branching);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut docs = Vec::new();
    for path in h.leaf_paths() {
        for k in 0..spec.docs_per_path {
            let mut tokens: Vec<String> = path
                .nodes
                .iter()
                .filter(|_| rng.gen::<f64>() < spec.signal)
                .map(|n| h.name(*n).to_string())
                .collect();
            if spec.noise_vocab > 0 {
                while tokens.len() < spec.tokens_per_doc.max(1) {
                    tokens.push(format!("w{}", rng.gen_range(0..spec.noise_vocab)));
                }
            }
            tokens.shuffle(&mut rng);
            let labels: BTreeSet<NodeId> = path.nodes.iter().copied().collect();
            let id = format!("p{}-d{}", path.id.0, k);
            let doc = Document::new(&h, id, tokens.join(" "), labels).expect("single complete path");
            docs.push(doc);
        }
    }
    Ok((h, docs))
}
