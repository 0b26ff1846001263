//! Multi-verbalizer head: one soft verbalizer per hierarchy depth.
//!
//! The depth-`d` mask state feeds only the depth-`d` verbalizer, whose
//! `r x l_d` matrix scores every label of that layer.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{split_tokens, MaskHiddenStates, Vocab};
use crate::hierarchy::{Hierarchy, NodeId};

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("hierarchy has no labels")]
    EmptyHierarchy,
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("malformed head checkpoint: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One gold label per layer; softmax over the layer.
    #[default]
    SinglePath,
    /// Any number of gold labels per layer; independent sigmoids.
    MultiPath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerbalizerHead {
    /// `r x l_d` per depth.
    pub weights: Vec<Array2<f64>>,
    /// `l_d` per depth.
    pub biases: Vec<Array1<f64>>,
    pub mode: Mode,
}

/// Per-depth probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProbabilities(pub Vec<Array1<f64>>);

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl HeadGrads {
    pub fn zeros_like(head: &VerbalizerHead) -> Self {
        Self {
            weights: head.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: head.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }
}

impl VerbalizerHead {
    /// Column `j` of `W_d` is the mean embedding over every token of label
    /// `j`'s name and the names of all its descendants; biases start at zero.
    pub fn init(
        h: &Hierarchy,
        embeddings: &Array2<f64>,
        vocab: &Vocab,
        mode: Mode,
    ) -> Result<Self, HeadError> {
        if h.is_empty() {
            return Err(HeadError::EmptyHierarchy);
        }
        let r = embeddings.ncols();
        let mut weights = Vec::with_capacity(h.depth());
        for layer in h.layers() {
            let mut w = Array2::zeros((r, layer.len()));
            for (j, &label) in layer.iter().enumerate() {
                let mut tokens = split_tokens(h.name(label));
                for d in h.descendants(label) {
                    tokens.extend(split_tokens(h.name(d)));
                }
                let mut col = Array1::<f64>::zeros(r);
                for t in &tokens {
                    col += &embeddings.row(vocab.id(t));
                }
                col /= tokens.len().max(1) as f64;
                w.column_mut(j).assign(&col);
            }
            weights.push(w);
        }
        let biases = h.layers().iter().map(|l| Array1::zeros(l.len())).collect();
        Ok(Self {
            weights,
            biases,
            mode,
        })
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn hidden(&self) -> usize {
        self.weights.first().map_or(0, |w| w.nrows())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.weights.iter().map(|w| w.ncols()).collect()
    }

    /// `h^d W_d + b_d` for each depth.
    pub fn layer_logits(&self, states: &MaskHiddenStates) -> Result<Vec<Array1<f64>>, HeadError> {
        if states.depth() != self.depth() {
            return Err(HeadError::Shape(format!(
                "{} mask states for {} verbalizers",
                states.depth(),
                self.depth()
            )));
        }
        states
            .0
            .iter()
            .zip(self.weights.iter().zip(&self.biases))
            .map(|(h, (w, b))| {
                if h.len() != w.nrows() {
                    return Err(HeadError::Shape(format!(
                        "hidden size {} vs verbalizer rows {}",
                        h.len(),
                        w.nrows()
                    )));
                }
                Ok(h.dot(w) + b)
            })
            .collect()
    }

    /// Accumulates `dL/dW`, `dL/db` and returns `dL/dh^d` given `dL/dlogits`.
    pub fn backward(
        &self,
        states: &MaskHiddenStates,
        grad_logits: &[Array1<f64>],
        grads: &mut HeadGrads,
    ) -> Vec<Array1<f64>> {
        let mut grad_states = Vec::with_capacity(self.depth());
        for d in 0..self.depth() {
            let h = &states.0[d];
            let g = &grad_logits[d];
            let w = &mut grads.weights[d];
            for i in 0..h.len() {
                for j in 0..g.len() {
                    w[[i, j]] += h[i] * g[j];
                }
            }
            grads.biases[d] += g;
            grad_states.push(self.weights[d].dot(g));
        }
        grad_states
    }
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|z| (z - max).exp());
    let total = exp.sum();
    exp / total
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softmax per layer for single-path, elementwise sigmoid for multi-path.
pub fn probabilities(logits: &[Array1<f64>], mode: Mode) -> LayerProbabilities {
    LayerProbabilities(
        logits
            .iter()
            .map(|z| match mode {
                Mode::SinglePath => softmax(z.view()),
                Mode::MultiPath => z.mapv(sigmoid),
            })
            .collect(),
    )
}

/// Backpropagates `dL/dp` through the probability map of `mode`.
pub fn probabilities_backward(p: &LayerProbabilities, grad_p: &[Array1<f64>], mode: Mode) -> Vec<Array1<f64>> {
    p.0.iter()
        .zip(grad_p)
        .map(|(p, g)| match mode {
            Mode::SinglePath => {
                let inner = p.dot(g);
                p * &(g - inner)
            }
            Mode::MultiPath => g * &p.mapv(|v| v * (1.0 - v)),
        })
        .collect()
}

/// Per-layer argmax (lowest index wins ties) or thresholding, flattened into
/// a label set over all depths.
pub fn decode(p: &LayerProbabilities, mode: Mode, threshold: f64, h: &Hierarchy) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    for (d, layer) in p.0.iter().enumerate() {
        let ids = h.layer(d + 1);
        match mode {
            Mode::SinglePath => {
                let mut best = 0;
                for (j, &v) in layer.iter().enumerate() {
                    if v > layer[best] {
                        best = j;
                    }
                }
                if !layer.is_empty() {
                    out.insert(ids[best]);
                }
            }
            Mode::MultiPath => {
                out.extend(
                    layer
                        .iter()
                        .enumerate()
                        .filter(|(_, &v)| v >= threshold)
                        .map(|(j, _)| ids[j]),
                );
            }
        }
    }
    out
}

/// On-disk head layout: shape header plus row-major flat data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFile {
    #[serde(rename = "D")]
    pub depth: usize,
    pub r: usize,
    pub layer_sizes: Vec<usize>,
    pub mode: Mode,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<&VerbalizerHead> for HeadFile {
    fn from(head: &VerbalizerHead) -> Self {
        Self {
            depth: head.depth(),
            r: head.hidden(),
            layer_sizes: head.layer_sizes(),
            mode: head.mode,
            weights: head.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: head.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }
}

impl TryFrom<HeadFile> for VerbalizerHead {
    type Error = HeadError;

    fn try_from(file: HeadFile) -> Result<Self, HeadError> {
        if file.layer_sizes.len() != file.depth
            || file.weights.len() != file.depth
            || file.biases.len() != file.depth
        {
            return Err(HeadError::Parse("depth does not match layer arrays".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for ((&l, w), b) in file.layer_sizes.iter().zip(file.weights).zip(file.biases) {
            if b.len() != l {
                return Err(HeadError::Parse(format!("bias length {} != {l}", b.len())));
            }
            weights.push(
                Array2::from_shape_vec((file.r, l), w).map_err(|e| HeadError::Parse(e.to_string()))?,
            );
            biases.push(Array1::from(b));
        }
        Ok(Self {
            weights,
            biases,
            mode: file.mode,
        })
    }
}
