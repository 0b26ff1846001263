//! Encoder plus verbalizer head, the batch objective, and its gradient.

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{EncodeError, EncodeTrace, EncoderGrads, MaskHiddenStates, ToyEncoderParams, WrappedInput};
use crate::hierarchy::{Hierarchy, NodeId};
use crate::losses::{
    classification_loss_grad, fhc_loss_grad, hcc_propagate, hcc_propagate_backward, FhcOptions, LayerTargets,
    LossConfig, LossError,
};
use crate::verbalizer::{decode, probabilities, probabilities_backward, HeadError, HeadGrads, LayerProbabilities, VerbalizerHead};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {term} gradient in parameter group {group}")]
    NonFiniteGradient { term: &'static str, group: ParamGroup },
    #[error("non-finite {0} loss")]
    NonFiniteLoss(&'static str),
}

/// The five trainable tensors families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embeddings,
    Projections,
    EncoderBiases,
    VerbalizerWeights,
    VerbalizerBiases,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Embeddings,
        ParamGroup::Projections,
        ParamGroup::EncoderBiases,
        ParamGroup::VerbalizerWeights,
        ParamGroup::VerbalizerBiases,
    ];

    pub fn is_verbalizer(self) -> bool {
        matches!(self, ParamGroup::VerbalizerWeights | ParamGroup::VerbalizerBiases)
    }
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ParamGroup::Embeddings => "E",
            ParamGroup::Projections => "A_d",
            ParamGroup::EncoderBiases => "u_d",
            ParamGroup::VerbalizerWeights => "W_d",
            ParamGroup::VerbalizerBiases => "b_d",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: ToyEncoderParams,
    pub head: VerbalizerHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub encoder: EncoderGrads,
    pub head: HeadGrads,
}

/// A tokenized training instance with its per-depth gold indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: WrappedInput,
    pub targets: LayerTargets,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub hcc: f64,
    pub fhc: f64,
    pub total: f64,
}

/// Multipliers on the three loss terms; the usual objective is `(1, lambda1, lambda2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub classification: f64,
    pub hcc: f64,
    pub fhc: f64,
}

impl From<&LossConfig> for TermWeights {
    fn from(c: &LossConfig) -> Self {
        Self {
            classification: 1.0,
            hcc: c.lambda1,
            fhc: c.lambda2,
        }
    }
}

impl Grads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            encoder: EncoderGrads::zeros_like(&model.encoder),
            head: HeadGrads::zeros_like(&model.head),
        }
    }

    pub fn group(&self, group: ParamGroup) -> Vec<&[f64]> {
        match group {
            ParamGroup::Embeddings => vec![self.encoder.embeddings.as_slice().expect("contiguous")],
            ParamGroup::Projections => self.encoder.projections.iter().map(|a| a.as_slice().expect("contiguous")).collect(),
            ParamGroup::EncoderBiases => self.encoder.biases.iter().map(|a| a.as_slice().expect("contiguous")).collect(),
            ParamGroup::VerbalizerWeights => self.head.weights.iter().map(|a| a.as_slice().expect("contiguous")).collect(),
            ParamGroup::VerbalizerBiases => self.head.biases.iter().map(|a| a.as_slice().expect("contiguous")).collect(),
        }
    }

    fn check_finite(&self, term: &'static str) -> Result<(), ModelError> {
        for group in ParamGroup::ALL {
            if self.group(group).iter().any(|s| s.iter().any(|v| !v.is_finite())) {
                return Err(ModelError::NonFiniteGradient { term, group });
            }
        }
        Ok(())
    }
}

impl Model {
    pub fn depth(&self) -> usize {
        self.head.depth()
    }

    /// Mutable flat views of every parameter tensor, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out: Vec<(ParamGroup, &mut [f64])> = Vec::new();
        out.push((ParamGroup::Embeddings, self.encoder.embeddings.as_slice_mut().expect("contiguous")));
        for a in &mut self.encoder.projections {
            out.push((ParamGroup::Projections, a.as_slice_mut().expect("contiguous")));
        }
        for b in &mut self.encoder.biases {
            out.push((ParamGroup::EncoderBiases, b.as_slice_mut().expect("contiguous")));
        }
        for w in &mut self.head.weights {
            out.push((ParamGroup::VerbalizerWeights, w.as_slice_mut().expect("contiguous")));
        }
        for b in &mut self.head.biases {
            out.push((ParamGroup::VerbalizerBiases, b.as_slice_mut().expect("contiguous")));
        }
        out
    }

    /// Flat gradient views aligned with [`Model::params_mut`].
    pub fn grads_flat(grads: &Grads) -> Vec<&[f64]> {
        ParamGroup::ALL.iter().flat_map(|&g| grads.group(g)).collect()
    }

    /// Inference-mode probabilities for one input.
    pub fn predict_proba(&self, input: &WrappedInput, rng: &mut dyn RngCore) -> Result<LayerProbabilities, ModelError> {
        let trace = self.encoder.encode_traced(input, rng, false)?;
        let logits = self.head.layer_logits(trace.states())?;
        Ok(probabilities(&logits, self.head.mode))
    }

    pub fn predict(
        &self,
        input: &WrappedInput,
        threshold: f64,
        h: &Hierarchy,
        rng: &mut dyn RngCore,
    ) -> Result<BTreeSet<NodeId>, ModelError> {
        let p = self.predict_proba(input, rng)?;
        Ok(decode(&p, self.head.mode, threshold, h))
    }

    /// Batch objective `L_C + lambda1 L_HCC + lambda2 L_FHC` and its gradient.
    ///
    /// Classification and constraint-chain terms are averaged over the batch;
    /// the contrastive term is computed over all `2N` views. The second view
    /// is only encoded when the contrastive weight is non-zero.
    pub fn loss_and_grad(
        &self,
        batch: &[Example],
        h: &Hierarchy,
        cfg: &LossConfig,
        rng: &mut dyn RngCore,
    ) -> Result<(LossBreakdown, Grads), ModelError> {
        self.loss_and_grad_weighted(batch, h, cfg, TermWeights::from(cfg), rng)
    }

    pub fn loss_and_grad_weighted(
        &self,
        batch: &[Example],
        h: &Hierarchy,
        cfg: &LossConfig,
        weights: TermWeights,
        rng: &mut dyn RngCore,
    ) -> Result<(LossBreakdown, Grads), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let n = batch.len();
        let mode = self.head.mode;
        let use_fhc = weights.fhc != 0.0;
        let mut first: Vec<EncodeTrace> = Vec::with_capacity(n);
        let mut second: Vec<EncodeTrace> = Vec::new();
        for ex in batch {
            if use_fhc {
                let (a, b) = self.encoder.encode_two_views(&ex.input, rng)?;
                first.push(a);
                second.push(b);
            } else {
                first.push(self.encoder.encode_traced(&ex.input, rng, true)?);
            }
        }

        let mut grads = Grads::zeros_like(self);
        let mut breakdown = LossBreakdown::default();
        let layer_sizes = self.head.layer_sizes();
        let mut grad_states: Vec<Vec<Array1<f64>>> = Vec::with_capacity(2 * n);

        for (ex, trace) in batch.iter().zip(&first) {
            let logits = self.head.layer_logits(trace.states())?;
            let p = probabilities(&logits, mode);
            let (lc, mut grad_p) = classification_loss_grad(&p.0, &ex.targets, mode)?;
            breakdown.classification += lc / n as f64;
            for g in &mut grad_p {
                *g *= weights.classification / n as f64;
            }
            if p.0.len() > 1 {
                let propagated = hcc_propagate(&p, h, cfg.beta, cfg.hcc_source);
                let (lh, grad_t) = classification_loss_grad(&propagated, &ex.targets[..propagated.len()], mode)?;
                breakdown.hcc += lh / n as f64;
                if weights.hcc != 0.0 {
                    let scaled: Vec<Array1<f64>> = grad_t.iter().map(|g| g * (weights.hcc / n as f64)).collect();
                    let back = hcc_propagate_backward(&scaled, &layer_sizes, h, cfg.beta, cfg.hcc_source);
                    for (g, b) in grad_p.iter_mut().zip(back) {
                        *g += &b;
                    }
                }
            }
            let grad_logits = probabilities_backward(&p, &grad_p, mode);
            grad_states.push(self.head.backward(trace.states(), &grad_logits, &mut grads.head));
        }

        if use_fhc {
            let views: Vec<MaskHiddenStates> = first
                .iter()
                .chain(&second)
                .map(|t| t.states().clone())
                .collect();
            let labels: Vec<LayerTargets> = batch.iter().chain(batch).map(|e| e.targets.clone()).collect();
            let (lf, gf) = fhc_loss_grad(&views, &labels, FhcOptions::from(cfg))?;
            breakdown.fhc = lf;
            for (v, g) in gf.into_iter().enumerate() {
                let scaled: Vec<Array1<f64>> = g.into_iter().map(|x| x * weights.fhc).collect();
                if v < n {
                    for (acc, s) in grad_states[v].iter_mut().zip(scaled) {
                        *acc += &s;
                    }
                } else {
                    grad_states.push(scaled);
                }
            }
        }

        for (trace, g) in first.iter().chain(&second).zip(&grad_states) {
            self.encoder.backward(trace, g, &mut grads.encoder);
        }

        breakdown.total = weights.classification * breakdown.classification
            + weights.hcc * breakdown.hcc
            + weights.fhc * breakdown.fhc;
        for (name, v) in [
            ("classification", breakdown.classification),
            ("hcc", breakdown.hcc),
            ("fhc", breakdown.fhc),
        ] {
            if !v.is_finite() {
                return Err(ModelError::NonFiniteLoss(name));
            }
        }
        grads.check_finite("total")?;
        Ok((breakdown, grads))
    }
}
